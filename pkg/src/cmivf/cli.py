"""Command-line entry point: ``cmivf <subcommand> ...``.

Every command that writes a file also writes the parameters it ran with,
as ``<output>.config.json`` next to a file output or ``config.json`` inside
an output directory. Exit codes: 0 success, 2 usage or configuration
error, 3 I/O or file-format error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import CmivfError, FormatError
from .io import read_cmeb, write_cmeb
from .ivf import QUANT_CODES, build_index, eval_recall, load_index, save_index, search
from .kmeans import PairedSet, run_kmeans, run_paired_kmeans, save_centroids
from .pipeline import (
    MIN_SIMILARITY,
    construct_dataset,
    gallery_from_index,
    select_augmentations,
)
from .reports import (
    COMPARE_COLUMNS,
    RECALL_COLUMNS,
    SEARCH_COLUMNS,
    THM1_COLUMNS,
    THM2_COLUMNS,
    THM2_TAIL_COLUMNS,
    VORONOI_COLUMNS,
    emit_csv,
    fmt,
    write_json,
)
from .synth import GapConfig, gen_gap_dataset, gen_hub_scenario, gen_label_augmentations
from .theory import BINNINGS, verify_thm1, verify_thm2, voronoi_mismatch_map
from .vecspace import cap_fraction, exact_nn

log = logging.getLogger("cmivf")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4


def int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _config_path(out: Path) -> Path:
    if out.is_dir():
        return out / "config.json"
    return out.with_name(out.name + ".config.json")


def write_config(args: argparse.Namespace, out) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    cfg["command"] = cfg.pop("command")
    cfg["output"] = str(out)
    cfg["version"] = __version__
    write_json(cfg, _config_path(Path(out)))


def _cmeb_files(directory) -> List[Path]:
    files = sorted(Path(directory).glob("*.cmeb"))
    if not files:
        raise FileNotFoundError(f"no .cmeb files in {directory}")
    return files


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gap":
        cfg = GapConfig(n_concepts=args.n_concepts, per_concept_images=args.per_concept_images, d=args.d,
                        concept_spread=args.concept_spread, gap_magnitude=args.gap_magnitude,
                        text_noise=args.text_noise, seed=args.seed,
                        train_texts_per_concept=args.train_texts_per_concept)
        b = gen_gap_dataset(cfg)
        write_cmeb(out / "gallery.cmeb", b.gallery)
        write_cmeb(out / "text_queries.cmeb", b.text_queries)
        write_cmeb(out / "train_text.cmeb", b.train_text)
        write_cmeb(out / "image_queries.cmeb", b.image_queries)
        manifest = {
            "kind": "gap",
            "gallery_concept_ids": b.gallery_concept_ids,
            "text_concept_ids": b.text_concept_ids,
            "ground_truth_nn": b.ground_truth_nn,
            "train_text_concept_ids": b.train_text_concept_ids,
            "image_query_concept_ids": b.image_query_concept_ids,
            "image_ground_truth_nn": b.image_ground_truth_nn,
            "gap_vector": b.gap_vector,
        }
    elif args.kind == "hub":
        texts, gallery, true_labels = gen_hub_scenario(args.n_labels, args.hub_label, args.d, args.seed,
                                                       orthogonalize_hub=args.orthogonalize_hub)
        write_cmeb(out / "labels.cmeb", texts)
        write_cmeb(out / "gallery.cmeb", gallery)
        manifest = {"kind": "hub", "hub_label": args.hub_label, "true_labels": true_labels}
    else:
        labels, augmented, clusters = gen_label_augmentations(args.n_labels, args.n_augs, args.k2, args.d,
                                                              args.seed)
        write_cmeb(out / "labels.cmeb", labels)
        (out / "augs").mkdir(exist_ok=True)
        for i, a in enumerate(augmented):
            write_cmeb(out / "augs" / f"aug_{i:03d}.cmeb", a)
        manifest = {"kind": "augs", "cluster_ids": clusters, "n_augs": len(augmented)}
    write_json(manifest, out / "manifest.json")
    write_config(args, out)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_build_index(args) -> int:
    gallery = read_cmeb(args.gallery)
    if args.clustering == "paired":
        if not args.text:
            raise CmivfError("--clustering paired needs --text with the training text queries")
        pairs = PairedSet.from_gallery(read_cmeb(args.text), gallery, gallery_ref=str(args.gallery))
        cent, train_log = run_paired_kmeans(pairs, gallery, args.k, args.iters, args.seed)
    else:
        cent, train_log = run_kmeans(gallery, args.k, args.iters, args.seed)
    index = build_index(gallery, cent, args.quant)
    save_index(index, args.out)
    if args.centroids:
        save_centroids(args.centroids, cent, variant=args.clustering, iters=args.iters, seed=args.seed,
                       log=train_log)
    write_config(args, args.out)
    log.info("index k=%d total=%d -> %s", index.k, index.total, args.out)
    return EXIT_OK


def cmd_search(args) -> int:
    index = load_index(args.index)
    queries = read_cmeb(args.queries)
    res = search(index, queries, args.nprobe, args.topk)
    rows = []
    for q in range(res.n_queries):
        for r in range(res.ids.shape[1]):
            if res.ids[q, r] >= 0:
                rows.append({"query": q, "rank": r + 1, "id": int(res.ids[q, r]),
                             "similarity": float(res.sims[q, r])})
    emit_csv(rows, args.out, SEARCH_COLUMNS)
    write_config(args, args.out)
    return EXIT_OK


def cmd_eval_recall(args) -> int:
    index = load_index(args.index)
    queries = read_cmeb(args.queries)
    gallery = read_cmeb(args.gallery) if args.gallery else gallery_from_index(index)
    truth = exact_nn(queries, gallery, 1).ids[:, 0]
    reports = [eval_recall(index, queries, gallery, p, truth) for p in args.nprobe]
    emit_csv(reports, args.out, RECALL_COLUMNS)
    write_config(args, args.out)
    for r in reports:
        print(f"n_probe={r.n_probe} recall_at_1={fmt(r.recall_at_1)}")
    return EXIT_OK


def cmd_verify_thm1(args) -> int:
    rep = verify_thm1(n=args.n, k=args.k, d=args.d, seed=args.seed, n_bins=args.bins,
                      n_queries=args.queries, n_boundary=args.boundary_queries, binning=args.binning)
    rows = [{"bin": i, "cos_lo": b.lo, "cos_hi": b.hi, "recall_at_1": b.recall_at_1, "count": b.count}
            for i, b in enumerate(rep.bins)]
    emit_csv(rows, args.out, THM1_COLUMNS)
    write_config(args, args.out)
    summary = {
        "spearman_rho": rep.spearman_rho,
        "boundary_recall_estimate": rep.boundary_recall_estimate,
        "boundary_count": rep.boundary_count,
        "s_prime": rep.s_prime,
        "rho_s_prime": rep.rho_s_prime,
        "epsilon": rep.epsilon,
    }
    write_json(summary, Path(args.out).with_name(Path(args.out).name + ".summary.json"))
    print(f"spearman_rho={fmt(rep.spearman_rho)} boundary_recall={fmt(rep.boundary_recall_estimate)}")
    return EXIT_OK


def _tails_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_tails" + (out.suffix or ".csv"))


def cmd_verify_thm2(args) -> int:
    reports = verify_thm2(d=args.d, n=args.n, p_norms=args.pnorms, trials=args.trials, seed=args.seed,
                          alpha=args.alpha)
    rows, tails = [], []
    for r in reports:
        rows.append({
            "p_norm": r.p_norm, "trials": r.trials,
            "ks_orth_stat": r.ks_orthogonal.statistic, "ks_orth_p": r.ks_orthogonal.pvalue,
            "ks_orth_pass": r.ks_orthogonal.passed,
            "ks_par_stat": r.ks_parallel.statistic, "ks_par_p": r.ks_parallel.pvalue,
            "ks_par_pass": r.ks_parallel.passed,
            "dispersion": r.dispersion, "tails_ok": r.tails_ok,
        })
        for t in r.tail_bound_checks:
            tails.append({"p_norm": r.p_norm, "r": t.r, "empirical_tail": t.empirical, "bound": t.bound,
                          "exact_tail": t.exact, "sigma": t.sigma, "passed": t.passed})
    emit_csv(rows, args.out, THM2_COLUMNS)
    emit_csv(tails, _tails_path(args.out), THM2_TAIL_COLUMNS)
    write_config(args, args.out)
    if not all(r.tails_ok for r in reports):
        raise AssertionError("an empirical tail exceeded the upper bound beyond 3 sigma")
    return EXIT_OK


def cmd_verify_cap(args) -> int:
    print(fmt(cap_fraction(args.s, args.d)))
    return EXIT_OK


def cmd_voronoi_map(args) -> int:
    rows = voronoi_mismatch_map(n=args.n, k=args.k, seed=args.seed, radii=args.radii,
                                probes_per_bin=args.probes)
    emit_csv(rows, args.out, VORONOI_COLUMNS)
    write_config(args, args.out)
    return EXIT_OK


def cmd_select_augs(args) -> int:
    labels = read_cmeb(args.labels)
    augmented = [read_cmeb(p) for p in _cmeb_files(args.augs)]
    scores = select_augmentations(labels, augmented, k2=args.k2, m=args.m, seed=args.seed)
    write_json({"k2": args.k2, "m": args.m, "scores": [asdict(s) for s in scores],
                "selected": [s.aug_id for s in scores if s.selected]}, args.out)
    write_config(args, args.out)
    return EXIT_OK


def cmd_construct_dataset(args) -> int:
    index = load_index(args.index)
    queries = [read_cmeb(p) for p in _cmeb_files(args.queries)]
    min_sim = None if args.no_similarity_filter else args.min_similarity
    manifest = construct_dataset(index, queries, n_neighbors=args.n_neighbors, n_probe=args.nprobe,
                                 k1=args.k1, seed=args.seed, labeler=args.labeler, min_similarity=min_sim)
    manifest.save(args.out)
    write_config(args, args.out)
    print(f"entries={len(manifest)} labels={len(manifest.per_label_counts)}")
    return EXIT_OK


def compare_clustering(seeds: Sequence[int], n_probes: Sequence[int], k: int, iters: int, cfg: GapConfig):
    """Standard versus paired k-means recall rows for every seed and n_probe."""
    rows = []
    for seed in seeds:
        b = gen_gap_dataset(GapConfig(**{**asdict(cfg), "seed": seed}))
        std, _ = run_kmeans(b.gallery, k, iters, seed)
        pairs = PairedSet.from_gallery(b.train_text, b.gallery)
        paired, _ = run_paired_kmeans(pairs, b.gallery, k, iters, seed)
        for name, cent in (("kmeans", std), ("paired", paired)):
            index = build_index(b.gallery, cent)
            for p in n_probes:
                text = eval_recall(index, b.text_queries, b.gallery, p, b.ground_truth_nn)
                image = eval_recall(index, b.image_queries, b.gallery, p, b.image_ground_truth_nn)
                rows.append({"seed": seed, "clustering": name, "n_probe": p,
                             "recall_at_1": text.recall_at_1, "in_modal_recall_at_1": image.recall_at_1,
                             "mean_buckets": text.mean_buckets, "mean_candidates": text.mean_candidates})
    return rows


def cmd_compare_clustering(args) -> int:
    cfg = GapConfig(n_concepts=args.n_concepts, per_concept_images=args.per_concept_images, d=args.d,
                    gap_magnitude=args.gap_magnitude)
    rows = compare_clustering(args.seeds, args.nprobe, args.k, args.iters, cfg)
    emit_csv(rows, args.out, COMPARE_COLUMNS)
    write_config(args, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmivf", description="Cross-modal IVF indexing toolkit.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP thread count (default: $CMIVF_THREADS, else library default)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "Generate a synthetic dataset (CMEB files + manifest.json).")
    p.add_argument("--kind", choices=("gap", "hub", "augs"), default="gap")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n-concepts", type=int, default=1000)
    p.add_argument("--per-concept-images", type=int, default=100)
    p.add_argument("--concept-spread", type=float, default=0.2)
    p.add_argument("--gap-magnitude", type=float, default=1.0)
    p.add_argument("--text-noise", type=float, default=0.1)
    p.add_argument("--train-texts-per-concept", type=int, default=10)
    p.add_argument("--n-labels", type=int, default=10, help="hub/augs: number of labels")
    p.add_argument("--hub-label", type=int, default=0)
    p.add_argument("--orthogonalize-hub", action="store_true")
    p.add_argument("--n-augs", type=int, default=32)
    p.add_argument("--k2", type=int, default=4)

    p = add("build-index", cmd_build_index, "Train a coarse quantizer and write a CMIV index.")
    p.add_argument("--gallery", required=True, help="gallery CMEB file (unit-norm rows)")
    p.add_argument("--text", help="training text queries (CMEB), required for --clustering paired")
    p.add_argument("--clustering", choices=("kmeans", "paired"), default="kmeans")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quant", choices=tuple(QUANT_CODES), default="none")
    p.add_argument("--centroids", help="also write centroids (CMEB + .json sidecar) here")
    p.add_argument("--out", required=True)

    p = add("search", cmd_search, "Search an index; CSV of (query, rank, id, similarity).")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--out", required=True)

    p = add("eval-recall", cmd_eval_recall, "R@1 against exact search for a list of n_probe values.")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", help="exact-search gallery (default: vectors stored in the index)")
    p.add_argument("--nprobe", type=int_list, default=[1, 4, 16])
    p.add_argument("--out", required=True)

    p = add("verify-thm1", cmd_verify_thm1, "Recall versus query-centroid cosine on the unit sphere.")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--binning", choices=BINNINGS, default="width")
    p.add_argument("--queries", type=int, default=10_000)
    p.add_argument("--boundary-queries", type=int, default=2_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("verify-thm2", cmd_verify_thm2, "Nearest-Gaussian-point laws and tail bound checks.")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--pnorms", type=float_list, default=[0.0, 2.0, 5.0, 20.0])
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="KS CSV; tail checks go to <stem>_tails.csv")

    p = add("verify-cap", cmd_verify_cap, "Print the spherical-cap fraction for cosine s in dimension d.")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--s", type=float, required=True)

    p = add("voronoi-map", cmd_voronoi_map, "2-D centroid-cell vs exact-NN-cell mismatch by probe radius.")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--probes", type=int, default=10_000)
    p.add_argument("--radii", type=float_list, default=[0.5 * i for i in range(1, 9)])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("select-augs", cmd_select_augs, "Score label augmentations and keep the best m.")
    p.add_argument("--labels", required=True)
    p.add_argument("--augs", required=True, help="directory of augmented label CMEB files (sorted by name)")
    p.add_argument("--k2", type=int, default=16)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("construct-dataset", cmd_construct_dataset, "Retrieve, pseudo-label and balance a dataset.")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="directory of label-query CMEB files, one per augmentation")
    p.add_argument("--n-neighbors", type=int, default=64)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--k1", type=int, default=96)
    p.add_argument("--labeler", choices=("rank", "cosine"), default="rank")
    p.add_argument("--min-similarity", type=float, default=MIN_SIMILARITY)
    p.add_argument("--no-similarity-filter", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("compare-clustering", cmd_compare_clustering, "Standard vs paired k-means recall over n_probe.")
    p.add_argument("--seeds", type=int_list, default=[0, 1, 2])
    p.add_argument("--nprobe", type=int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--n-concepts", type=int, default=1000)
    p.add_argument("--per-concept-images", type=int, default=100)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--gap-magnitude", type=float, default=1.0)
    p.add_argument("--out", required=True)
    return parser


def _thread_count(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("CMIVF_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CmivfError(f"CMIVF_THREADS must be an integer, got {env!r}")
    return None


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        threads = _thread_count(args)
        if threads is not None and threads < 1:
            raise CmivfError(f"--threads must be >= 1, got {threads}")
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except FormatError as exc:
        print(f"cmivf: format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"cmivf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AssertionError as exc:
        print(f"cmivf: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (CmivfError, ValueError) as exc:
        print(f"cmivf: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
