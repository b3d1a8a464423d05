"""Synthetic embeddings that reproduce the modality gap, label hubs and
augmentation collapse without a real vision-language encoder.

Noise conventions: an isotropic Gaussian perturbation with "magnitude" s
has per-coordinate standard deviation s / sqrt(d), so its expected norm is
close to s regardless of dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ConfigError
from .vecspace import EmbeddingSet, exact_nn, make_rng

# independent sub-streams of one seed
_DIRS, _GAP, _IMAGES, _TEXT, _TRAIN_TEXT, _IMAGE_QUERIES = range(6)


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _unit_vectors(rng, n, d):
    return _normalize(rng.standard_normal((n, d)))


def _noise(rng, shape, magnitude, d):
    return rng.standard_normal(shape) * (magnitude / np.sqrt(d))


@dataclass
class GapConfig:
    n_concepts: int = 1000
    per_concept_images: int = 100
    d: int = 64
    concept_spread: float = 0.2
    gap_magnitude: float = 1.0
    text_noise: float = 0.1
    seed: int = 0
    # paired k-means training texts per concept; evaluation queries are drawn separately
    train_texts_per_concept: int = 10
    # held-out image queries per concept for in-modal recall
    image_queries_per_concept: int = 1

    def validate(self):
        if self.n_concepts < 1 or self.per_concept_images < 1:
            raise ConfigError("n_concepts and per_concept_images must be >= 1")
        if self.d < 2:
            raise ConfigError(f"d must be >= 2, got {self.d}")
        for name in ("concept_spread", "gap_magnitude", "text_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.train_texts_per_concept < 1 or self.image_queries_per_concept < 1:
            raise ConfigError("train_texts_per_concept and image_queries_per_concept must be >= 1")


@dataclass(eq=False)
class SynthBundle:
    gallery: EmbeddingSet
    gallery_concept_ids: np.ndarray
    text_queries: EmbeddingSet
    text_concept_ids: np.ndarray
    ground_truth_nn: np.ndarray
    train_text: EmbeddingSet
    train_text_concept_ids: np.ndarray
    image_queries: EmbeddingSet
    image_query_concept_ids: np.ndarray
    image_ground_truth_nn: np.ndarray
    gap_vector: np.ndarray
    concept_dirs: np.ndarray


def gen_gap_dataset(cfg: GapConfig) -> SynthBundle:
    cfg.validate()
    c, d = cfg.n_concepts, cfg.d
    dirs = _unit_vectors(make_rng(cfg.seed, _DIRS), c, d)
    gap = _unit_vectors(make_rng(cfg.seed, _GAP), 1, d)[0]

    def images(stream, per):
        rng = make_rng(cfg.seed, stream)
        base = np.repeat(dirs, per, axis=0)
        x = _normalize(base + _noise(rng, base.shape, cfg.concept_spread, d))
        return x.astype(np.float32), np.repeat(np.arange(c), per)

    def texts(stream, per):
        rng = make_rng(cfg.seed, stream)
        base = np.repeat(dirs, per, axis=0) + cfg.gap_magnitude * gap
        x = _normalize(base + _noise(rng, base.shape, cfg.text_noise, d))
        return x.astype(np.float32), np.repeat(np.arange(c), per)

    gallery, gallery_cid = images(_IMAGES, cfg.per_concept_images)
    text, text_cid = texts(_TEXT, 1)
    train, train_cid = texts(_TRAIN_TEXT, cfg.train_texts_per_concept)
    img_q, img_q_cid = images(_IMAGE_QUERIES, cfg.image_queries_per_concept)
    gallery_set = EmbeddingSet(gallery, normalized=True)
    text_set = EmbeddingSet(text, normalized=True)
    img_q_set = EmbeddingSet(img_q, normalized=True)
    return SynthBundle(
        gallery=gallery_set,
        gallery_concept_ids=gallery_cid,
        text_queries=text_set,
        text_concept_ids=text_cid,
        ground_truth_nn=exact_nn(text_set, gallery_set, 1).ids[:, 0],
        train_text=EmbeddingSet(train, normalized=True),
        train_text_concept_ids=train_cid,
        image_queries=img_q_set,
        image_query_concept_ids=img_q_cid,
        image_ground_truth_nn=exact_nn(img_q_set, gallery_set, 1).ids[:, 0],
        gap_vector=gap,
        concept_dirs=dirs,
    )


def gen_hub_scenario(n_labels: int, hub_label: int, d: int = 64, seed: int = 0, *,
                     per_label: int = 32, orthogonalize_hub: bool = False,
                     image_noise: float = 0.3):
    """Labelled gallery plus one text feature per label, one of which is a hub.

    Images are ``0.7 * m + 0.7 * u_label + noise`` for a shared mean
    direction ``m``. Ordinary label texts sit on ``u_label`` shifted by a gap
    vector orthogonal to ``m``, so their cosine with their own images is
    about 0.5. The hub text points (almost) along ``m`` and therefore has
    cosine about 0.7 with every image. With ``orthogonalize_hub`` the ``m``
    component is projected out of the hub text, which removes the effect.
    """
    if n_labels < 2:
        raise ConfigError(f"need at least 2 labels, got {n_labels}")
    if not 0 <= hub_label < n_labels:
        raise ConfigError(f"hub_label {hub_label} outside [0, {n_labels})")
    if d < n_labels + 2:
        raise ConfigError(f"d={d} too small for {n_labels} orthogonal label directions")
    if per_label < 1:
        raise ConfigError("per_label must be >= 1")
    rng = make_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, n_labels + 2)))
    mean_dir, gap = basis[:, 0], basis[:, 1]
    label_dirs = basis[:, 2:].T
    true_labels = np.repeat(np.arange(n_labels), per_label)
    base = 0.7 * mean_dir + 0.7 * label_dirs[true_labels]
    gallery = _normalize(base + _noise(rng, base.shape, image_noise, d))
    texts = _normalize(label_dirs + gap)
    hub = mean_dir + 0.3 * label_dirs[hub_label]
    if orthogonalize_hub:
        hub = hub - (hub @ mean_dir) * mean_dir
    texts[hub_label] = _normalize(hub)
    return (
        EmbeddingSet(texts.astype(np.float32), normalized=True),
        EmbeddingSet(gallery.astype(np.float32), normalized=True),
        true_labels,
    )


def gen_label_augmentations(n_labels: int, n_augs: int, k2_clusters: int, d: int = 64,
                            seed: int = 0, include_collapsing: bool = True
                            ) -> Tuple[EmbeddingSet, List[EmbeddingSet], np.ndarray]:
    """Label features in ``k2_clusters`` tight groups plus ``n_augs`` augmented copies.

    Augmentation 0 is the identity. Benign augmentations add small independent
    noise and push each label slightly away from its cluster mean, so
    within-cluster similarity does not rise. With ``include_collapsing`` the
    second half of the augmentations pull labels toward their cluster mean;
    the last one collapses every cluster onto its mean direction.
    """
    if n_augs < 2:
        raise ConfigError(f"need at least 2 augmentations, got {n_augs}")
    if k2_clusters < 1 or n_labels < 2 * k2_clusters:
        raise ConfigError("need at least two labels per cluster")
    rng = make_rng(seed)
    centers = _unit_vectors(rng, k2_clusters, d)
    cluster_ids = np.arange(n_labels) % k2_clusters
    labels = _normalize(centers[cluster_ids] + _noise(rng, (n_labels, d), 0.4, d))
    means = np.stack([labels[cluster_ids == j].mean(axis=0) for j in range(k2_clusters)])
    mean_dirs = _normalize(means)

    n_collapse = n_augs // 2 if include_collapsing else 0
    augmented = [labels.copy()]
    for a in range(1, n_augs):
        if a >= n_augs - n_collapse:
            if a == n_augs - 1:
                strength = np.ones(k2_clusters)
            else:
                strength = rng.uniform(0.3, 0.9, k2_clusters) * (rng.random(k2_clusters) < 0.5)
            s = strength[cluster_ids][:, None]
            aug = _normalize((1 - s) * labels + s * mean_dirs[cluster_ids])
        else:
            spread = labels + 0.3 * (labels - means[cluster_ids])
            aug = _normalize(spread + _noise(rng, labels.shape, 0.05, d))
        augmented.append(aug)
    return (
        EmbeddingSet(labels.astype(np.float32), normalized=True),
        [EmbeddingSet(a.astype(np.float32), normalized=True) for a in augmented],
        cluster_ids,
    )
