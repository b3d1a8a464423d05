"""Cross-modal inverted-file (IVF) indexing toolkit.

Paired k-means coarse quantization, an IVF index with recall evaluation,
Monte Carlo checks of the recall geometry, and a retrieval-side dataset
construction pipeline, all on plain numpy embedding matrices.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CmivfError,
    ConfigError,
    DimensionMismatch,
    DomainError,
    EmptyPairs,
    EmptyResult,
    FormatError,
    InvalidK,
    InvalidNProbe,
    NotADistribution,
    SingleCentroid,
    TooFewAugmentations,
    ZeroVector,
)
from .io import read_cmeb, write_cmeb  # noqa: E402
from .ivf import (  # noqa: E402
    IvfIndex,
    RecallReport,
    build_index,
    eval_recall,
    load_index,
    recall_sweep,
    save_index,
    search,
)
from .kmeans import (  # noqa: E402
    Centroids,
    PairedSet,
    TrainLog,
    objective_crossmodal,
    objective_kmeans,
    run_kmeans,
    run_paired_kmeans,
)
from .pipeline import (  # noqa: E402
    DatasetManifest,
    cluster_select,
    construct_dataset,
    cosine_pseudo_label,
    diversified_retrieve,
    diversity_loss,
    rank_pseudo_label,
    select_augmentations,
)
from .synth import GapConfig, SynthBundle, gen_gap_dataset, gen_hub_scenario, gen_label_augmentations  # noqa: E402
from .theory import (  # noqa: E402
    Thm1Report,
    Thm2Report,
    pdf_thm2,
    s_prime,
    tail_bound,
    verify_thm1,
    verify_thm2,
    voronoi_mismatch_map,
)
from .vecspace import (  # noqa: E402
    EmbeddingSet,
    RetrievalResult,
    cap_fraction,
    exact_nn,
    l2_normalize,
    reg_inc_beta,
    sample_gaussian,
    sample_uniform_sphere,
)
