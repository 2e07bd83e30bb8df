"""Unsupervised segmentation of deep spatial features via non-negative factorization.

A feature tensor extracted from a pre-trained vision backbone is
factorized into per-pixel concept contributions and concept features;
concepts are kept consistent across images through a k-means vocabulary
trained on pooled features, either by cosine-matching factorized concepts
to cluster centers or by pinning the concept matrix to the centers and
solving only for the contributions.
"""

__version__ = "0.1.0"

from .errors import (
    CoverageError,
    DegenerateCenterError,
    DimensionError,
    FsegError,
    FstFormatError,
    InputError,
    InsufficientDataError,
    PaletteError,
    UnsupportedError,
)
from .tensor_io import (
    DenseMatrix,
    FeatureTensor,
    LabelMask,
    Palette,
    load_palette,
    read_fst,
    read_fst_header,
    read_gt_mask,
    write_fst,
    write_mask_pgm,
)
from .factorization import (
    Factorization,
    NmfConfig,
    nmf_factorize,
    nmf_solve_w,
    reconstruction_error,
)
from .clustering import (
    ClusterModel,
    KMeansConfig,
    gap_pool,
    inertia,
    kmeans_assign,
    kmeans_fit,
    load_cluster_model,
    save_cluster_model,
)
from .segmentation import (
    ResizeMode,
    SegmentationMode,
    SegmentationRequest,
    SegmentationResult,
    concept_labels,
    match_concepts_to_clusters,
    resize_labels_nearest,
    resize_mask,
    segment_tile,
)
from .evaluation import (
    ClusterMapping,
    F1Report,
    FrequencyMatrix,
    LinearProbe,
    ProbeSet,
    accumulate_frequencies,
    apply_mapping,
    confusion_matrix,
    f1_from_confusion,
    f1_from_frequency,
    f1_report,
    frequency_to_csv,
    match_clusters,
    probe_classify,
    probe_collect,
    probe_loss_and_grad,
    probe_train,
    report_to_csv,
    report_to_flat_dict,
)
