"""Histopathology tile classification pipeline.

Tessellates corpus images into 150x150 patches, screens them with a relevance
filter trained on an eight-structure tile corpus, extracts PFTAS texture
features (or ingests externally computed deep features, optionally reduced by
PCA), classifies patches with a grid-searched RBF max-margin classifier, and
aggregates predictions to image- and patient-level accuracy under a
patient-wise five-fold protocol.
"""

from .classifier import (
    GridSearchReport,
    KernelParams,
    Standardizer,
    TrainedClassifier,
    decision,
    grid_search,
    predict_proba,
    train,
)
from .config import RunConfig, spawn_rng, subseed
from .dataset import (
    CorpusManifest,
    FoldAssignment,
    ImageEntry,
    SyntheticSpec,
    generate_synthetic_corpus,
    load_raster,
    make_folds,
    scan_corpus,
)
from .evaluation import (
    ImageDecision,
    PatchPrediction,
    RunReport,
    aggregate_image,
    overall_accuracy,
    patient_score,
    run_experiment,
)
from .features import (
    FeatureMatrix,
    FeatureVector,
    PcaModel,
    fit_pca,
    import_deep_features,
    pftas,
    tas_histogram,
    transform_pca,
)
from .filterbank import (
    FilterSpec,
    RelevanceModel,
    RetentionStats,
    apply_filter,
    build_filter_spec,
    train_relevance_model,
)
from .imaging import (
    BinaryMask,
    PatchRecord,
    Raster,
    binarize,
    otsu_threshold,
    tessellate,
    to_grayscale,
)

__version__ = "0.1.0"
