//! Fidelity (FID) and downstream robustness (few-shot probes) metrics.

pub mod extractor;
pub mod fid;
pub mod metrics;
pub mod probe;

pub use extractor::{extract_manifest, FeatureExtractor, RandomConvExtractor};
pub use fid::{fid, frechet_distance, per_class_fid, per_class_fid_features, FidResult, GaussianStats, SkippedClass, COV_REGULARIZATION};
pub use metrics::{
    aggregate, aggregate_runs, balanced_accuracy, tss_averaged_accuracy, Aggregate, BalancedAccuracy, ProbeResult,
    RunAggregate, TssAccuracy,
};
pub use probe::{fit_logistic, select_support, train_linear_probe, LinearProbe, TrainedProbe, PROBE_L2, PROBE_TOLERANCE};
