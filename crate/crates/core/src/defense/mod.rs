//! Hardware ECC simulation and the statistical detector.

pub mod epsilon;
pub mod protect;
pub mod secded;

pub use epsilon::{
    build_signatures, detection_threshold, epsilon_infer, epsilon_over, error_bound, layer_importance,
    missed_detection_bound, model_importances, nearest_valid, pattern_score, DetectionParams, EpsilonVerdict,
    ImportanceFactors, LayerSignature, SignatureConfig, signature_records, SignatureRecord,
};
pub use protect::{protect_and_apply, Protection, WordAddress, WordOutcome, WordStatus};
pub use secded::{secded_decode, secded_encode, DecodeStatus, SecdedWord};
