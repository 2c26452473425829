//! Masked generative modeling: the sine mask schedule, Bernoulli masking,
//! the masked cross-entropy objective, confidence-based iterative parallel
//! decoding and classifier-free guidance.

mod cfg;
mod decode;
mod schedule;
mod state;

pub use cfg::cfg_combine;
pub use decode::{
    confidence_select, confidence_select_with, iterative_decode, ConfidenceScorer, DecodeConfig, DecodeOutput,
    DecodeStep, Predictor, ProbabilityConfidence,
};
pub use schedule::{mask_fraction, remask_count, sample_mask, ScheduleConfig, ScheduleShape};
pub use state::{masked_loss, MaskState};
