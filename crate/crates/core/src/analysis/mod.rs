//! Experiments built from the model and measures: rate-distortion and
//! rate-reward sweeps, the cross-entropy endpoint check, semantic capacity,
//! ELBO identities, the generalization bound, Fisher matrices and the
//! optimal-embedding search.

mod bound;
mod capacity;
mod elbo;
mod embedding;
mod fisher;
mod sweep;

use serde::Serialize;

pub use bound::{generalization_bound, BoundReport};
pub use capacity::{semantic_capacity, CapacityMethod, CapacityResult, GRID_MAX_PROMPTS, GRID_RESOLUTION};
pub use elbo::{
    elbo_inference, elbo_terms, elbo_training, position_posterior, ElboBatch, ElboRow, ElboTable, ElboTerms,
};
pub use embedding::{
    cpc_terms, embedding_objective, encoder_objective, EmbeddingResult, Encoder, EncoderFamily, SequenceSource,
    FAMILY_LIMIT,
};
pub use fisher::{fisher_matrix, transformer_fisher, FisherReport, ParamRef, FISHER_MAX_PARAMS, FISHER_STEP};
pub use sweep::{
    expected_reward, rd_sweep, rr_sweep, verify_training_endpoint, RdCurve, RrCurve, SweepConfig, SweepPoint,
    TrainingEndpointReport, REWARD_SAMPLES,
};

/// A named check recorded alongside experiment output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}
