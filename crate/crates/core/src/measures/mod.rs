//! Exact information measures over exhaustively enumerated sequence
//! ensembles, semantic information flow, and a sample-based estimator.
//!
//! All quantities are in nats.

mod dv;
mod ensemble;
mod flow;
mod information;

pub use dv::{dv_estimate, DvConfig, DvEstimate};
pub use ensemble::{SequenceEnsemble, ENSEMBLE_LIMIT, MASS_TOL};
pub use flow::{
    freedman_bound, freedman_check, optional_stopping_check, semantic_flow, submartingale_check, FlowTrace,
    FreedmanCell, SubmartingaleReport,
};
pub use information::{
    backward_directed_information, backward_directed_information_of, backward_directed_information_terms,
    directed_information, directed_information_terms, information_density, marginalize, mutual_information,
    path_density, JointSequences,
};
