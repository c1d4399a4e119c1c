//! Semantic vector spaces and Gromov-Wasserstein comparison.

mod gw;
mod space;

pub use gw::{
    gw_cost, gw_cost_gram, gw_distance_entropic, gw_distance_oracle, gw_oracle_gram, round_to_marginals, sinkhorn,
    Coupling, EntropicGwConfig, EntropicGwResult, OracleResult, SinkhornResult, COST_MARGINAL_TOL, COUPLING_TOL,
    ORACLE_MAX_POINTS,
};
pub use space::{cosine, SemanticVectorSpace, SpaceFile, LOADER_NORM_TOL, UNIT_NORM_TOL};
