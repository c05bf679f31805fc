//! Stage-one machinery: cold start, E-step posteriors, confidence
//! filtering, M-steps, and the trunk-level training driver.

mod driver;
mod estep;
mod mstep;
mod posterior;

pub use driver::{run_pretraining, split_trunks, PretrainOutput, TrunkSummary};
pub use estep::{argmax_graph, candidate_graph, e_step, score_discourse, score_single, Stage};
pub use mstep::{m_step, MStepHyper, MStepItem, MStepReport};
pub use posterior::{
    cold_start, confidence, confidence_filter, normalize, top_half, FilterOutcome, Normalization,
    Posterior, PosteriorTable,
};
