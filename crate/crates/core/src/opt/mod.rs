//! Joint placement under capacity limits by price-based decomposition.
//!
//! Providers place contents independently at prices that include shadow
//! prices for capacity-limited storage and links; access operators adjust
//! those prices by projected subgradient steps; an orchestrator tracks the
//! bounds and stops the iteration.

pub mod duals;
pub mod engine;
pub mod exhaustive;
pub mod placement;
pub mod project;
pub mod settle;

pub use duals::{dual_update, lagrangian, polyak_step, slot_capacity, Duals, Subgradient, Usage};
pub use engine::{
    orchestrate, primal_update, AlgoParams, CpAgent, Decision, Next, OptimizationResult, Orchestrator, Retain, Status,
    StopReason, TraceRow,
};
pub use exhaustive::exhaustive_optimum;
pub use placement::{
    summarize, utility, utility_by_ano, utility_from_summaries, ContentPlacement, CpPlacement, CpSummary, Placement,
};
pub use project::{
    fair_quotas, is_feasible, least_traffic, project_to_feasible, repair_cp, reports_feasible, split_bandwidth,
    split_storage, tight_placement, CpQuota, Repairer, SlotQuota,
};
pub use settle::{settle, MeasuredTraffic, Settlement, SettlementRow};
