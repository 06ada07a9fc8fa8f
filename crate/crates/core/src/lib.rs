//! Cache placement and value sharing for tree-shaped access networks.
//!
//! The crate covers four layers that build on each other:
//!
//! * [`net`] and [`demand`] describe the cache hierarchy, its prices and
//!   capacities, and per-provider content demand.
//! * [`tradeoff`] gives closed-form optimal tier sizes for the symmetric
//!   three-tier network, and [`ufl`] places single contents optimally on an
//!   arbitrary tree.
//! * [`coalition`] splits the savings of a shared central-office cache among
//!   access operators and computes the provider subsidy.
//! * [`opt`] runs the price-based decomposition under capacity limits and
//!   computes end-of-day settlements; [`protocol`] runs the same iteration as
//!   message-passing agents.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coalition;
pub mod demand;
pub mod error;
pub mod net;
pub mod numeric;
pub mod opt;
pub mod protocol;
pub mod scenario;
pub mod tradeoff;
pub mod ufl;

pub use error::{Error, Result};
pub use net::{AnoId, Capacity, CpId, NodeId, TreeNetwork};
