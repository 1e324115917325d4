//! Whittle index scheduling for downlink users whose channels follow
//! two-state Markov ON/OFF chains and are observed only when served.

pub mod cli;
pub mod error;
pub mod fluid;
pub mod markov_belief;
pub mod relaxed_policy;
pub mod simulator;
pub mod whittle_index;

pub use error::{FluidError, IndexError, ModelError, RelaxedError, SimError};
pub use markov_belief::{BeliefState, ChannelClass, ClassMix};
pub use whittle_index::{build_index_table, whittle_index, IndexTable};
pub use relaxed_policy::{solve_relaxed, ClassThreshold, Regime, RelaxedSolution, RelaxedWarning};
