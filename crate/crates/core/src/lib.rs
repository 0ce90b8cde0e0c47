//! Curriculum schedulers over vehicle-dynamics contexts, a grid
//! traffic-signal simulator, and a shared-parameter PPO learner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod context_space;
pub mod curriculum;
pub mod experiment;
pub mod llm;
pub mod rng;
pub mod traffic;
pub mod trainer;
