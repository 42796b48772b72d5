//! Task-aligned user-profile generation for LLM recommendation simulation,
//! together with the simulation tasks, samplers, probes and metrics used to
//! evaluate the profiles.

pub mod dataset;
pub mod llm;
pub mod metrics;
pub mod seed;
pub mod profile;
pub mod prompts;
pub mod sampling;
pub mod tasks;
pub mod synthetic;
pub mod experiment;
