//! Cascaded human-value identification.
//!
//! A cheap local detector is sampled several times per text; the fraction of
//! samples flagging each value splits the value system into confirmed,
//! candidate and rejected sets, and one short prompt to a stronger LLM settles
//! only the candidates. The crate also carries the training-data factory,
//! prompting baselines, evaluation metrics and the questionnaire persona study.

pub mod dataset;
pub mod gateway;
pub mod prompts;
pub mod values;

pub use values::{LabelVector, TextInstance, ValueDef, ValueSystem};
pub mod baselines;
pub mod cli;
pub mod consistency;
pub mod datagen;
pub mod detector;
pub mod exec;
pub mod metrics;
pub mod persona;
pub mod pipeline;
