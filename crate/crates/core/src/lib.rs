//! Detects data practices that an Android app's privacy policy describes but
//! its Google Play Data safety section does not declare.
//!
//! The crate is organised by stage: [`dss`] parses store listings, [`policy`]
//! retrieves and cleans privacy policies, [`pipeline`] runs the three model
//! stages through [`llm`], [`constraints`] encodes the disclosure exemptions,
//! [`eval`] scores reports against ground truth and [`reporting`] aggregates
//! corpus results. [`orchestrator`] ties them together for the CLI.

pub mod constraints;
pub mod dss;
pub mod eval;
pub mod fetch;
pub mod heuristic;
pub mod html;
pub mod llm;
pub mod orchestrator;
pub mod pipeline;
pub mod policy;
pub mod reporting;
pub mod taxonomy;
pub mod text;
pub mod workspace;
