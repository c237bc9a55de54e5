//! Golden-model validation of GPU kernel executions from performance-counter
//! traces.
//!
//! A trusted program is run repeatedly to collect golden counter traces. Each
//! trace is cut into per-kernel segments at marker bursts, and segments of the
//! same launch configuration are reduced to a reference. Untested traces are
//! then matched kernel by kernel with normalized cross-correlation, and a run
//! of consecutive mismatches marks the execution as compromised.

pub mod attacks;
pub mod cli;
pub mod golden;
pub mod hwsim;
pub mod gpusim;
pub mod model;
pub mod noise_study;
pub mod segmentation;
pub mod similarity;
pub mod trace_io;
pub mod validator;

pub use golden::{build_golden, GoldenModel, ValidationPolicy};
pub use model::{Decision, Trace, Verdict};
pub use validator::{run_campaign, validate_trace, CampaignReport};
