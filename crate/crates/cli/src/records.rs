//! On-disk record formats shared across subcommands.

use std::path::Path;

use lie_core::policy::MarkovPolicy;
use lie_core::trace::VocabSpec;
use lie_core::trapsim::METRIC_NAMES;
use serde::{Deserialize, Serialize};

use crate::CmdError;

/// One logged rollout, as a line of JSONL.
///
/// `ref_len` is the group's reference length at the time the rollout
/// was scored; without it the length term (and so the total reward)
/// cannot be reconstructed, and `analyze` leaves those cells empty.
/// `group` tags which sampling group the rollout came from and is
/// carried through untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u64>,
}

/// A policy checkpoint as JSON: dense row-major logits over
/// `(vocab_size + 1)^order` contexts and `vocab_size + 1` actions
/// (the last action is the stop token).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub vocab_size: usize,
    pub order: usize,
    pub logits: Vec<f64>,
}

impl PolicyFile {
    pub fn from_policy(policy: &MarkovPolicy) -> Self {
        Self {
            vocab_size: policy.vocab().size,
            order: policy.order(),
            logits: policy.logits().to_vec(),
        }
    }

    pub fn into_policy(self) -> Result<MarkovPolicy, CmdError> {
        MarkovPolicy::from_logits(VocabSpec::new(self.vocab_size), self.order, self.logits)
            .map_err(|e| CmdError::Input(format!("policy file: {e}")))
    }
}

/// Formats an `f64` with the shortest representation that parses back
/// to the exact same value. Both `run` and `analyze` format through
/// this one function so equal values always produce equal bytes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Header of a metrics.csv: `iter` followed by the nine per-iteration
/// metric columns.
pub fn metrics_header() -> Vec<&'static str> {
    let mut cols = vec!["iter"];
    cols.extend_from_slice(&METRIC_NAMES);
    cols
}

/// Refuses to overwrite `path` unless `force` is set. Call before
/// creating any output file.
pub fn guard_overwrite(path: &Path, force: bool) -> Result<(), CmdError> {
    if path.exists() && !force {
        return Err(CmdError::Input(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Wraps an I/O failure on `path` as an input error.
pub fn io_err(path: &Path, err: std::io::Error) -> CmdError {
    CmdError::Input(format!("{}: {err}", path.display()))
}
