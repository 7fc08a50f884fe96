//! `lie lemma` — check the exponential length-decay bound.
//!
//! For a policy whose every context stops with probability at least
//! `epsilon > 0`, the exact probability of terminating at body length
//! `L` is below `(1 - epsilon)^(L - 1)`. This command computes the
//! exact length distribution and reports the tightest margin.
//!
//! Exit 3 when the premise fails (some context has stop probability
//! zero, so no such bound exists); exit 1 if the bound itself were
//! ever violated.

use std::fs;
use std::path::PathBuf;

use lie_core::policy::MarkovPolicy;
use lie_core::trace::VocabSpec;
use lie_core::trapsim::{verify_decay_bound, TrapError};

use crate::records::{fmt_f64, io_err, PolicyFile};
use crate::CmdError;

pub enum PolicySource {
    Seeded { seed: u64, vocab: usize, order: usize, sigma: f64, eos_prob: f64 },
    File(PathBuf),
}

pub fn lemma(source: PolicySource, l_max: usize) -> Result<(), CmdError> {
    let policy = match source {
        PolicySource::Seeded { seed, vocab, order, sigma, eos_prob } => {
            if vocab == 0 {
                return Err(CmdError::Config("--vocab must be at least 1".into()));
            }
            if !(eos_prob > 0.0 && eos_prob < 1.0) {
                return Err(CmdError::Config(format!(
                    "--eos-prob must lie in (0, 1), got {eos_prob}"
                )));
            }
            let spec = VocabSpec::new(vocab);
            let bias = MarkovPolicy::eos_bias_for(spec, eos_prob);
            MarkovPolicy::seeded(spec, order, seed, sigma, bias)
                .map_err(|e| CmdError::Config(e.to_string()))?
        }
        PolicySource::File(path) => {
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let file: PolicyFile = serde_json::from_str(&text)
                .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
            file.into_policy()?
        }
    };

    let report = verify_decay_bound(&policy, l_max).map_err(|e| match e {
        TrapError::EosZero { .. } => CmdError::Premise(e.to_string()),
        TrapError::BadConfig(_) => CmdError::Config(e.to_string()),
        other => CmdError::Input(other.to_string()),
    })?;

    println!("epsilon (min per-context stop probability) = {}", fmt_f64(report.epsilon));
    println!(
        "tightest margin = {} at L = {}",
        fmt_f64(report.tightest_margin),
        report.argmin_len
    );
    if report.holds {
        println!("PASS: p(L) < (1 - epsilon)^(L - 1) for all L in [1, {l_max}]");
        Ok(())
    } else {
        println!("FAIL: the decay bound is violated somewhere in [1, {l_max}]");
        Err(CmdError::Input("decay bound violated".into()))
    }
}
