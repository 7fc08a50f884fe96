//! Flat `key = value` experiment configuration.
//!
//! The format is deliberately minimal: one assignment per line, `#`
//! starts a comment, blank lines are ignored. Every key has a default,
//! so an empty file is a valid configuration. Unknown or duplicated
//! keys are hard errors that carry the offending line number, so a
//! typo cannot silently fall back to a default.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use lie_core::trace::VocabSpec;
use lie_core::trapsim::{TrainConfig, TrapTask};

/// Fully resolved experiment configuration: the task, the training
/// settings, and the output options.
///
/// The length-penalty slope is specified as two keys, `eta_max` (the
/// penalty at length zero) and `length_scale` (the number of tokens
/// the penalty is spread over); the trainer consumes their quotient.
/// Keeping the raw pieces makes the echoed config reparse to the
/// exact same slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub vocab_size: usize,
    pub depth: usize,
    pub budget: usize,
    pub goal_token: u32,
    pub eta_max: f64,
    pub length_scale: usize,
    pub train: TrainConfig,
    pub dump_rollouts: bool,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let length_scale = 128;
        Self {
            vocab_size: 8,
            depth: 40,
            budget: 128,
            goal_token: 0,
            eta_max: train.reward.eta * length_scale as f64,
            length_scale,
            train,
            dump_rollouts: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Builds the task described by the task keys.
    pub fn task(&self) -> Result<TrapTask, String> {
        if self.vocab_size == 0 {
            return Err("vocab_size must be at least 1".to_string());
        }
        TrapTask::new(VocabSpec::new(self.vocab_size), self.depth, self.goal_token, self.budget)
            .map_err(|e| e.to_string())
    }

    /// Renders the effective configuration as a config file that
    /// parses back to `self`. Every key is present, including ones
    /// that were left at their defaults, so the echo is a complete
    /// record of the run.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "# effective configuration; reparses to reproduce this run");
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "budget = {}", self.budget);
        let _ = writeln!(s, "goal_token = {}", self.goal_token);
        let _ = writeln!(s, "recipe = {}", t.recipe);
        let _ = writeln!(s, "algo = {}", t.algo);
        let _ = writeln!(s, "group_size = {}", t.group_size);
        let _ = writeln!(s, "batch_prompts = {}", t.batch_prompts);
        let _ = writeln!(s, "iterations = {}", t.iters);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "order = {}", t.policy_order);
        let _ = writeln!(s, "updates_per_rollout = {}", t.updates_per_rollout);
        let _ = writeln!(s, "k_samples = {}", t.k_samples_ref);
        let _ = writeln!(s, "init_sigma = {}", t.init_sigma);
        let _ = writeln!(s, "init_eos_prob = {}", t.init_eos_prob);
        let _ = writeln!(s, "n = {}", t.reward.n);
        let _ = writeln!(s, "eta_max = {}", self.eta_max);
        let _ = writeln!(s, "length_scale = {}", self.length_scale);
        let _ = writeln!(s, "delta_l = {}", t.reward.delta_l);
        let _ = writeln!(s, "beta = {}", t.reward.beta);
        let _ = writeln!(s, "theta = {}", t.reward.theta);
        let _ = writeln!(s, "redundancy_semantics = {}", t.reward.redundancy_semantics);
        let _ = writeln!(s, "eps_low = {}", t.eps_low);
        let _ = writeln!(s, "eps_high = {}", t.eps_high);
        let _ = writeln!(s, "bonus_beta = {}", t.bonus_beta);
        let _ = writeln!(s, "dump_rollouts = {}", self.dump_rollouts);
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {dir}");
        }
        s
    }
}

/// One raw assignment with the line it came from.
struct RawValue {
    line: usize,
    value: String,
}

/// Parses a config file. Collects *all* problems (unknown keys,
/// duplicates, unparseable values) and reports them together, each
/// tagged with its line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, String> {
    let mut raw: HashMap<String, RawValue> = HashMap::new();
    let mut errors: Vec<String> = Vec::new();

    for (idx, full_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match full_line.find('#') {
            Some(pos) => &full_line[..pos],
            None => full_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {line_no}: expected `key = value`, got `{line}`"));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if let Some(prev) = raw.get(&key) {
            errors.push(format!(
                "line {line_no}: duplicate key `{key}` (first set on line {})",
                prev.line
            ));
            continue;
        }
        raw.insert(key, RawValue { line: line_no, value });
    }

    let mut cfg = ExperimentConfig::default();

    // Pulls one key out of the raw map and parses it, recording any
    // parse failure against the key's line number.
    macro_rules! take {
        ($key:literal, $slot:expr) => {
            if let Some(rv) = raw.remove($key) {
                match rv.value.parse() {
                    Ok(v) => $slot = v,
                    Err(e) => errors.push(format!(
                        "line {}: key `{}`: cannot parse `{}`: {}",
                        rv.line, $key, rv.value, e
                    )),
                }
            }
        };
    }

    take!("vocab_size", cfg.vocab_size);
    take!("depth", cfg.depth);
    take!("budget", cfg.budget);
    take!("goal_token", cfg.goal_token);
    take!("recipe", cfg.train.recipe);
    take!("algo", cfg.train.algo);
    take!("group_size", cfg.train.group_size);
    take!("batch_prompts", cfg.train.batch_prompts);
    take!("iterations", cfg.train.iters);
    take!("lr", cfg.train.lr);
    take!("seed", cfg.train.seed);
    take!("order", cfg.train.policy_order);
    take!("updates_per_rollout", cfg.train.updates_per_rollout);
    take!("k_samples", cfg.train.k_samples_ref);
    take!("init_sigma", cfg.train.init_sigma);
    take!("init_eos_prob", cfg.train.init_eos_prob);
    take!("n", cfg.train.reward.n);
    take!("eta_max", cfg.eta_max);
    take!("length_scale", cfg.length_scale);
    take!("delta_l", cfg.train.reward.delta_l);
    take!("beta", cfg.train.reward.beta);
    take!("theta", cfg.train.reward.theta);
    take!("redundancy_semantics", cfg.train.reward.redundancy_semantics);
    take!("bonus_beta", cfg.train.bonus_beta);
    take!("dump_rollouts", cfg.dump_rollouts);
    take!("eps_low", cfg.train.eps_low);
    take!("eps_high", cfg.train.eps_high);

    if let Some(rv) = raw.remove("output_dir") {
        if rv.value.is_empty() {
            errors.push(format!("line {}: key `output_dir`: empty value", rv.line));
        } else {
            cfg.output_dir = Some(rv.value);
        }
    }

    let mut unknown: Vec<(usize, String)> =
        raw.into_iter().map(|(k, rv)| (rv.line, k)).collect();
    unknown.sort_unstable();
    for (line, key) in unknown {
        errors.push(format!("line {line}: unknown key `{key}`"));
    }

    if errors.is_empty() {
        if cfg.length_scale == 0 {
            errors.push("key `length_scale`: must be at least 1".to_string());
        } else {
            cfg.train.reward.eta = cfg.eta_max / cfg.length_scale as f64;
            // Surface semantic problems (zero group size, bad clip
            // range, too-small vocabulary, ...) at parse time rather
            // than mid-run.
            match cfg.task() {
                Err(e) => errors.push(format!("task keys: {e}")),
                Ok(task) => {
                    if let Err(e) = cfg.train.validate(&task) {
                        errors.push(format!("training keys: {e}"));
                    }
                }
            }
        }
    }

    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors.join("\n"))
    }
}

/// Parses a comma-separated list of arm means, e.g. `0.9,0.1`.
pub fn parse_arm_means(text: &str) -> Result<Vec<f64>, String> {
    let mut means = Vec::new();
    for (i, piece) in text.split(',').enumerate() {
        let piece = piece.trim();
        let mean = f64::from_str(piece)
            .map_err(|e| format!("arm {}: cannot parse `{piece}`: {e}", i + 1))?;
        means.push(mean);
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse_config("# a comment\n\n  \nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = parse_config("seed = 1\nlearning_rate = 2\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("unknown key `learning_rate`"), "{err}");
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = parse_config("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.contains("line 2: duplicate key `seed`"), "{err}");
        assert!(err.contains("first set on line 1"), "{err}");
    }

    #[test]
    fn bad_value_reports_the_line() {
        let err = parse_config("lr = fast\n").unwrap_err();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("`fast`"), "{err}");
    }

    #[test]
    fn multiple_errors_are_all_reported() {
        let err = parse_config("lr = fast\nbogus = 1\nseed = x\n").unwrap_err();
        assert_eq!(err.lines().count(), 3, "{err}");
    }

    #[test]
    fn missing_equals_is_an_error() {
        let err = parse_config("just some words\n").unwrap_err();
        assert!(err.contains("expected `key = value`"), "{err}");
    }

    #[test]
    fn eta_is_the_quotient_of_its_two_keys() {
        let cfg = parse_config("eta_max = 0.3\nlength_scale = 9000\n").unwrap();
        assert_eq!(cfg.train.reward.eta, 0.3 / 9000.0);
    }

    #[test]
    fn clip_range_keys_are_validated() {
        let err = parse_config("eps_low = 1.5\n").unwrap_err();
        assert!(err.contains("training keys"), "{err}");
        let cfg = parse_config("eps_high = 0.28\n").unwrap();
        assert_eq!(cfg.train.eps_high, 0.28);
        assert_eq!(cfg.train.eps_low, 0.2);
    }

    #[test]
    fn semantic_validation_runs_after_parsing() {
        let err = parse_config("group_size = 1\n").unwrap_err();
        assert!(err.contains("training keys"), "{err}");
        let err = parse_config("depth = 200\n").unwrap_err();
        assert!(err.contains("task keys"), "{err}");
    }

    #[test]
    fn echo_reparses_to_the_same_config() {
        let mut cfg = parse_config("seed = 99\nlr = 0.1\neta_max = 0.7\n").unwrap();
        cfg.output_dir = Some("out/run1".to_string());
        let echoed = parse_config(&cfg.echo()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn echo_of_defaults_reparses_exactly() {
        let cfg = ExperimentConfig::default();
        let echoed = parse_config(&cfg.echo()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn arm_means_parse_and_reject_garbage() {
        assert_eq!(parse_arm_means("0.9, 0.1").unwrap(), vec![0.9, 0.1]);
        assert!(parse_arm_means("0.9,high").is_err());
    }
}
