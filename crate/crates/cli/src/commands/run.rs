//! `lie run` — train a policy and write the run's file set:
//!
//! * `metrics.csv` — one row per iteration, nine metric columns
//! * `config.txt` — the effective configuration, reparseable
//! * `policy.json` — the trained policy table (input for `lie lemma`)
//! * `rollouts.jsonl` — final-iteration rollouts (with `dump_rollouts = true`)
//! * `warnings.txt` — only written when the run produced warnings

use std::fs;
use std::io::Write as _;
use std::path::Path;

use lie_core::trapsim::{self, TrapError};

use crate::config::parse_config;
use crate::records::{fmt_f64, guard_overwrite, io_err, metrics_header, PolicyFile, RolloutRecord};
use crate::CmdError;

pub fn run(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
    force: bool,
) -> Result<(), CmdError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CmdError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut cfg = parse_config(&text).map_err(CmdError::Config)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }

    let out_dir = match (out_override, &cfg.output_dir) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => dir.into(),
        (None, None) => {
            return Err(CmdError::Config(
                "no output directory: pass --out or set output_dir in the config".into(),
            ))
        }
    };
    cfg.output_dir = Some(out_dir.display().to_string());

    let metrics_path = out_dir.join("metrics.csv");
    guard_overwrite(&metrics_path, force)?;
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let task = cfg.task().map_err(CmdError::Config)?;
    let outcome = trapsim::train(&task, &cfg.train).map_err(|e| match e {
        TrapError::BadConfig(_) | TrapError::BadTask(_) => CmdError::Config(e.to_string()),
        other => CmdError::Input(other.to_string()),
    })?;

    write_metrics(&metrics_path, &outcome.log.records)?;
    let config_path_out = out_dir.join("config.txt");
    fs::write(&config_path_out, cfg.echo()).map_err(|e| io_err(&config_path_out, e))?;

    let policy_path = out_dir.join("policy.json");
    let policy_json = serde_json::to_string(&PolicyFile::from_policy(&outcome.policy))
        .expect("policy serializes");
    fs::write(&policy_path, policy_json).map_err(|e| io_err(&policy_path, e))?;

    if cfg.dump_rollouts {
        write_rollouts(&out_dir.join("rollouts.jsonl"), &outcome)?;
    }

    if !outcome.log.warnings.is_empty() {
        let warn_path = out_dir.join("warnings.txt");
        let mut body = String::new();
        for w in &outcome.log.warnings {
            eprintln!("warning: {w}");
            body.push_str(w);
            body.push('\n');
        }
        fs::write(&warn_path, body).map_err(|e| io_err(&warn_path, e))?;
    }

    let last = outcome.log.records.last().expect("at least one iteration");
    println!(
        "run complete: {} iterations, final success_rate {}, mean_length {}, files in {}",
        last.iter,
        fmt_f64(last.success_rate),
        fmt_f64(last.mean_length),
        out_dir.display()
    );
    Ok(())
}

fn write_metrics(path: &Path, records: &[lie_core::trapsim::IterRecord]) -> Result<(), CmdError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CmdError::Input(e.to_string()))?;
    w.write_record(metrics_header()).map_err(|e| CmdError::Input(e.to_string()))?;
    for r in records {
        w.write_record([
            r.iter.to_string(),
            fmt_f64(r.mean_length),
            fmt_f64(r.mean_c_context),
            fmt_f64(r.mean_r_context),
            r.c_global.to_string(),
            fmt_f64(r.mean_entropy),
            fmt_f64(r.success_rate),
            fmt_f64(r.mean_reward),
            fmt_f64(r.mean_len_term),
            fmt_f64(r.red_fire_rate),
        ])
        .map_err(|e| CmdError::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_rollouts(path: &Path, outcome: &lie_core::trapsim::TrainOutcome) -> Result<(), CmdError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for fr in &outcome.final_rollouts {
        let record = RolloutRecord {
            prompt_id: fr.trajectory.prompt_id.clone(),
            tokens: fr.trajectory.tokens.clone(),
            correct: fr.trajectory.correct.unwrap_or(false),
            ref_len: Some(fr.ref_len as u64),
            group: Some(fr.group as u64),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}
