//! `lie analyze` — recompute coverage and reward metrics for logged
//! rollouts, offline.
//!
//! Reads line-delimited JSON records and writes two files next to the
//! input (or into `--out`): `per_record.csv` with one row per rollout,
//! and `aggregate.csv` with the fold over the whole file. The fold
//! accumulates in file order with the same arithmetic as the trainer's
//! per-iteration metrics, so analyzing a run's dumped final rollouts
//! reproduces the final metrics row bit for bit.
//!
//! Malformed lines are reported with their line numbers and skipped;
//! the command still writes results for the valid records and then
//! exits with status 1.

use std::fs;
use std::path::Path;

use lie_core::reward::{self, RedundancySemantics, RewardConfig};
use lie_core::trace::{self, GlobalStateSet, Trajectory};

use crate::records::{fmt_f64, guard_overwrite, io_err, RolloutRecord};
use crate::CmdError;

pub struct AnalyzeFlags {
    pub n: usize,
    pub theta: usize,
    pub eta: f64,
    pub delta_l: usize,
    pub beta: f64,
    pub semantics: String,
}

struct RecordRow {
    line: usize,
    prompt_id: String,
    length: usize,
    c_context: usize,
    r_context: f64,
    red_fired: bool,
    acc: f64,
    red_term: f64,
    len_term: Option<f64>,
    total: Option<f64>,
    ref_len: Option<u64>,
}

pub fn analyze(
    input: &Path,
    out_dir: Option<&Path>,
    flags: &AnalyzeFlags,
    force: bool,
) -> Result<(), CmdError> {
    let semantics: RedundancySemantics = flags
        .semantics
        .parse()
        .map_err(|e| CmdError::Config(format!("--semantics: {e}")))?;
    let rc = RewardConfig {
        eta: flags.eta,
        delta_l: flags.delta_l,
        beta: flags.beta,
        theta: flags.theta,
        n: flags.n,
        redundancy_semantics: semantics,
    };
    rc.validate().map_err(|e| CmdError::Config(e.to_string()))?;

    let text = fs::read_to_string(input).map_err(|e| io_err(input, e))?;
    let mut records: Vec<(usize, RolloutRecord)> = Vec::new();
    let mut malformed: Vec<(usize, String)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RolloutRecord>(line) {
            Ok(rec) => records.push((line_no, rec)),
            Err(e) => malformed.push((line_no, e.to_string())),
        }
    }
    if records.is_empty() {
        let detail = if malformed.is_empty() {
            "no records".to_string()
        } else {
            format!("{} line(s), none parseable", malformed.len())
        };
        return Err(CmdError::Input(format!(
            "{}: {detail}; nothing to analyze",
            input.display()
        )));
    }

    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let parent = input.parent().unwrap_or(Path::new(""));
            if parent.as_os_str().is_empty() {
                Path::new(".").to_path_buf()
            } else {
                parent.to_path_buf()
            }
        }
    };
    let per_record_path = dir.join("per_record.csv");
    let aggregate_path = dir.join("aggregate.csv");
    guard_overwrite(&per_record_path, force)?;
    guard_overwrite(&aggregate_path, force)?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    // Fold in file order with the trainer's accumulate-then-divide
    // arithmetic.
    let mut rows: Vec<RecordRow> = Vec::with_capacity(records.len());
    let mut global = GlobalStateSet::new();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(records.len());
    let mut length_sum = 0.0;
    let mut c_sum = 0.0;
    let mut r_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut red_fires = 0.0;
    let mut reward_sum = 0.0;
    let mut len_term_sum = 0.0;
    let mut with_ref = 0usize;

    for (line_no, rec) in &records {
        let traj = Trajectory::new(rec.prompt_id.clone(), rec.tokens.clone(), false);
        let cov = trace::coverage(&traj, rc.n).map_err(|e| CmdError::Config(e.to_string()))?;
        let counts =
            trace::visitation_counts(&traj, rc.n).map_err(|e| CmdError::Config(e.to_string()))?;
        global.absorb(&traj, rc.n).map_err(|e| CmdError::Config(e.to_string()))?;
        let acc = f64::from(rec.correct);
        let red_term = reward::redundancy_penalty(&counts, rc.theta, rc.redundancy_semantics);
        let (len_term, total) = match rec.ref_len {
            Some(ref_len) => {
                let target = reward::target_length(ref_len as usize, rc.delta_l);
                let len_term = reward::length_reward(traj.len(), target, acc == 1.0, rc.eta);
                let total = acc + len_term + rc.beta * red_term;
                with_ref += 1;
                reward_sum += total;
                len_term_sum += len_term;
                (Some(len_term), Some(total))
            }
            None => (None, None),
        };
        length_sum += cov.length as f64;
        c_sum += cov.c_context as f64;
        r_sum += cov.r_context;
        acc_sum += acc;
        red_fires += f64::from(red_term != 0.0);
        pairs.push((cov.length as f64, cov.c_context as f64));
        rows.push(RecordRow {
            line: *line_no,
            prompt_id: rec.prompt_id.clone(),
            length: cov.length,
            c_context: cov.c_context,
            r_context: cov.r_context,
            red_fired: red_term != 0.0,
            acc,
            red_term,
            len_term,
            total,
            ref_len: rec.ref_len,
        });
    }

    write_per_record(&per_record_path, &rows)?;

    let n = records.len() as f64;
    let pearson = trace::length_coverage_correlation(&pairs).ok();
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut w =
        csv::Writer::from_path(&aggregate_path).map_err(|e| CmdError::Input(e.to_string()))?;
    w.write_record([
        "records",
        "records_with_ref",
        "mean_length",
        "mean_c_context",
        "mean_r_context",
        "c_global",
        "success_rate",
        "mean_reward",
        "mean_len_term",
        "red_fire_rate",
        "pearson_length_c",
    ])
    .map_err(|e| CmdError::Input(e.to_string()))?;
    w.write_record([
        records.len().to_string(),
        with_ref.to_string(),
        fmt_f64(length_sum / n),
        fmt_f64(c_sum / n),
        fmt_f64(r_sum / n),
        global.len().to_string(),
        fmt_f64(acc_sum / n),
        opt((with_ref > 0).then(|| reward_sum / with_ref as f64)),
        opt((with_ref > 0).then(|| len_term_sum / with_ref as f64)),
        fmt_f64(red_fires / n),
        opt(pearson),
    ])
    .map_err(|e| CmdError::Input(e.to_string()))?;
    w.flush().map_err(|e| io_err(&aggregate_path, e))?;

    println!(
        "analyzed {} record(s) from {} -> {}, {}",
        records.len(),
        input.display(),
        per_record_path.display(),
        aggregate_path.display()
    );

    if malformed.is_empty() {
        Ok(())
    } else {
        let mut shown: Vec<String> = malformed
            .iter()
            .take(10)
            .map(|(line, err)| format!("line {line}: {err}"))
            .collect();
        if malformed.len() > shown.len() {
            shown.push(format!("... and {} more", malformed.len() - shown.len()));
        }
        Err(CmdError::Input(format!(
            "{} malformed line(s) skipped:\n{}",
            malformed.len(),
            shown.join("\n")
        )))
    }
}

fn write_per_record(path: &Path, rows: &[RecordRow]) -> Result<(), CmdError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CmdError::Input(e.to_string()))?;
    w.write_record([
        "record",
        "prompt_id",
        "length",
        "c_context",
        "r_context",
        "redundancy_fired",
        "acc",
        "len_term",
        "red_term",
        "total",
        "ref_len",
    ])
    .map_err(|e| CmdError::Input(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.line.to_string(),
            r.prompt_id.clone(),
            r.length.to_string(),
            r.c_context.to_string(),
            fmt_f64(r.r_context),
            r.red_fired.to_string(),
            fmt_f64(r.acc),
            r.len_term.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.red_term),
            r.total.map(fmt_f64).unwrap_or_default(),
            r.ref_len.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| CmdError::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
