//! `lie bandit` — UCB1 regret curves on a Bernoulli bandit.
//!
//! Runs `--seeds` independent simulations and writes two files:
//! `regret_seeds.csv` (one row per seed per checkpoint) and
//! `regret_median.csv` (the across-seed median at each checkpoint).

use std::path::Path;

use lie_core::bandit::{simulate, ArmSpec, BanditRun};
use rayon::prelude::*;

use crate::config::parse_arm_means;
use crate::records::{fmt_f64, guard_overwrite, io_err};
use crate::CmdError;

pub fn bandit(
    arms_text: &str,
    horizon: u64,
    seed_count: u64,
    base_seed: u64,
    out_dir: Option<&Path>,
    force: bool,
) -> Result<(), CmdError> {
    let means = parse_arm_means(arms_text).map_err(CmdError::Input)?;
    let arms: Vec<ArmSpec> = means.into_iter().map(ArmSpec::new).collect();
    if arms.iter().any(|a| !(0.0..=1.0).contains(&a.mean)) || arms.is_empty() {
        return Err(CmdError::Input(format!(
            "arm means must lie in [0, 1]; got `{arms_text}`"
        )));
    }
    if horizon < arms.len() as u64 {
        return Err(CmdError::Input(format!(
            "horizon {horizon} is shorter than the {} arms; every arm needs one pull",
            arms.len()
        )));
    }
    if seed_count == 0 {
        return Err(CmdError::Input("need at least one seed".into()));
    }

    let dir = out_dir.unwrap_or(Path::new(".")).to_path_buf();
    let seeds_path = dir.join("regret_seeds.csv");
    let median_path = dir.join("regret_median.csv");
    guard_overwrite(&seeds_path, force)?;
    guard_overwrite(&median_path, force)?;
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let seeds: Vec<u64> = (0..seed_count).map(|i| base_seed + i).collect();
    let runs: Vec<Result<BanditRun, _>> =
        seeds.par_iter().map(|&s| simulate(&arms, horizon, s)).collect();
    let mut completed = Vec::with_capacity(runs.len());
    for run in runs {
        completed.push(run.map_err(|e| CmdError::Input(e.to_string()))?);
    }

    let mut w = csv::Writer::from_path(&seeds_path).map_err(|e| CmdError::Input(e.to_string()))?;
    w.write_record(["seed", "t", "regret"]).map_err(|e| CmdError::Input(e.to_string()))?;
    for (seed, run) in seeds.iter().zip(&completed) {
        for point in &run.checkpoints {
            w.write_record([seed.to_string(), point.t.to_string(), fmt_f64(point.regret)])
                .map_err(|e| CmdError::Input(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| io_err(&seeds_path, e))?;

    // Every run samples the identical checkpoint grid, so the median
    // at index i is across all runs' i-th points.
    let times: Vec<u64> = completed[0].checkpoints.iter().map(|p| p.t).collect();
    let mut w = csv::Writer::from_path(&median_path).map_err(|e| CmdError::Input(e.to_string()))?;
    w.write_record(["t", "median_regret"]).map_err(|e| CmdError::Input(e.to_string()))?;
    let mut final_median = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let values: Vec<f64> = completed.iter().map(|r| r.checkpoints[i].regret).collect();
        let m = median(values);
        final_median = m;
        w.write_record([t.to_string(), fmt_f64(m)])
            .map_err(|e| CmdError::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&median_path, e))?;

    println!(
        "{} run(s) of {} pulls: median final regret {}; files in {}",
        seed_count,
        horizon,
        fmt_f64(final_median),
        dir.display()
    );
    Ok(())
}

/// Median with the even-count midpoint convention.
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite regret"));
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}
