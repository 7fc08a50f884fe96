//! `lie plotdata` — flatten metrics.csv logs into tidy long format.
//!
//! Each input row becomes nine output rows, one per metric:
//! `run,iter,metric,value`. The run column is the input path exactly
//! as given, and values are copied verbatim from the source cells so
//! downstream plotting sees the same bytes the trainer wrote.

use std::path::Path;

use lie_core::trapsim::METRIC_NAMES;

use crate::records::{guard_overwrite, io_err, metrics_header};
use crate::CmdError;

pub fn plotdata(inputs: &[std::path::PathBuf], out_dir: Option<&Path>, force: bool) -> Result<(), CmdError> {
    let expected = metrics_header();
    let mut out_rows: Vec<[String; 4]> = Vec::new();

    for path in inputs {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(CmdError::Input(format!(
                "{}: unexpected columns {:?}; expected {:?}",
                path.display(),
                got,
                expected
            )));
        }
        let run = path.display().to_string();
        let mut saw_row = false;
        for record in reader.records() {
            let record = record.map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
            if record.len() != expected.len() {
                return Err(CmdError::Input(format!(
                    "{}: row with {} fields; expected {}",
                    path.display(),
                    record.len(),
                    expected.len()
                )));
            }
            saw_row = true;
            let iter = record[0].to_string();
            for (i, metric) in METRIC_NAMES.iter().enumerate() {
                out_rows.push([
                    run.clone(),
                    iter.clone(),
                    metric.to_string(),
                    record[i + 1].to_string(),
                ]);
            }
        }
        if !saw_row {
            return Err(CmdError::Input(format!(
                "{}: no data rows",
                path.display()
            )));
        }
    }

    match out_dir {
        Some(dir) => {
            let out_path = dir.join("plotdata.csv");
            guard_overwrite(&out_path, force)?;
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let mut w =
                csv::Writer::from_path(&out_path).map_err(|e| CmdError::Input(e.to_string()))?;
            write_rows(&mut w, &out_rows)?;
            w.flush().map_err(|e| io_err(&out_path, e))?;
            println!("{} row(s) -> {}", out_rows.len(), out_path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = csv::Writer::from_writer(stdout.lock());
            write_rows(&mut w, &out_rows)?;
            w.flush().map_err(|e| CmdError::Input(e.to_string()))?;
        }
    }
    Ok(())
}

fn write_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    rows: &[[String; 4]],
) -> Result<(), CmdError> {
    w.write_record(["run", "iter", "metric", "value"])
        .map_err(|e| CmdError::Input(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| CmdError::Input(e.to_string()))?;
    }
    Ok(())
}
