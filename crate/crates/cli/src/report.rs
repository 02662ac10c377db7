//! Side-by-side metric table across run directories.

use crate::run::{metrics_file, EvalRecord};
use crate::Mode;
use opcast::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

const COLUMNS: [&str; 9] = [
    "run",
    "test_mae",
    "test_rmse",
    "test_mape",
    "persistence_mae",
    "skill",
    "inductive_mae",
    "deviation_pct",
    "irregular_mae",
];

fn read_record(dir: &Path, mode: Mode) -> Result<Option<EvalRecord>> {
    let path = dir.join(metrics_file(mode));
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Cells for one run; the transductive metrics are required.
fn row(dir: &Path) -> Result<Vec<String>> {
    let tran = read_record(dir, Mode::Transductive)?
        .ok_or_else(|| Error::Data(format!("{} has no {}", dir.display(), metrics_file(Mode::Transductive))))?;
    let ind = read_record(dir, Mode::Inductive)?;
    let irr = read_record(dir, Mode::Irregular)?;
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    Ok(vec![
        dir.display().to_string(),
        num(Some(tran.mae)),
        num(Some(tran.rmse)),
        num(Some(tran.mape)),
        num(tran.persistence_mae),
        num(tran.persistence_mae.map(|p| tran.mae / p)),
        num(ind.as_ref().filter(|r| r.unseen_nodes.unwrap_or(0) > 0).map(|r| r.mae)),
        num(ind.as_ref().and_then(|r| r.deviation)),
        num(irr.as_ref().map(|r| r.mae)),
    ])
}

/// Plain-text and CSV renderings; the error count is returned alongside.
pub fn render(runs: &[impl AsRef<Path>]) -> (String, String, usize) {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for dir in runs {
        match row(dir.as_ref()) {
            Ok(r) => rows.push(r),
            Err(e) => errors.push(format!("{}: {e}", dir.as_ref().display())),
        }
    }
    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut text = line(&header) + "\n";
    let mut csv = COLUMNS.join(",") + "\n";
    for r in &rows {
        text += &(line(r) + "\n");
        csv += &(r.join(",") + "\n");
    }
    for e in &errors {
        let _ = writeln!(text, "error: {e}");
    }
    (text, csv, errors.len())
}

pub fn report(runs: &[std::path::PathBuf], out: Option<&Path>) -> Result<()> {
    let (text, csv, errors) = render(runs);
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for (name, body) in [("report.txt", &text), ("report.csv", &csv)] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }
    }
    if errors > 0 {
        return Err(Error::Data(format!(
            "{errors} of {} runs could not be read",
            runs.len()
        )));
    }
    Ok(())
}
