//! Run-directory commands.
//!
//! A run directory holds:
//! `config.toml` (snapshot), `dataset/` (when generated here), `checkpoint.opck`,
//! `scaling.toml`, `train_log.csv`, and per evaluation mode
//! `metrics_<mode>.toml`, `metrics_<mode>.csv` and `predictions_<mode>.csv`.

use crate::Mode;
use opcast::config::RunConfig;
use opcast::data::{read_dataset, write_dataset, Dataset, ObservationSeries};
use opcast::geometry::NeighborGraph;
use opcast::metrics::MetricReport;
use opcast::model::Model;
use opcast::train::{
    attach_nodes, build_model, generate as simulate, inductive_eval, persistence_range, prepare, test_metrics,
    train as fit, window_starts, EpochRecord, Prepared,
};
use opcast::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.opck";
pub const LOG_FILE: &str = "train_log.csv";

/// Summary written to `metrics_<mode>.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: String,
    /// Unseen-node ratio (inductive), missing-frame ratio (irregular), else 0.
    pub ratio: f64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
    pub mape_excluded: usize,
    pub persistence_mae: Option<f64>,
    pub unseen_nodes: Option<usize>,
    pub mae_transductive: Option<f64>,
    /// Percent.
    pub deviation: Option<f64>,
}

impl EvalRecord {
    fn new(mode: Mode, ratio: f64, report: &MetricReport) -> Self {
        let o = &report.overall;
        EvalRecord {
            mode: mode.name().into(),
            ratio,
            mae: o.mae,
            rmse: o.rmse,
            mape: o.mape,
            count: o.count,
            mape_excluded: o.mape_excluded,
            persistence_mae: None,
            unseen_nodes: None,
            mae_transductive: None,
            deviation: None,
        }
    }
}

pub fn metrics_file(mode: Mode) -> String {
    format!("metrics_{}.toml", mode.name())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io(path))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The dataset named in the config, the run's own copy, or a fresh simulation
/// saved into the run directory.
fn dataset_for(cfg: &RunConfig, run_dir: &Path) -> Result<Dataset> {
    if let Some(p) = &cfg.dataset.path {
        return read_dataset(p);
    }
    let local = run_dir.join("dataset");
    if local.join("values.bin").exists() {
        return read_dataset(&local);
    }
    let ds = simulate(cfg)?;
    write_dataset(&local, &ds.series, &ds.meta)?;
    Ok(ds)
}

pub fn generate(config: Option<&Path>, run_dir: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(run_dir).map_err(io(run_dir))?;
    write_text(&run_dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let ds = simulate(&cfg)?;
    let dir = run_dir.join("dataset");
    write_dataset(&dir, &ds.series, &ds.meta)?;
    println!(
        "wrote {} timestamps × {} nodes to {}",
        ds.series.n_t(),
        ds.series.n_s(),
        dir.display()
    );
    Ok(())
}

pub fn train(config: Option<&Path>, run_dir: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(run_dir).map_err(io(run_dir))?;
    write_text(&run_dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let prep = prepare(&cfg, &dataset_for(&cfg, run_dir)?)?;
    let mut model = build_model(&prep)?;
    let scaling = toml::to_string(&model.scaling).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&run_dir.join("scaling.toml"), &scaling)?;

    let log_path = run_dir.join(LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(io(&log_path))?;
    writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(io(&log_path))?;
    let mut log_error = None;
    let outcome = fit(&mut model, &prep, |r| {
        println!("{}", r.csv_line());
        if let Err(e) = writeln!(log, "{}", r.csv_line()).and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
    });
    // The checkpoint holds the best (or last finite) parameters either way.
    model.save(&run_dir.join(CHECKPOINT_FILE))?;
    if let Some(e) = log_error {
        return Err(io(&log_path)(e));
    }
    let report = outcome?;
    println!(
        "best epoch {} validation MAE {:.6}",
        report.best_epoch, report.best_val_mae
    );
    evaluate(&model, &prep, run_dir, Mode::Transductive, 0.0)
}

pub fn eval(config: Option<&Path>, run_dir: &Path, seed: Option<u64>, mode: Mode, ratio: Option<f64>) -> Result<()> {
    let snapshot = config.map_or_else(|| run_dir.join(CONFIG_FILE), Path::to_path_buf);
    let mut cfg = RunConfig::read(&snapshot)?;
    let ratio = match mode {
        Mode::Transductive => 0.0,
        Mode::Inductive => ratio.unwrap_or(cfg.eval.inductive_ratio),
        Mode::Irregular => ratio.unwrap_or(cfg.eval.missing_ratio),
    };
    if mode == Mode::Inductive {
        cfg.eval.inductive_ratio = ratio;
    }
    cfg.validate()?;
    let mut prep = prepare(&cfg, &dataset_for(&cfg, run_dir)?)?;
    let mut model = build_model(&prep)?;
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(Error::Data(format!("no checkpoint at {}", ckpt.display())));
    }
    model.load_params(&ckpt)?;
    if let Some(s) = seed {
        // The graph and split are already fixed; only frame masking reseeds.
        prep.cfg.seed = s;
    }
    evaluate(&model, &prep, run_dir, mode, ratio)
}

fn evaluate(model: &Model, prep: &Prepared, run_dir: &Path, mode: Mode, ratio: f64) -> Result<()> {
    let (h_in, h_out) = (prep.cfg.model.history, prep.cfg.eval.horizon);
    let train_nodes: Vec<usize> = (0..prep.series.n_s()).collect();
    let (record, report) = match mode {
        Mode::Transductive => {
            let report = test_metrics(model, prep, 0.0)?;
            let mut rec = EvalRecord::new(mode, 0.0, &report);
            rec.persistence_mae = Some(
                persistence_range(&prep.series, &prep.test, &train_nodes, h_in, h_out)?
                    .overall
                    .mae,
            );
            write_predictions(model, &prep.series, &prep.graph, prep, &train_nodes, run_dir, mode)?;
            (rec, report)
        }
        Mode::Inductive => {
            let ind = inductive_eval(model, prep)?;
            let report = ind.inductive.clone().unwrap_or_else(|| ind.transductive.clone());
            let mut rec = EvalRecord::new(mode, ratio, &report);
            rec.unseen_nodes = Some(ind.unseen_nodes);
            rec.deviation = ind.deviation;
            if ind.unseen_nodes > 0 {
                rec.mae_transductive = Some(ind.transductive.overall.mae);
                let (graph, series) = attach_nodes(prep, &prep.split.inductive_node_ids)?;
                let scored: Vec<usize> = (prep.series.n_s()..series.n_s()).collect();
                rec.persistence_mae = Some(
                    persistence_range(&series, &prep.test, &scored, h_in, h_out)?
                        .overall
                        .mae,
                );
                write_predictions(model, &series, &graph, prep, &scored, run_dir, mode)?;
            } else {
                rec.persistence_mae = Some(
                    persistence_range(&prep.series, &prep.test, &train_nodes, h_in, h_out)?
                        .overall
                        .mae,
                );
            }
            (rec, report)
        }
        Mode::Irregular => {
            let report = test_metrics(model, prep, ratio)?;
            (EvalRecord::new(mode, ratio, &report), report)
        }
    };
    let text = toml::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&run_dir.join(metrics_file(mode)), &text)?;
    write_text(
        &run_dir.join(format!("metrics_{}.csv", mode.name())),
        &per_step_csv(&report),
    )?;
    println!("{text}");
    Ok(())
}

fn per_step_csv(report: &MetricReport) -> String {
    let mut out = String::from("step,mae,rmse,mape,count,mape_excluded\n");
    let rows = report
        .per_step
        .iter()
        .enumerate()
        .map(|(k, s)| ((k + 1).to_string(), s));
    for (step, s) in rows.chain(std::iter::once(("all".to_string(), &report.overall))) {
        let _ = writeln!(
            out,
            "{step},{},{},{},{},{}",
            s.mae, s.rmse, s.mape, s.count, s.mape_excluded
        );
    }
    out
}

/// Forecast of the first test window at `nodes` of `series`, one CSV row per
/// `(time, node, channel)` in query order.
fn write_predictions(
    model: &Model,
    series: &ObservationSeries,
    graph: &NeighborGraph,
    prep: &Prepared,
    nodes: &[usize],
    run_dir: &Path,
    mode: Mode,
) -> Result<()> {
    let (h_in, h_out) = (prep.cfg.model.history, prep.cfg.eval.horizon);
    let Some(&start) = window_starts(&prep.test, h_in, h_out, 1).first() else {
        return Ok(());
    };
    let history = series.slice_time(start..start + h_in)?;
    let times = &series.times()[start + h_in..start + h_in + h_out];
    let points = series.points().subset(nodes)?;
    let fc = model.forecast(&history, graph, times, &points)?;
    let dim = points.dim();
    let mut out = String::new();
    for i in 0..dim {
        let _ = write!(out, "x{i},");
    }
    out.push_str("t,channel,value\n");
    for (k, &t) in fc.times().iter().enumerate() {
        for (q, x) in points.iter().enumerate() {
            for c in 0..fc.channels() {
                for v in x {
                    let _ = write!(out, "{v},");
                }
                let _ = writeln!(out, "{t},{c},{}", fc.value(k, q, c));
            }
        }
    }
    write_text(&run_dir.join(format!("predictions_{}.csv", mode.name())), &out)
}
