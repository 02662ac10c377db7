//! Dataset generation, sliding-window training, and evaluation protocols.

use crate::config::{RunConfig, SeedStream};
use crate::data::{
    drop_mask, gaussian_blobs, make_split, sample_nodes, simulate, time_split, Dataset, DatasetMeta, ObservationSeries,
    PdeSpec, Source, SplitPlan,
};
use crate::decoder::QueryBatch;
use crate::error::{Error, Result};
use crate::geometry::{default_eps, partition_levels, Domain, NeighborGraph, PointSet};
use crate::loss::{composite_loss, LossLayout};
use crate::metrics::{deviation, MetricAccumulator, MetricReport};
use crate::model::{Model, ModelShape, Scaling, WindowInput};
use crate::tensor::{Adam, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::time::Instant;

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.15;

/// Simulate the configured PDE and sample it at random nodes.
pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    let ds = &cfg.dataset;
    let seed = cfg.seed_for(SeedStream::Data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = (ds.source_amplitude != 0.0).then(|| {
        let field = gaussian_blobs(
            ds.grid,
            ds.boundary,
            ds.blobs.max(1),
            1.5 * ds.blob_width,
            seed ^ 0x5eed,
        );
        Source {
            field: field.iter().map(|v| v * ds.source_amplitude).collect(),
            period: ds.source_period,
        }
    });
    let spec = PdeSpec {
        kind: ds.kind,
        grid: ds.grid,
        coefficient: ds.coefficient,
        source,
        boundary: ds.boundary,
        dt_sim: ds.dt_sim,
    };
    let initial = gaussian_blobs(ds.grid, ds.boundary, ds.blobs, ds.blob_width, seed);
    let mut movie = simulate(&spec, &initial, ds.burn_in + ds.steps)?;
    movie.frames.drain(..ds.burn_in);

    let coords: Vec<Vec<f64>> = (0..ds.nodes)
        .map(|_| match ds.domain {
            Domain::Plane => vec![rng.gen::<f64>(), rng.gen::<f64>()],
            Domain::Sphere => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let lon: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                vec![r * lon.cos(), r * lon.sin(), z]
            }
        })
        .collect();
    let points = PointSet::new(ds.domain, &coords)?;
    let sampled = sample_nodes(&movie, &points, ds.stride)?;
    let offset = ds.burn_in as f64 * ds.dt_sim;
    let times = sampled.times().iter().map(|t| t + offset).collect();
    let series = ObservationSeries::new(points, times, 1, sampled.values().to_vec())?;

    let mut meta = DatasetMeta::new();
    for (k, v) in [
        ("kind", format!("{:?}", ds.kind).to_lowercase()),
        ("grid", ds.grid.to_string()),
        ("boundary", format!("{:?}", ds.boundary).to_lowercase()),
        ("coefficient", ds.coefficient.to_string()),
        ("dt_sim", ds.dt_sim.to_string()),
        ("burn_in", ds.burn_in.to_string()),
        ("steps", ds.steps.to_string()),
        ("stride", ds.stride.to_string()),
        ("seed", seed.to_string()),
    ] {
        meta.insert(k.into(), v);
    }
    Ok(Dataset { series, meta })
}

/// Everything a run needs besides the model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cfg: RunConfig,
    /// All sampled nodes.
    pub full: ObservationSeries,
    pub split: SplitPlan,
    /// Training nodes only.
    pub series: ObservationSeries,
    pub graph: NeighborGraph,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn prepare(cfg: &RunConfig, dataset: &Dataset) -> Result<Prepared> {
    let full = dataset.series.clone();
    let split = make_split(
        full.n_s(),
        cfg.dataset.train_nodes.min(full.n_s()),
        cfg.eval.inductive_ratio,
        cfg.seed_for(SeedStream::Split),
    )
    .map_err(|e| Error::Config(e.to_string()))?;
    let series = full.select_nodes(&split.train_node_ids)?;
    let graph = build_graph(cfg, series.points())?;
    let (train, val, test) = time_split(full.n_t(), TRAIN_FRACTION, VAL_FRACTION);
    let need = cfg.model.history + cfg.eval.horizon;
    for (name, r) in [("train", &train), ("validation", &val), ("test", &test)] {
        if r.len() < cfg.eval.horizon || r.end < need {
            return Err(Error::Data(format!(
                "{name} period of {} frames is too short for {}-to-{} windows",
                r.len(),
                cfg.model.history,
                cfg.eval.horizon
            )));
        }
    }
    Ok(Prepared {
        cfg: cfg.clone(),
        full,
        split,
        series,
        graph,
        train,
        val,
        test,
    })
}

pub fn build_graph(cfg: &RunConfig, points: &PointSet) -> Result<NeighborGraph> {
    let eps = cfg.graph.eps.unwrap_or_else(|| default_eps(points));
    let levels = partition_levels(points.len(), cfg.graph.levels, cfg.seed_for(SeedStream::Levels))
        .map_err(|e| Error::Config(e.to_string()))?;
    NeighborGraph::build_with_levels(points, eps, levels)
}

pub fn build_model(prep: &Prepared) -> Result<Model> {
    let cfg = &prep.cfg;
    let scaling = Scaling::fit(&prep.series.slice_time(prep.train.clone())?, cfg.model.history)?;
    let shape = ModelShape {
        channels: prep.series.channels(),
        coord_dim: prep.series.points().dim(),
        levels: prep.graph.num_levels(),
        horizon: cfg.eval.horizon,
    };
    Model::new(&cfg.model, shape, scaling, cfg.seed_for(SeedStream::Init))
}

/// Window starts whose output frames all fall inside `range`, every `stride` frames.
pub fn window_starts(range: &Range<usize>, history: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let first = range.start.saturating_sub(history);
    let last = match range.end.checked_sub(history + horizon) {
        Some(l) if l >= first => l,
        _ => return Vec::new(),
    };
    (first..=last).step_by(stride.max(1)).collect()
}

/// Stacked, normalized windows sharing one set of relative times.
struct Batch {
    starts: Vec<usize>,
    u_in: Vec<f64>,
    u_out: Vec<f64>,
    present: Vec<bool>,
    history: Vec<f64>,
    queries: QueryBatch,
    scored: Vec<usize>,
}

/// Per-window output mask: the series mask, thinned at `ratio` when positive.
fn output_mask(
    series: &ObservationSeries,
    start: usize,
    history: usize,
    horizon: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    let base = &series.mask()[start + history..start + history + horizon];
    if ratio == 0.0 {
        return Ok(base.to_vec());
    }
    let salt = seed ^ (start as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let drop = drop_mask(horizon, ratio, salt)?;
    Ok(base.iter().zip(drop).map(|(a, b)| *a && b).collect())
}

fn same_times(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()))
}

/// Options shared by training and evaluation batches.
#[derive(Clone, Copy, Debug)]
struct BatchSpec<'a> {
    history: usize,
    horizon: usize,
    missing_ratio: f64,
    mask_seed: u64,
    /// Nodes whose outputs are queried and scored.
    scored: &'a [usize],
}

/// Group `starts` into batches of at most `size` windows with equal relative times.
fn make_batches(
    model: &Model,
    series: &ObservationSeries,
    starts: &[usize],
    size: usize,
    spec: BatchSpec<'_>,
) -> Result<Vec<Batch>> {
    let (h_in, h_out) = (spec.history, spec.horizon);
    let n_s = series.n_s();
    let c = series.channels();
    let frame = n_s * c;
    let mut batches: Vec<Batch> = Vec::new();
    let mut open: Option<Batch> = None;
    for &s in starts {
        if series.mask()[s..s + h_in].iter().any(|m| !m) {
            continue;
        }
        let present = output_mask(series, s, h_in, h_out, spec.missing_ratio, spec.mask_seed)?;
        if !present.iter().any(|p| *p) {
            continue;
        }
        let times = series.times();
        let t_last = times[s + h_in - 1];
        let hist = model.relative(&times[s..s + h_in], t_last);
        let out_times = model.relative(&times[s + h_in..s + h_in + h_out], t_last);
        let fits = open.as_ref().is_some_and(|b| {
            b.starts.len() < size && same_times(&b.history, &hist) && same_times(&b.queries_times(h_out), &out_times)
        });
        if !fits {
            if let Some(b) = open.take() {
                batches.push(b);
            }
            let locations = spec.scored.iter().map(|&i| series.points().point(i).to_vec()).collect();
            open = Some(Batch {
                starts: Vec::new(),
                u_in: Vec::new(),
                u_out: Vec::new(),
                present: Vec::new(),
                history: hist,
                queries: QueryBatch::grid(locations, &out_times),
                scored: spec.scored.to_vec(),
            });
        }
        let b = open.as_mut().expect("batch opened above");
        b.starts.push(s);
        b.u_in
            .extend(model.scaling.normalize(&series.values()[s * frame..(s + h_in) * frame]));
        for (k, &p) in present.iter().enumerate() {
            let f = series.frame(s + h_in + k);
            for &i in spec.scored {
                let row = &f[i * c..(i + 1) * c];
                if p {
                    b.u_out.extend(
                        row.iter()
                            .enumerate()
                            .map(|(ch, v)| (v - model.scaling.mean[ch]) / model.scaling.std[ch]),
                    );
                } else {
                    b.u_out.extend(std::iter::repeat_n(0.0, c));
                }
            }
        }
        b.present.extend(present);
    }
    if let Some(b) = open {
        batches.push(b);
    }
    Ok(batches)
}

impl Batch {
    /// The same windows restricted to `keep`, a sorted subset of the scored
    /// nodes, which must cover every node of the series.
    fn restrict(&self, keep: &[usize], c: usize) -> Batch {
        let n = self.scored.len();
        let pick = |values: &[f64]| -> Vec<f64> {
            values
                .chunks(n * c)
                .flat_map(|frame| {
                    keep.iter()
                        .flat_map(move |&i| frame[i * c..(i + 1) * c].iter().copied())
                })
                .collect()
        };
        let times = self.queries_times(self.present.len() / self.starts.len());
        let locations = keep.iter().map(|&i| self.queries.locations[i].clone()).collect();
        Batch {
            starts: self.starts.clone(),
            u_in: pick(&self.u_in),
            u_out: pick(&self.u_out),
            present: self.present.clone(),
            history: self.history.clone(),
            queries: QueryBatch::grid(locations, &times),
            scored: keep.to_vec(),
        }
    }

    /// Lead times of the query grid (time-major, one per step).
    fn queries_times(&self, horizon: usize) -> Vec<f64> {
        let n = self.queries.locations.len();
        (0..horizon).map(|k| self.queries.targets[k * n].1).collect()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_mae,val_rmse,lr,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_mae, self.val_rmse, self.lr, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

fn snapshot(model: &Model) -> Vec<Tensor> {
    model.store.iter().map(|(_, t)| t.clone()).collect()
}

fn restore(model: &mut Model, snap: &[Tensor]) {
    let ids: Vec<_> = model.store.ids().collect();
    for (id, t) in ids.into_iter().zip(snap) {
        model.store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
}

/// Mini-batch Adam over shuffled training windows with early stopping on
/// validation MAE. The best parameters are left in `model`. On a non-finite
/// loss the last finite parameters are restored and `Diverged` returned.
pub fn train(model: &mut Model, prep: &Prepared, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainReport> {
    let cfg = &prep.cfg;
    let (h_in, h_out) = (cfg.model.history, cfg.eval.horizon);
    let all_nodes: Vec<usize> = (0..prep.series.n_s()).collect();
    let spec = BatchSpec {
        history: h_in,
        horizon: h_out,
        missing_ratio: cfg.eval.missing_ratio,
        mask_seed: cfg.seed_for(SeedStream::Mask),
        scored: &all_nodes,
    };
    let starts = window_starts(&prep.train, h_in, h_out, cfg.optimizer.window_stride);
    if starts.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(SeedStream::Shuffle));
    let mut state = AdamState::new(&model.store, cfg.optimizer.lr);
    let mut best = snapshot(model);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut stale = 0;

    for epoch in 1..=cfg.optimizer.epochs {
        let clock = Instant::now();
        let mut order = starts.clone();
        order.shuffle(&mut rng);
        let batches = make_batches(model, &prep.series, &order, cfg.optimizer.batch, spec)?;
        let mut total = 0.0;
        let mut count = 0usize;
        let last_good = snapshot(model);
        for b in &batches {
            let loss = match node_sample(prep, &mut rng)? {
                Some((keep, points, graph)) => step(
                    model,
                    prep,
                    &points,
                    &graph,
                    &b.restrict(&keep, prep.series.channels()),
                    &mut state,
                )?,
                None => step(model, prep, prep.series.points(), &prep.graph, b, &mut state)?,
            };
            if !loss.is_finite() {
                restore(model, &last_good);
                return Err(Error::Diverged { epoch });
            }
            total += loss * b.starts.len() as f64;
            count += b.starts.len();
        }
        if count == 0 {
            return Err(Error::Data(
                "every training window lacks supervised output frames".into(),
            ));
        }
        let val = evaluate_range(model, &prep.series, &prep.graph, &prep.val, &all_nodes, cfg, 0.0)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / count as f64,
            val_mae: val.overall.mae,
            val_rmse: val.overall.rmse,
            lr: state.lr,
            wall_ms: clock.elapsed().as_millis(),
        };
        on_epoch(&record);
        log.push(record);
        if !val.overall.mae.is_finite() {
            restore(model, &last_good);
            return Err(Error::Diverged { epoch });
        }
        if val.overall.mae < best_val {
            best_val = val.overall.mae;
            best_epoch = epoch;
            best = snapshot(model);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.optimizer.patience {
                break;
            }
        }
    }
    restore(model, &best);
    Ok(TrainReport {
        log,
        best_epoch,
        best_val_mae: best_val,
    })
}

/// A random subset of training nodes with its own graph, or `None` when the
/// full graph is used. Subsets that would leave a level empty are redrawn.
fn node_sample(prep: &Prepared, rng: &mut ChaCha8Rng) -> Result<Option<(Vec<usize>, PointSet, NeighborGraph)>> {
    let n = prep.series.n_s();
    let count = ((prep.cfg.optimizer.node_keep * n as f64).round() as usize).max(1);
    if count >= n {
        return Ok(None);
    }
    let levels = prep.graph.levels();
    for _ in 0..16 {
        let mut keep = rand::seq::index::sample(rng, n, count).into_vec();
        keep.sort_unstable();
        let sub_levels: Vec<usize> = keep.iter().map(|&i| levels[i]).collect();
        if (1..=prep.graph.num_levels()).all(|l| sub_levels.contains(&l)) {
            let points = prep.series.points().subset(&keep)?;
            let graph = NeighborGraph::build_with_levels(&points, prep.graph.eps(), sub_levels)?;
            return Ok(Some((keep, points, graph)));
        }
    }
    Ok(None)
}

fn step(
    model: &mut Model,
    prep: &Prepared,
    points: &PointSet,
    graph: &NeighborGraph,
    b: &Batch,
    state: &mut AdamState,
) -> Result<f64> {
    let cfg = &prep.cfg;
    let mut tape = Tape::new();
    let out = model.forward(
        &mut tape,
        points,
        graph,
        WindowInput {
            u: &b.u_in,
            windows: b.starts.len(),
            history: &b.history,
            queries: &b.queries,
        },
    )?;
    let layout = LossLayout {
        windows: b.starts.len(),
        n_t: b.history.len(),
        n_s: points.len(),
        horizon: cfg.eval.horizon,
        channels: prep.series.channels(),
    };
    let loss = composite_loss(
        &mut tape,
        layout,
        out.recon,
        &b.u_in,
        out.pred,
        &b.u_out,
        &b.present,
        cfg.loss.alpha,
    )?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    Adam::step(&mut model.store, state)?;
    Ok(value)
}

/// Metrics on raw scale for windows whose outputs fall in `range`, scoring
/// the nodes `scored` of `series` (whose node order matches `graph`).
pub fn evaluate_range(
    model: &Model,
    series: &ObservationSeries,
    graph: &NeighborGraph,
    range: &Range<usize>,
    scored: &[usize],
    cfg: &RunConfig,
    missing_ratio: f64,
) -> Result<MetricReport> {
    let (h_in, h_out) = (cfg.model.history, cfg.eval.horizon);
    let starts = window_starts(range, h_in, h_out, 1);
    let spec = BatchSpec {
        history: h_in,
        horizon: h_out,
        missing_ratio,
        mask_seed: cfg.seed_for(SeedStream::Mask) ^ 0xe7a1,
        scored,
    };
    let batches = make_batches(model, series, &starts, cfg.optimizer.batch.max(16), spec)?;
    let c = series.channels();
    let mut acc = MetricAccumulator::new(h_out);
    for b in &batches {
        let mut tape = Tape::new();
        let out = model.forward(
            &mut tape,
            series.points(),
            graph,
            WindowInput {
                u: &b.u_in,
                windows: b.starts.len(),
                history: &b.history,
                queries: &b.queries,
            },
        )?;
        let pred = model.scaling.denormalize(tape.value(out.pred));
        let block = b.scored.len() * c;
        for (w, &s) in b.starts.iter().enumerate() {
            for k in 0..h_out {
                if !b.present[w * h_out + k] {
                    continue;
                }
                let truth: Vec<f64> = scored_rows(series, s + h_in + k, &b.scored);
                let at = (w * h_out + k) * block;
                acc.push_step(k, &pred[at..at + block], &truth)?;
            }
        }
    }
    Ok(acc.report())
}

fn scored_rows(series: &ObservationSeries, k: usize, nodes: &[usize]) -> Vec<f64> {
    let c = series.channels();
    let f = series.frame(k);
    nodes
        .iter()
        .flat_map(|&i| f[i * c..(i + 1) * c].iter().copied())
        .collect()
}

/// Last-frame persistence over the same windows and nodes as [`evaluate_range`].
pub fn persistence_range(
    series: &ObservationSeries,
    range: &Range<usize>,
    scored: &[usize],
    history: usize,
    horizon: usize,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(horizon);
    for s in window_starts(range, history, horizon, 1) {
        if series.mask()[s..s + history].iter().any(|m| !m) {
            continue;
        }
        let last = scored_rows(series, s + history - 1, scored);
        for k in 0..horizon {
            if series.mask()[s + history + k] {
                acc.push_step(k, &last, &scored_rows(series, s + history + k, scored))?;
            }
        }
    }
    Ok(acc.report())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductiveReport {
    pub unseen_nodes: usize,
    /// Test metrics at the training nodes on the training graph.
    pub transductive: MetricReport,
    /// Test metrics at the unseen nodes after attaching them; absent without any.
    pub inductive: Option<MetricReport>,
    /// Percent change of the inductive over the transductive MAE.
    pub deviation: Option<f64>,
}

/// Transductive test metrics on the training graph, and metrics at the
/// split's unseen nodes after attaching them all to the graph.
pub fn inductive_eval(model: &Model, prep: &Prepared) -> Result<InductiveReport> {
    let cfg = &prep.cfg;
    let train_nodes: Vec<usize> = (0..prep.series.n_s()).collect();
    let tran = evaluate_range(model, &prep.series, &prep.graph, &prep.test, &train_nodes, cfg, 0.0)?;
    let unseen = &prep.split.inductive_node_ids;
    if unseen.is_empty() {
        return Ok(InductiveReport {
            unseen_nodes: 0,
            transductive: tran,
            inductive: None,
            deviation: None,
        });
    }
    let (graph, series) = attach_nodes(prep, unseen)?;
    let scored: Vec<usize> = (prep.series.n_s()..series.n_s()).collect();
    let ind = evaluate_range(model, &series, &graph, &prep.test, &scored, cfg, 0.0)?;
    Ok(InductiveReport {
        unseen_nodes: unseen.len(),
        deviation: Some(deviation(ind.overall.mae, tran.overall.mae)),
        transductive: tran,
        inductive: Some(ind),
    })
}

/// The training graph with `ids` (indices into the full series) attached in order.
pub fn attach_nodes(prep: &Prepared, ids: &[usize]) -> Result<(NeighborGraph, ObservationSeries)> {
    let mut graph = prep.graph.clone();
    let mut points = prep.series.points().clone();
    for &i in ids {
        let (g, p) = graph.attach_node(&points, prep.full.points().point(i))?;
        graph = g;
        points = p;
    }
    let order: Vec<usize> = prep.split.train_node_ids.iter().chain(ids).copied().collect();
    Ok((graph, prep.full.select_nodes(&order)?))
}

/// Test metrics, optionally thinning output frames at `missing_ratio`.
pub fn test_metrics(model: &Model, prep: &Prepared, missing_ratio: f64) -> Result<MetricReport> {
    let nodes: Vec<usize> = (0..prep.series.n_s()).collect();
    evaluate_range(
        model,
        &prep.series,
        &prep.graph,
        &prep.test,
        &nodes,
        &prep.cfg,
        missing_ratio,
    )
}

pub fn persistence_test(prep: &Prepared) -> Result<MetricReport> {
    let nodes: Vec<usize> = (0..prep.series.n_s()).collect();
    persistence_range(
        &prep.series,
        &prep.test,
        &nodes,
        prep.cfg.model.history,
        prep.cfg.eval.horizon,
    )
}
