//! The full forecaster: lift and encode the history, decode at query
//! points and times, project back to physical channels.

use crate::config::ModelConfig;
use crate::data::ObservationSeries;
use crate::decoder::{Decoder, EncodedContext, QueryBatch};
use crate::encoder::{EncodeInput, Encoder, NodeFrame};
use crate::error::{Error, Result};
use crate::geometry::{NeighborGraph, PointSet};
use crate::nn::Linear;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-channel z-scoring and the time unit. Relative time is
/// `(t - t_last) / time_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub time_scale: f64,
}

impl Scaling {
    pub fn identity(channels: usize, time_scale: f64) -> Self {
        Scaling {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            time_scale,
        }
    }

    /// Statistics of the present frames in `series` and `history ×` its median interval.
    pub fn fit(series: &ObservationSeries, history: usize) -> Result<Self> {
        let c = series.channels();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for k in 0..series.n_t() {
            if !series.mask()[k] {
                continue;
            }
            for row in series.frame(k).chunks(c) {
                for (ch, &v) in row.iter().enumerate() {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("no observed frames to fit scaling on".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut gaps: Vec<f64> = series.times().windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return Err(Error::Data(
                "at least two timestamps are needed to fix a time unit".into(),
            ));
        }
        gaps.sort_by(f64::total_cmp);
        let median = gaps[gaps.len() / 2];
        Ok(Scaling {
            mean,
            std,
            time_scale: history as f64 * median,
        })
    }

    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

/// Shape facts fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub channels: usize,
    pub coord_dim: usize,
    pub levels: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub shape: ModelShape,
    pub scaling: Scaling,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub project: Linear,
}

/// A stack of windows over one node set, already normalized.
#[derive(Clone, Copy, Debug)]
pub struct WindowInput<'a> {
    /// `windows · n_t · n_s · c` values.
    pub u: &'a [f64],
    pub windows: usize,
    /// Relative times of the history frames.
    pub history: &'a [f64],
    pub queries: &'a QueryBatch,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub v_enc: Var,
    /// Projected encoder states, laid out like the input.
    pub recon: Var,
    /// `windows · Q × c`, window-major.
    pub pred: Var,
}

impl Model {
    pub fn new(cfg: &ModelConfig, shape: ModelShape, scaling: Scaling, seed: u64) -> Result<Self> {
        if scaling.mean.len() != shape.channels || scaling.std.len() != shape.channels {
            return Err(Error::Contract("scaling does not match the channel count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            shape.channels,
            shape.coord_dim,
            1,
            cfg,
            shape.levels,
        );
        let span = shape.horizon as f64 / cfg.history as f64;
        let decoder = Decoder::new(&mut store, &mut rng, shape.coord_dim, cfg, span);
        let project = Linear::new(&mut store, &mut rng, "proj", cfg.d, shape.channels);
        Ok(Model {
            cfg: cfg.clone(),
            shape,
            scaling,
            store,
            encoder,
            decoder,
            project,
        })
    }

    /// Relative times of `times` with respect to `t_last`.
    pub fn relative(&self, times: &[f64], t_last: f64) -> Vec<f64> {
        times.iter().map(|t| (t - t_last) / self.scaling.time_scale).collect()
    }

    /// Relative lead time of output step `k` (1-based) on a uniform grid.
    pub fn step_time(&self, k: usize) -> f64 {
        k as f64 / self.cfg.history as f64
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        points: &PointSet,
        graph: &NeighborGraph,
        input: WindowInput<'_>,
    ) -> Result<ForwardOut> {
        let n_t = input.history.len();
        let n_s = points.len();
        let c = self.shape.channels;
        if input.u.len() != input.windows * n_t * n_s * c {
            return Err(Error::shape("forward", &[input.windows, n_t, n_s, c], &[input.u.len()]));
        }
        if points.dim() != self.shape.coord_dim {
            return Err(Error::Contract(format!(
                "points are {}-dimensional but the model expects {}",
                points.dim(),
                self.shape.coord_dim
            )));
        }
        let frame = NodeFrame {
            coords: points.coords(),
            coord_dim: points.dim(),
            n_s,
            n_t,
            windows: input.windows,
        };
        let rows = input.windows * n_t * n_s;
        let u = tape.constant(vec![rows, c], input.u.to_vec())?;
        let tf = tape.constant(vec![n_t, 1], input.history.to_vec())?;
        let v_enc = self.encoder.forward(
            tape,
            &self.store,
            graph,
            EncodeInput {
                frame,
                u,
                time_features: tf,
            },
        )?;
        let recon = self.project.forward(tape, &self.store, v_enc)?;
        let ctx = EncodedContext {
            points,
            eps: graph.eps(),
            history: input.history,
            windows: input.windows,
            v_enc,
        };
        let v_dec = self.decoder.forward(tape, &self.store, ctx, input.queries)?;
        let pred = self.project.forward(tape, &self.store, v_dec)?;
        Ok(ForwardOut { v_enc, recon, pred })
    }

    /// Encoder states `n_t × n_s × d` for a raw history over `graph`'s nodes.
    pub fn encode(&self, history: &ObservationSeries, graph: &NeighborGraph) -> Result<Tensor> {
        if history.is_empty() {
            return Err(Error::Contract("empty history".into()));
        }
        let points = history.points();
        let n_t = history.n_t();
        let t_last = history.times()[n_t - 1];
        let rel = self.relative(history.times(), t_last);
        let u = self.scaling.normalize(history.values());
        let mut tape = Tape::new();
        let frame = NodeFrame {
            coords: points.coords(),
            coord_dim: points.dim(),
            n_s: points.len(),
            n_t,
            windows: 1,
        };
        let u = tape.constant(vec![n_t * points.len(), self.shape.channels], u)?;
        let tf = tape.constant(vec![n_t, 1], rel)?;
        let v = self.encoder.forward(
            &mut tape,
            &self.store,
            graph,
            EncodeInput {
                frame,
                u,
                time_features: tf,
            },
        )?;
        Tensor::new(vec![n_t, points.len(), self.cfg.d], tape.value(v).to_vec())
    }

    /// Predict at `query_points` and absolute `times` (strictly after the
    /// history) from a raw history. Returns raw-scale values, time-major.
    pub fn forecast(
        &self,
        history: &ObservationSeries,
        graph: &NeighborGraph,
        times: &[f64],
        query_points: &PointSet,
    ) -> Result<ObservationSeries> {
        if history.is_empty() {
            return Err(Error::Contract("empty history".into()));
        }
        let n_t = history.n_t();
        let t_last = history.times()[n_t - 1];
        if times.is_empty() || times.iter().any(|&t| !(t > t_last)) {
            return Err(Error::Contract(
                "forecast times must lie strictly after the history".into(),
            ));
        }
        let rel_hist = self.relative(history.times(), t_last);
        let rel_out = self.relative(times, t_last);
        let queries = QueryBatch::grid(query_points.iter().map(<[f64]>::to_vec).collect(), &rel_out);
        let u = self.scaling.normalize(history.values());
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            history.points(),
            graph,
            WindowInput {
                u: &u,
                windows: 1,
                history: &rel_hist,
                queries: &queries,
            },
        )?;
        let values = self.scaling.denormalize(tape.value(out.pred));
        ObservationSeries::new(query_points.clone(), times.to_vec(), self.shape.channels, values)
    }

    /// Checkpoint bytes of the decoder parameters only.
    pub fn decoder_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let dec = self.store.iter().filter(|(name, _)| name.starts_with("dec."));
        write_checkpoint(&mut buf, dec).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(file), self.store.iter()).map_err(|e| Error::io(path, e))
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let records = read_checkpoint(std::io::BufReader::new(file))?;
        self.store.load_values(records.iter().map(|(n, t)| (n.as_str(), t)))
    }
}
