//! Observation series, synthetic PDE data, and evaluation splits.

pub mod pde;
mod store;

pub use pde::{gaussian_blobs, sample_nodes, simulate, Boundary, Movie, PdeKind, PdeSpec, Source};
pub use store::{read_dataset, read_values_bin, write_dataset, write_values_bin, Dataset, DatasetMeta};

use crate::error::{Error, Result};
use crate::geometry::PointSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Values `u(X, t)` over `n_t` timestamps × `n_s` nodes × `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    points: PointSet,
    times: Vec<f64>,
    channels: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ObservationSeries {
    pub fn new(points: PointSet, times: Vec<f64>, channels: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; times.len()];
        Self::with_mask(points, times, channels, values, mask)
    }

    pub fn with_mask(
        points: PointSet,
        times: Vec<f64>,
        channels: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Param("a series needs at least one channel".into()));
        }
        let expect = times.len() * points.len() * channels;
        if values.len() != expect {
            return Err(Error::shape(
                "ObservationSeries",
                &[times.len(), points.len(), channels],
                &[values.len()],
            ));
        }
        if mask.len() != times.len() {
            return Err(Error::shape("ObservationSeries mask", &[times.len()], &[mask.len()]));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("timestamps must be finite and strictly increasing".into()));
        }
        let frame = points.len() * channels;
        for (k, present) in mask.iter().enumerate() {
            if *present && values[k * frame..(k + 1) * frame].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("observed frame {k}")));
            }
        }
        Ok(ObservationSeries {
            points,
            times,
            channels,
            values,
            mask,
        })
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn n_s(&self) -> usize {
        self.points.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Values of timestamp `k`, `n_s × c` row-major.
    pub fn frame(&self, k: usize) -> &[f64] {
        let f = self.n_s() * self.channels;
        &self.values[k * f..(k + 1) * f]
    }

    pub fn value(&self, k: usize, node: usize, channel: usize) -> f64 {
        self.values[(k * self.n_s() + node) * self.channels + channel]
    }

    /// Number of present (unmasked) timestamps.
    pub fn present(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Timestamps `range`, same nodes.
    pub fn slice_time(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.n_t() || range.start > range.end {
            return Err(Error::Contract(format!(
                "time range {range:?} outside 0..{}",
                self.n_t()
            )));
        }
        let f = self.n_s() * self.channels;
        Self::with_mask(
            self.points.clone(),
            self.times[range.clone()].to_vec(),
            self.channels,
            self.values[range.start * f..range.end * f].to_vec(),
            self.mask[range].to_vec(),
        )
    }

    /// The given nodes (in order), all timestamps.
    pub fn select_nodes(&self, ids: &[usize]) -> Result<Self> {
        let points = self.points.subset(ids)?;
        let c = self.channels;
        let mut values = Vec::with_capacity(self.n_t() * ids.len() * c);
        for k in 0..self.n_t() {
            let frame = self.frame(k);
            for &i in ids {
                values.extend_from_slice(&frame[i * c..(i + 1) * c]);
            }
        }
        Self::with_mask(points, self.times.clone(), c, values, self.mask.clone())
    }

    pub fn with_new_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::with_mask(
            self.points.clone(),
            self.times.clone(),
            self.channels,
            self.values.clone(),
            mask,
        )
    }
}

/// Disjoint node sets for transductive training and inductive evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_node_ids: Vec<usize>,
    pub inductive_node_ids: Vec<usize>,
    pub inductive_ratio_milli: u64,
}

impl SplitPlan {
    pub fn inductive_ratio(&self) -> f64 {
        self.inductive_ratio_milli as f64 / 1000.0
    }
}

/// Seeded split of `n_points` nodes into `n_train` training nodes and
/// `round(ratio · n_train)` unseen nodes (at least one when `ratio > 0`).
///
/// The training set depends only on `(n_points, n_train, seed)`, so runs
/// evaluated at different ratios share it.
pub fn make_split(n_points: usize, n_train: usize, ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(Error::Param(format!(
            "inductive ratio must be non-negative, got {ratio}"
        )));
    }
    if n_train == 0 || n_train > n_points {
        return Err(Error::Param(format!("cannot train on {n_train} of {n_points} nodes")));
    }
    let mut count = (ratio * n_train as f64).round() as usize;
    if ratio > 0.0 {
        count = count.max(1);
    }
    if n_train + count > n_points {
        return Err(Error::Param(format!(
            "{count} unseen nodes requested but only {} remain after {n_train} training nodes",
            n_points - n_train
        )));
    }
    let mut order: Vec<usize> = (0..n_points).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut inductive = order[n_train..n_train + count].to_vec();
    train.sort_unstable();
    inductive.sort_unstable();
    Ok(SplitPlan {
        train_node_ids: train,
        inductive_node_ids: inductive,
        inductive_ratio_milli: (ratio * 1000.0).round() as u64,
    })
}

/// Presence flags for `n` frames with `round(ratio · n)` seeded-random ones cleared.
pub fn drop_mask(n: usize, ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Param(format!("missing ratio must lie in [0, 1), got {ratio}")));
    }
    let drop = ((ratio * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mask = vec![true; n];
    for &k in &order[..drop] {
        mask[k] = false;
    }
    Ok(mask)
}

/// Clear the mask on `round(ratio · n_t)` seeded-random timestamps.
pub fn drop_timestamps(series: &ObservationSeries, ratio: f64, seed: u64) -> Result<ObservationSeries> {
    let dropped = drop_mask(series.n_t(), ratio, seed)?;
    let mask = series.mask().iter().zip(dropped).map(|(a, b)| *a && b).collect();
    series.with_new_mask(mask)
}

/// Contiguous `(train, val, test)` timestamp ranges with the given fractions.
pub fn time_split(
    n_t: usize,
    train_frac: f64,
    val_frac: f64,
) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let a = ((n_t as f64) * train_frac).round() as usize;
    let b = (((n_t as f64) * (train_frac + val_frac)).round() as usize).max(a);
    (0..a.min(n_t), a.min(n_t)..b.min(n_t), b.min(n_t)..n_t)
}
