//! MAE, RMSE and MAPE, overall and per horizon step.

use crate::data::ObservationSeries;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Truth magnitudes below this are left out of MAPE.
pub const MAPE_ZERO: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
    pub mape_excluded: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Scores,
    pub per_step: Vec<Scores>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Sums {
    abs: f64,
    sq: f64,
    rel: f64,
    n: usize,
    n_rel: usize,
    excluded: usize,
}

impl Sums {
    fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth.abs() < MAPE_ZERO {
            self.excluded += 1;
        } else {
            self.rel += (e / truth).abs();
            self.n_rel += 1;
        }
    }

    fn scores(&self) -> Scores {
        let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
        Scores {
            mae: ratio(self.abs, self.n),
            rmse: ratio(self.sq, self.n).sqrt(),
            mape: ratio(self.rel, self.n_rel),
            count: self.n,
            mape_excluded: self.excluded,
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.rel += o.rel;
        self.n += o.n;
        self.n_rel += o.n_rel;
        self.excluded += o.excluded;
    }
}

/// Running error sums over many windows, indexed by horizon step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    steps: Vec<Sums>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        MetricAccumulator {
            steps: vec![Sums::default(); horizon],
        }
    }

    /// Add one horizon step's aligned predictions and truths.
    pub fn push_step(&mut self, step: usize, pred: &[f64], truth: &[f64]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("metrics", &[truth.len()], &[pred.len()]));
        }
        if step >= self.steps.len() {
            self.steps.resize(step + 1, Sums::default());
        }
        for (p, t) in pred.iter().zip(truth) {
            self.steps[step].push(*p, *t);
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mut all = Sums::default();
        for s in &self.steps {
            all.merge(s);
        }
        MetricReport {
            overall: all.scores(),
            per_step: self.steps.iter().map(Sums::scores).collect(),
        }
    }
}

/// Scores of `pred` against `truth` over the timestamps present in `truth`.
pub fn metrics(pred: &ObservationSeries, truth: &ObservationSeries) -> Result<MetricReport> {
    if pred.n_t() != truth.n_t() || pred.n_s() != truth.n_s() || pred.channels() != truth.channels() {
        return Err(Error::shape(
            "metrics",
            &[truth.n_t(), truth.n_s(), truth.channels()],
            &[pred.n_t(), pred.n_s(), pred.channels()],
        ));
    }
    let mut acc = MetricAccumulator::new(truth.n_t());
    for k in 0..truth.n_t() {
        if truth.mask()[k] {
            acc.push_step(k, pred.frame(k), truth.frame(k))?;
        }
    }
    Ok(acc.report())
}

/// Percent change of the inductive MAE over the transductive one.
pub fn deviation(mae_inductive: f64, mae_transductive: f64) -> f64 {
    100.0 * (mae_inductive - mae_transductive) / mae_transductive
}

/// Repeat the last history frame at every horizon time.
pub fn persistence_baseline(history: &ObservationSeries, times: &[f64]) -> Result<ObservationSeries> {
    if history.is_empty() {
        return Err(Error::Contract("persistence needs a non-empty history".into()));
    }
    let last = history.frame(history.n_t() - 1);
    let values = times.iter().flat_map(|_| last.iter().copied()).collect();
    ObservationSeries::new(history.points().clone(), times.to_vec(), history.channels(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, PointSet};

    fn series(values: Vec<f64>, n_s: usize) -> ObservationSeries {
        let pts: Vec<Vec<f64>> = (0..n_s).map(|i| vec![i as f64, 0.0]).collect();
        let n_t = values.len() / n_s;
        let pts = PointSet::new(Domain::Plane, &pts).unwrap();
        ObservationSeries::new(pts, (0..n_t).map(|k| k as f64).collect(), 1, values).unwrap()
    }

    #[test]
    fn single_entry_and_exclusion() {
        let r = metrics(&series(vec![3.0], 1), &series(vec![2.0], 1)).unwrap().overall;
        assert_eq!((r.mae, r.rmse, r.mape), (1.0, 1.0, 0.5));
        let r = metrics(&series(vec![1.0, 2.0], 2), &series(vec![0.0, 2.0], 2))
            .unwrap()
            .overall;
        assert_eq!((r.mape, r.mape_excluded), (0.0, 1));
        let same = series(vec![1.5, -2.0, 0.0, 4.0], 2);
        let r = metrics(&same, &same).unwrap().overall;
        assert_eq!((r.mae, r.rmse, r.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn deviation_formula() {
        assert!((deviation(1.05, 1.00) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn persistence_examples() {
        let flat = series(vec![2.0; 3], 1);
        let times = [3.0, 4.0, 5.0];
        let p = persistence_baseline(&flat, &times).unwrap();
        let truth = ObservationSeries::new(flat.points().clone(), times.to_vec(), 1, vec![2.0; 3]).unwrap();
        assert_eq!(metrics(&p, &truth).unwrap().overall.mae, 0.0);

        // Slope 1: the error at step j is j, so the mean over k steps is (k + 1) / 2.
        let ramp = series(vec![0.0, 1.0, 2.0], 1);
        let k = 5;
        let times: Vec<f64> = (1..=k).map(|j| 2.0 + j as f64).collect();
        let truth = ObservationSeries::new(ramp.points().clone(), times.clone(), 1, times.clone()).unwrap();
        let p = persistence_baseline(&ramp, &times).unwrap();
        assert_eq!(metrics(&p, &truth).unwrap().overall.mae, (k + 1) as f64 / 2.0);
        assert_eq!(p, persistence_baseline(&ramp, &times).unwrap());
    }
}
