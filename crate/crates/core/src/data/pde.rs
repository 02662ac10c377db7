//! Explicit finite-difference simulators on a square grid over `[0, 1]²`.

use crate::error::{Error, Result};
use crate::geometry::{Domain, PointSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::ObservationSeries;

pub const HEAT_LIMIT: f64 = 0.25;
pub const WAVE_LIMIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeKind {
    Heat,
    Wave,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    /// Zero-flux (mirror ghost cells).
    Reflective,
}

/// Forcing `q(x, t) = field(x) · cos(2πt / period)`, or static without a period.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub field: Vec<f64>,
    pub period: Option<f64>,
}

impl Source {
    fn at(&self, t: f64) -> f64 {
        self.period.map_or(1.0, |p| (2.0 * PI * t / p).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdeSpec {
    pub kind: PdeKind,
    /// Vertices per axis.
    pub grid: usize,
    /// Diffusivity (heat) or wave speed (wave).
    pub coefficient: f64,
    pub source: Option<Source>,
    pub boundary: Boundary,
    pub dt_sim: f64,
}

impl PdeSpec {
    pub fn spacing(&self) -> f64 {
        match self.boundary {
            Boundary::Periodic => 1.0 / self.grid as f64,
            Boundary::Reflective => 1.0 / (self.grid as f64 - 1.0),
        }
    }

    /// Per-axis stability number and its limit.
    pub fn stability(&self) -> (f64, f64) {
        let h = self.spacing();
        match self.kind {
            PdeKind::Heat => (self.coefficient * self.dt_sim / (h * h), HEAT_LIMIT),
            PdeKind::Wave => ((self.coefficient * self.dt_sim / h).powi(2), WAVE_LIMIT),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid < 3 {
            return Err(Error::Param(format!(
                "grid needs at least 3 vertices per axis, got {}",
                self.grid
            )));
        }
        if !(self.dt_sim > 0.0) || !(self.coefficient >= 0.0) {
            return Err(Error::Param(
                "dt_sim must be positive and the coefficient non-negative".into(),
            ));
        }
        if let Some(s) = &self.source {
            if s.field.len() != self.grid * self.grid {
                return Err(Error::shape("source field", &[self.grid, self.grid], &[s.field.len()]));
            }
        }
        let (number, limit) = self.stability();
        if number > limit {
            return Err(Error::Unstable { number, limit });
        }
        Ok(())
    }
}

/// Dense grid field over time. Frame `k` is the state after `k` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Movie {
    pub grid: usize,
    pub boundary: Boundary,
    pub dt_sim: f64,
    pub frames: Vec<Vec<f64>>,
}

impl Movie {
    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 * self.dt_sim
    }
}

fn laplacian(u: &[f64], n: usize, h: f64, boundary: Boundary, out: &mut [f64]) {
    let inv_h2 = 1.0 / (h * h);
    let idx = |ix: isize, iy: isize| -> usize {
        let wrap = |k: isize| -> usize {
            match boundary {
                Boundary::Periodic => k.rem_euclid(n as isize) as usize,
                Boundary::Reflective => {
                    if k < 0 {
                        (-k) as usize
                    } else if k >= n as isize {
                        (2 * (n as isize - 1) - k) as usize
                    } else {
                        k as usize
                    }
                }
            }
        };
        wrap(iy) * n + wrap(ix)
    };
    for iy in 0..n as isize {
        for ix in 0..n as isize {
            let c = u[idx(ix, iy)];
            let s = u[idx(ix - 1, iy)] + u[idx(ix + 1, iy)] + u[idx(ix, iy - 1)] + u[idx(ix, iy + 1)];
            out[iy as usize * n + ix as usize] = (s - 4.0 * c) * inv_h2;
        }
    }
}

/// Run `steps` frames (including the initial one): explicit Euler for heat,
/// leapfrog for wave (starting from rest).
pub fn simulate(spec: &PdeSpec, initial: &[f64], steps: usize) -> Result<Movie> {
    spec.validate()?;
    let n = spec.grid;
    if initial.len() != n * n {
        return Err(Error::shape("simulate", &[n, n], &[initial.len()]));
    }
    let h = spec.spacing();
    let dt = spec.dt_sim;
    let c = spec.coefficient;
    let mut frames = Vec::with_capacity(steps);
    let mut lap = vec![0.0; n * n];
    let mut u = initial.to_vec();
    let forcing = |k: usize| spec.source.as_ref().map(|s| (s, s.at(k as f64 * dt)));

    match spec.kind {
        PdeKind::Heat => {
            for k in 0..steps {
                frames.push(u.clone());
                if k + 1 == steps {
                    break;
                }
                laplacian(&u, n, h, spec.boundary, &mut lap);
                let q = forcing(k);
                for i in 0..n * n {
                    let src = q.map_or(0.0, |(s, a)| s.field[i] * a);
                    u[i] += dt * (c * lap[i] + src);
                }
            }
        }
        PdeKind::Wave => {
            let c2 = c * c * dt * dt;
            laplacian(&u, n, h, spec.boundary, &mut lap);
            let q0 = forcing(0);
            // Zero initial velocity: u(-dt) from a second-order Taylor step.
            let mut prev: Vec<f64> = (0..n * n)
                .map(|i| u[i] + 0.5 * c2 * lap[i] + 0.5 * dt * dt * q0.map_or(0.0, |(s, a)| s.field[i] * a))
                .collect();
            for k in 0..steps {
                frames.push(u.clone());
                if k + 1 == steps {
                    break;
                }
                laplacian(&u, n, h, spec.boundary, &mut lap);
                let q = forcing(k);
                for i in 0..n * n {
                    let src = q.map_or(0.0, |(s, a)| s.field[i] * a);
                    let next = 2.0 * u[i] - prev[i] + c2 * lap[i] + dt * dt * src;
                    prev[i] = u[i];
                    u[i] = next;
                }
            }
        }
    }
    if frames.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simulated field".into()));
    }
    Ok(Movie {
        grid: n,
        boundary: spec.boundary,
        dt_sim: dt,
        frames,
    })
}

/// Sum of `count` random Gaussian bumps (periodic images on a periodic grid).
pub fn gaussian_blobs(grid: usize, boundary: Boundary, count: usize, width: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = match boundary {
        Boundary::Periodic => 1.0 / grid as f64,
        Boundary::Reflective => 1.0 / (grid as f64 - 1.0),
    };
    let blobs: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen_range(-1.0..1.0)))
        .collect();
    let mut out = vec![0.0; grid * grid];
    for iy in 0..grid {
        for ix in 0..grid {
            let (x, y) = (ix as f64 * h, iy as f64 * h);
            let mut v = 0.0;
            for &(bx, by, amp) in &blobs {
                let mut dx = (x - bx).abs();
                let mut dy = (y - by).abs();
                if boundary == Boundary::Periodic {
                    dx = dx.min(1.0 - dx);
                    dy = dy.min(1.0 - dy);
                }
                v += amp * (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
            }
            out[iy * grid + ix] = v;
        }
    }
    out
}

/// Map a sample location to continuous grid coordinates in `[0, 1]²`.
fn unit_square_coords(domain: Domain, p: &[f64]) -> Result<(f64, f64)> {
    match domain {
        Domain::Plane => {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::Domain(format!("point {p:?} lies outside the unit square")));
            }
            Ok((p[0], p[1]))
        }
        Domain::Sphere => {
            let lon = p[1].atan2(p[0]);
            let lat = p[2].clamp(-1.0, 1.0).asin();
            Ok(((lon / (2.0 * PI)).rem_euclid(1.0), (lat + PI / 2.0) / PI))
        }
    }
}

/// Bilinear interpolation of `field` at unit-square coordinates `(x, y)`.
pub fn bilinear(field: &[f64], grid: usize, boundary: Boundary, x: f64, y: f64) -> f64 {
    let n = grid;
    let h = match boundary {
        Boundary::Periodic => 1.0 / n as f64,
        Boundary::Reflective => 1.0 / (n as f64 - 1.0),
    };
    let (gx, gy) = (x / h, y / h);
    let (mut x0, mut y0) = (gx.floor() as isize, gy.floor() as isize);
    let (mut fx, mut fy) = (gx - x0 as f64, gy - y0 as f64);
    let clamp = |k: &mut isize, f: &mut f64| {
        if *k >= n as isize - 1 {
            *k = n as isize - 2;
            *f = 1.0;
        }
    };
    let wrap = |k: isize| -> usize {
        match boundary {
            Boundary::Periodic => k.rem_euclid(n as isize) as usize,
            Boundary::Reflective => k.clamp(0, n as isize - 1) as usize,
        }
    };
    if boundary == Boundary::Reflective {
        clamp(&mut x0, &mut fx);
        clamp(&mut y0, &mut fy);
    }
    let v = |ix: isize, iy: isize| field[wrap(iy) * n + wrap(ix)];
    (1.0 - fx) * (1.0 - fy) * v(x0, y0)
        + fx * (1.0 - fy) * v(x0 + 1, y0)
        + (1.0 - fx) * fy * v(x0, y0 + 1)
        + fx * fy * v(x0 + 1, y0 + 1)
}

/// Bilinear samples of every `stride`-th frame at each point (one channel).
pub fn sample_nodes(movie: &Movie, points: &PointSet, stride: usize) -> Result<ObservationSeries> {
    if stride == 0 {
        return Err(Error::Param("stride must be positive".into()));
    }
    let coords: Vec<(f64, f64)> = points
        .iter()
        .map(|p| unit_square_coords(points.domain(), p))
        .collect::<Result<_>>()?;
    let kept: Vec<usize> = (0..movie.frames.len()).step_by(stride).collect();
    let mut values = Vec::with_capacity(kept.len() * coords.len());
    for &k in &kept {
        let f = &movie.frames[k];
        values.extend(
            coords
                .iter()
                .map(|&(x, y)| bilinear(f, movie.grid, movie.boundary, x, y)),
        );
    }
    let times = kept.iter().map(|&k| movie.time(k)).collect();
    ObservationSeries::new(points.clone(), times, 1, values)
}
