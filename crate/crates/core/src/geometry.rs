//! Sample locations, ε-ball neighborhoods and multipole level assignment.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

const UNIT_TOL: f64 = 1e-9;
const DUPLICATE_TOL: f64 = 1e-12;
const CSV_RENORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// 2-D coordinates, Euclidean distance.
    #[default]
    Plane,
    /// Unit 3-vectors, great-circle distance in radians.
    Sphere,
}

impl Domain {
    pub fn dim(self) -> usize {
        match self {
            Domain::Plane => 2,
            Domain::Sphere => 3,
        }
    }

    fn check(self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "{self} point needs {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("non-finite coordinate in {x:?}")));
        }
        if self == Domain::Sphere {
            let norm = norm3(x);
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Domain(format!("sphere point {x:?} has norm {norm}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Plane => "plane",
            Domain::Sphere => "sphere",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Domain::Plane),
            "sphere" => Ok(Domain::Sphere),
            other => Err(Error::Domain(format!("unknown domain `{other}`"))),
        }
    }
}

fn norm3(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn raw_distance(domain: Domain, x: &[f64], y: &[f64]) -> f64 {
    match domain {
        Domain::Plane => ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt(),
        Domain::Sphere => {
            // atan2(|x×y|, x·y) equals arccos(x·y) for unit vectors without
            // the loss of precision near 0 and π.
            let cx = x[1] * y[2] - x[2] * y[1];
            let cy = x[2] * y[0] - x[0] * y[2];
            let cz = x[0] * y[1] - x[1] * y[0];
            let cross = (cx * cx + cy * cy + cz * cz).sqrt();
            let dot = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
            cross.atan2(dot)
        }
    }
}

/// Planar Euclidean or spherical arc distance.
pub fn distance(domain: Domain, x: &[f64], y: &[f64]) -> Result<f64> {
    domain.check(x)?;
    domain.check(y)?;
    Ok(raw_distance(domain, x, y))
}

/// Fixed spatial sample locations.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    domain: Domain,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(domain: Domain, points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("a point set needs at least one point".into()));
        }
        let mut set = PointSet {
            domain,
            coords: Vec::with_capacity(points.len() * domain.dim()),
        };
        for p in points {
            set.push(p)?;
        }
        Ok(set)
    }

    fn push(&mut self, x: &[f64]) -> Result<()> {
        self.domain.check(x)?;
        if let Some(i) = self.find(x) {
            return Err(Error::Domain(format!("point {x:?} duplicates point {i}")));
        }
        self.coords.extend_from_slice(x);
        Ok(())
    }

    /// Index of an existing point within 1e-12 of `x`.
    pub fn find(&self, x: &[f64]) -> Option<usize> {
        (0..self.len()).find(|&i| raw_distance(self.domain, self.point(i), x) <= DUPLICATE_TOL)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim())
    }

    /// New set with `x` appended as the last point.
    pub fn with_point(&self, x: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.push(x)?;
        Ok(out)
    }

    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let pts: Vec<Vec<f64>> = ids.iter().map(|&i| self.point(i).to_vec()).collect();
        PointSet::new(self.domain, &pts)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        raw_distance(self.domain, self.point(i), self.point(j))
    }

    /// Indices of all points within `eps` of `x` (including a coincident point).
    pub fn ball(&self, x: &[f64], eps: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| raw_distance(self.domain, self.point(i), x) <= eps)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(match self.domain {
            Domain::Plane => "domain,x0,x1\n",
            Domain::Sphere => "domain,x0,x1,x2\n",
        });
        for p in self.iter() {
            s.push_str(&self.domain.to_string());
            for c in p {
                s.push(',');
                s.push_str(&format!("{c:?}"));
            }
            s.push('\n');
        }
        s
    }

    /// Parse the `domain,x0,x1[,x2]` CSV layout. Sphere rows within 1e-6 of
    /// unit norm are re-normalized, others rejected.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Data("empty point file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"domain") || cols.len() < 3 {
            return Err(Error::Data(format!("bad point header `{header}`")));
        }
        let mut domain = None;
        let mut points = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let d: Domain = fields[0].parse()?;
            if *domain.get_or_insert(d) != d {
                return Err(Error::Data(format!("row {}: mixed domains", lineno + 2)));
            }
            if fields.len() != d.dim() + 1 || cols.len() != d.dim() + 1 {
                return Err(Error::Data(format!(
                    "row {}: expected {} coordinates",
                    lineno + 2,
                    d.dim()
                )));
            }
            let mut p = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("row {}: {e}", lineno + 2)))?;
            if d == Domain::Sphere {
                let n = norm3(&p);
                if (n - 1.0).abs() > CSV_RENORM_TOL {
                    return Err(Error::Data(format!("row {}: sphere point has norm {n}", lineno + 2)));
                }
                p.iter_mut().for_each(|c| *c /= n);
            }
            points.push(p);
        }
        let domain = domain.ok_or_else(|| Error::Data("point file has no rows".into()))?;
        PointSet::new(domain, &points)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded, balanced split of `n` nodes into levels `1..=levels`; sizes differ by at most one.
pub fn partition_levels(n: usize, levels: usize, seed: u64) -> Result<Vec<usize>> {
    if levels == 0 || levels > n {
        return Err(Error::Param(format!("level count {levels} must lie in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (rank, &node) in order.iter().enumerate() {
        out[node] = rank % levels + 1;
    }
    Ok(out)
}

/// ε-ball adjacency with a multipole level for every node.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    eps: f64,
    adjacency: Vec<Vec<usize>>,
    levels: Vec<usize>,
    num_levels: usize,
}

impl NeighborGraph {
    /// All-pairs threshold test; every node on level 1.
    pub fn build(points: &PointSet, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Param(format!("eps must be positive, got {eps}")));
        }
        let n = points.len();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if points.distance(i, j) <= eps {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        Ok(NeighborGraph {
            eps,
            adjacency,
            levels: vec![1; n],
            num_levels: 1,
        })
    }

    pub fn build_with_levels(points: &PointSet, eps: f64, levels: Vec<usize>) -> Result<Self> {
        Self::build(points, eps)?.with_levels(levels)
    }

    /// Replace the level assignment. Every level in `1..=max` must be used.
    pub fn with_levels(mut self, levels: Vec<usize>) -> Result<Self> {
        if levels.len() != self.adjacency.len() {
            return Err(Error::shape("with_levels", &[self.adjacency.len()], &[levels.len()]));
        }
        let num_levels = levels.iter().copied().max().unwrap_or(1);
        let mut used = vec![false; num_levels + 1];
        for &l in &levels {
            if l == 0 {
                return Err(Error::Param("levels are numbered from 1".into()));
            }
            used[l] = true;
        }
        if used[1..].iter().any(|u| !u) {
            return Err(Error::Param("every level must hold at least one node".into()));
        }
        self.levels = levels;
        self.num_levels = num_levels;
        Ok(self)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn nodes_on_level(&self, level: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.levels[i] == level).collect()
    }

    /// Edges `(i, j)` with `i` on `from` and `j` on `to` (both directions when `from == to`).
    pub fn level_edges(&self, from: usize, to: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            if self.levels[i] != from {
                continue;
            }
            for &j in &self.adjacency[i] {
                if self.levels[j] == to {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Edges between adjacent levels `l` and `l + 1`.
    pub fn inter_level_edges(&self, level: usize) -> Vec<(usize, usize)> {
        self.level_edges(level, level + 1)
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn median_degree(&self) -> usize {
        let mut d = self.degrees();
        d.sort_unstable();
        d[d.len() / 2]
    }

    /// Extend by `x_new` (appended as the last node, on level 1). The
    /// receiver is left untouched.
    pub fn attach_node(&self, points: &PointSet, x_new: &[f64]) -> Result<(NeighborGraph, PointSet)> {
        if points.len() != self.len() {
            return Err(Error::shape("attach_node", &[self.len()], &[points.len()]));
        }
        let extended = points.with_point(x_new)?;
        let new = self.len();
        let mut graph = self.clone();
        let mut mine = Vec::new();
        for j in 0..new {
            if extended.distance(new, j) <= self.eps {
                mine.push(j);
                graph.adjacency[j].push(new);
            }
        }
        graph.adjacency.push(mine);
        graph.levels.push(1);
        Ok((graph, extended))
    }

    /// Remove the last node and every edge touching it.
    pub fn detach_last(&self) -> Result<NeighborGraph> {
        if self.len() <= 1 {
            return Err(Error::Contract("cannot detach the only node".into()));
        }
        let last = self.len() - 1;
        let mut graph = self.clone();
        graph.adjacency.pop();
        graph.levels.pop();
        for adj in &mut graph.adjacency {
            adj.retain(|&j| j != last);
        }
        let levels = std::mem::take(&mut graph.levels);
        graph.with_levels(levels)
    }
}

/// Radius giving a moderate neighborhood size: the 10th percentile of
/// pairwise distances, replaced by the median 9th-nearest-neighbor distance
/// when that percentile puts the median degree outside `6..=12`.
pub fn default_eps(points: &PointSet) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let mut all = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            all.push(points.distance(i, j));
        }
    }
    all.sort_by(f64::total_cmp);
    let p10 = all[(all.len() - 1) / 10].max(f64::MIN_POSITIVE);
    let median_degree = |eps: f64| {
        let mut deg: Vec<usize> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && points.distance(i, j) <= eps).count())
            .collect();
        deg.sort_unstable();
        deg[n / 2]
    };
    if n <= 7 || (6..=12).contains(&median_degree(p10)) {
        return p10;
    }
    let k = 9.min(n - 1);
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| points.distance(i, j)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    kth[n / 2]
}
