//! Graph kernel encoder: lifting, time embedding, learned parametric
//! function, and multipole kernel message passing.
//!
//! Rows of every node-level matrix are laid out as
//! `(window · n_t + timestamp) · n_s + node`.

use crate::error::{Error, Result};
use crate::geometry::NeighborGraph;
use crate::nn::{Linear, Mlp};
use crate::tensor::{Activation, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use std::sync::Arc;

/// `e_t = [sin(ω₁·t), cos(ω₁·t), sin(ω₂·t), ...]` for a time-feature row `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedder {
    /// `features × d_t` frequency matrix.
    pub omega: ParamId,
    pub features: usize,
    pub d_t: usize,
}

impl TimeEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, features: usize, d_t: usize) -> Self {
        let omega = store.add_weight(rng, format!("{name}.omega"), features, d_t);
        TimeEmbedder { omega, features, d_t }
    }

    pub fn width(&self) -> usize {
        2 * self.d_t
    }

    /// `t` is `rows × features`; the result is `rows × 2·d_t`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, t: Var) -> Result<Var> {
        let w = tape.param(store, self.omega);
        let phase = tape.matmul(t, w)?;
        let s = tape.sin(phase);
        let c = tape.cos(phase);
        let both = tape.concat_cols(&[s, c])?;
        let order: Arc<[usize]> = (0..self.d_t).flat_map(|k| [k, self.d_t + k]).collect();
        tape.gather_cols(both, order)
    }
}

/// `a_t(x) = MLP([x, e_t])`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricFn {
    pub mlp: Mlp,
}

impl ParametricFn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        coord_dim: usize,
        embed_width: usize,
        d_a: usize,
        act: Activation,
    ) -> Self {
        let hidden = 2 * d_a;
        ParametricFn {
            mlp: Mlp::new(store, rng, name, &[coord_dim + embed_width, hidden, d_a], act, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, coords: Var, embedding: Var) -> Result<Var> {
        let x = tape.concat_cols(&[coords, embedding])?;
        self.mlp.forward(tape, store, x)
    }
}

/// One kernel message-passing step:
/// `v'(x) = σ(W v(x) + 1/|N(x)| Σ κ(a(x), a(x_j), x, x_j) v(x_j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayer {
    pub w: Linear,
    /// Maps `[a(x), a(x_j), x, x_j]` to a row-major `d × d` block.
    pub kappa: Mlp,
    pub d: usize,
}

impl KernelLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_a: usize,
        coord_dim: usize,
        act: Activation,
    ) -> Self {
        let w = Linear::new(store, rng, &format!("{name}.w"), d, d);
        let kappa = Mlp::new(
            store,
            rng,
            &format!("{name}.kappa"),
            &[2 * d_a + 2 * coord_dim, 4 * d, 4 * d, d * d],
            act,
            false,
        );
        KernelLayer { w, kappa, d }
    }
}

/// Directed edges `dst ← src` of one message-passing step, and the nodes it updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepEdges {
    pub targets: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl StepEdges {
    /// Every node updated from its full neighborhood.
    pub fn flat(graph: &NeighborGraph) -> Self {
        let targets = (0..graph.len()).collect();
        let edges = (0..graph.len())
            .flat_map(|i| graph.neighbors(i).iter().map(move |&j| (i, j)))
            .collect();
        StepEdges { targets, edges }
    }

    /// Nodes on level `to` updated from their neighbors on level `from`.
    pub fn between(graph: &NeighborGraph, from: usize, to: usize) -> Self {
        StepEdges {
            targets: graph.nodes_on_level(to),
            edges: graph.level_edges(to, from),
        }
    }
}

/// The steps of one V-cycle: intra-level for `l = 1..L`, upward `l → l+1`
/// for `l = 1..L-1`, then downward `l+1 → l` for `l = L-1..1`.
pub fn vcycle_steps(graph: &NeighborGraph) -> Vec<StepEdges> {
    let levels = graph.num_levels();
    let mut steps = Vec::with_capacity(3 * levels - 2);
    for l in 1..=levels {
        steps.push(StepEdges::between(graph, l, l));
    }
    for l in 1..levels {
        steps.push(StepEdges::between(graph, l, l + 1));
    }
    for l in (1..levels).rev() {
        steps.push(StepEdges::between(graph, l + 1, l));
    }
    steps
}

pub fn steps_per_vcycle(levels: usize) -> usize {
    3 * levels - 2
}

/// Fixed inputs shared by every kernel step of one encoding.
#[derive(Clone, Copy, Debug)]
pub struct NodeFrame<'a> {
    /// `n_s × m` coordinates, row-major.
    pub coords: &'a [f64],
    pub coord_dim: usize,
    pub n_s: usize,
    pub n_t: usize,
    /// Windows stacked along the row axis.
    pub windows: usize,
}

impl NodeFrame<'_> {
    fn rows(&self) -> usize {
        self.windows * self.n_t * self.n_s
    }
}

/// One kernel step on `v` (`rows × d`) given `a` (`n_t·n_s × d_a`, shared by
/// all windows). Only `step.targets` rows change; a target without incoming
/// edges receives `σ(W v)`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_update(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &KernelLayer,
    frame: NodeFrame<'_>,
    v: Var,
    a: Var,
    step: &StepEdges,
    act: Activation,
) -> Result<Var> {
    let d = layer.d;
    let (n_s, n_t, nw) = (frame.n_s, frame.n_t, frame.windows);
    if tape.shape(v) != [frame.rows(), d] {
        return Err(Error::shape("kernel_update", &[frame.rows(), d], tape.shape(v)));
    }
    if tape.shape(a).first() != Some(&(n_t * n_s)) {
        return Err(Error::shape("kernel_update", &[n_t * n_s], tape.shape(a)));
    }
    if step.targets.is_empty() {
        return Ok(v);
    }
    let mut slot = vec![usize::MAX; n_s];
    for (p, &i) in step.targets.iter().enumerate() {
        slot[i] = p;
    }
    let nt = step.targets.len();
    let target_rows: Arc<[usize]> = (0..nw * n_t)
        .flat_map(|bt| step.targets.iter().map(move |&i| bt * n_s + i))
        .collect();
    let current = tape.gather_rows(v, target_rows.clone())?;
    let mut pre = layer.w.forward(tape, store, current)?;

    let ne = step.edges.len();
    if ne > 0 {
        let mut count = vec![0usize; n_s];
        for &(i, _) in &step.edges {
            if slot[i] == usize::MAX {
                return Err(Error::Contract(format!(
                    "edge into node {i}, which this step does not update"
                )));
            }
            count[i] += 1;
        }

        // Kernel blocks depend on (timestamp, edge) only.
        let m = frame.coord_dim;
        let dst_a: Arc<[usize]> = (0..n_t)
            .flat_map(|t| step.edges.iter().map(move |&(i, _)| t * n_s + i))
            .collect();
        let src_a: Arc<[usize]> = (0..n_t)
            .flat_map(|t| step.edges.iter().map(move |&(_, j)| t * n_s + j))
            .collect();
        let mut xy = Vec::with_capacity(n_t * ne * 2 * m);
        for _ in 0..n_t {
            for &(i, j) in &step.edges {
                xy.extend_from_slice(&frame.coords[i * m..(i + 1) * m]);
                xy.extend_from_slice(&frame.coords[j * m..(j + 1) * m]);
            }
        }
        let a_dst = tape.gather_rows(a, dst_a)?;
        let a_src = tape.gather_rows(a, src_a)?;
        let xy = tape.constant(vec![n_t * ne, 2 * m], xy)?;
        let kin = tape.concat_cols(&[a_dst, a_src, xy])?;
        let mut kernel = layer.kappa.forward(tape, store, kin)?;
        if nw > 1 {
            let rep: Arc<[usize]> = (0..nw).flat_map(|_| 0..n_t * ne).collect();
            kernel = tape.gather_rows(kernel, rep)?;
        }

        let src_rows: Arc<[usize]> = (0..nw * n_t)
            .flat_map(|bt| step.edges.iter().map(move |&(_, j)| bt * n_s + j))
            .collect();
        let seg: Arc<[usize]> = (0..nw * n_t)
            .flat_map(|bt| {
                let slot = &slot;
                step.edges.iter().map(move |&(i, _)| bt * nt + slot[i])
            })
            .collect();
        let weight: Arc<[f64]> = (0..nw * n_t)
            .flat_map(|_| step.edges.iter().map(|&(i, _)| 1.0 / count[i] as f64))
            .collect();
        let vj = tape.gather_rows(v, src_rows)?;
        let msg = tape.row_matvec(kernel, vj)?;
        let agg = tape.segment_sum(msg, seg, weight, nw * n_t * nt)?;
        pre = tape.add(pre, agg)?;
    }
    let out = tape.activation(pre, act);
    if !tape.value(out).iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("kernel update produced a non-finite value".into()));
    }
    if nt == n_s && step.targets.iter().enumerate().all(|(p, &i)| p == i) {
        return Ok(out);
    }
    tape.replace_rows(v, target_rows, out)
}

/// One V-cycle: `layers[k]` drives `steps[k]`.
#[allow(clippy::too_many_arguments)]
pub fn multipole_vcycle(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[KernelLayer],
    frame: NodeFrame<'_>,
    v: Var,
    a: Var,
    steps: &[StepEdges],
    act: Activation,
) -> Result<Var> {
    if layers.len() != steps.len() {
        return Err(Error::Contract(format!(
            "{} kernel layers for {} V-cycle steps",
            layers.len(),
            steps.len()
        )));
    }
    let mut v = v;
    for (layer, step) in layers.iter().zip(steps) {
        v = kernel_update(tape, store, layer, frame, v, a, step, act)?;
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub lift: Linear,
    pub time: TimeEmbedder,
    pub param_fn: ParametricFn,
    /// `layer_number` V-cycles of `3L - 2` kernel layers each.
    pub cycles: Vec<Vec<KernelLayer>>,
    pub act: Activation,
    pub levels: usize,
}

/// Encoder input for a stack of windows over the same nodes and relative times.
#[derive(Clone, Copy, Debug)]
pub struct EncodeInput<'a> {
    pub frame: NodeFrame<'a>,
    /// `rows × c`, laid out like the node rows.
    pub u: Var,
    /// `n_t × features` time features.
    pub time_features: Var,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        coord_dim: usize,
        time_features: usize,
        cfg: &crate::config::ModelConfig,
        levels: usize,
    ) -> Self {
        let d = cfg.d;
        let lift = Linear::new(store, rng, "enc.lift", channels, d);
        let time = TimeEmbedder::new(store, rng, "enc.time", time_features, cfg.d_t);
        let param_fn = ParametricFn::new(store, rng, "enc.a", coord_dim, time.width(), cfg.d_a, cfg.activation);
        let cycles = (0..cfg.layer_number)
            .map(|c| {
                (0..steps_per_vcycle(levels))
                    .map(|s| {
                        KernelLayer::new(
                            store,
                            rng,
                            &format!("enc.cycle{c}.step{s}"),
                            d,
                            cfg.d_a,
                            coord_dim,
                            cfg.activation,
                        )
                    })
                    .collect()
            })
            .collect();
        Encoder {
            lift,
            time,
            param_fn,
            cycles,
            act: cfg.activation,
            levels,
        }
    }

    /// `a_t(x)` for every (timestamp, node), `n_t·n_s × d_a`.
    pub fn parametric_values(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: NodeFrame<'_>,
        time_features: Var,
    ) -> Result<Var> {
        let (n_t, n_s, m) = (frame.n_t, frame.n_s, frame.coord_dim);
        if tape.shape(time_features) != [n_t, self.time.features] {
            return Err(Error::shape(
                "encode time features",
                &[n_t, self.time.features],
                tape.shape(time_features),
            ));
        }
        let emb = self.time.forward(tape, store, time_features)?;
        let per_row: Arc<[usize]> = (0..n_t).flat_map(|t| std::iter::repeat_n(t, n_s)).collect();
        let emb = tape.gather_rows(emb, per_row)?;
        let mut xs = Vec::with_capacity(n_t * n_s * m);
        for _ in 0..n_t {
            xs.extend_from_slice(frame.coords);
        }
        let xs = tape.constant(vec![n_t * n_s, m], xs)?;
        self.param_fn.forward(tape, store, xs, emb)
    }

    /// `v_enc`, `rows × d`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &NeighborGraph,
        input: EncodeInput<'_>,
    ) -> Result<Var> {
        let frame = input.frame;
        if graph.len() != frame.n_s || frame.coords.len() != frame.n_s * frame.coord_dim {
            return Err(Error::Contract(format!(
                "graph has {} nodes but the input has {}",
                graph.len(),
                frame.n_s
            )));
        }
        if graph.num_levels() != self.levels {
            return Err(Error::Contract(format!(
                "graph has {} levels but the encoder was built for {}",
                graph.num_levels(),
                self.levels
            )));
        }
        if tape.shape(input.u) != [frame.rows(), self.lift.fan_in] {
            return Err(Error::shape(
                "encode",
                &[frame.rows(), self.lift.fan_in],
                tape.shape(input.u),
            ));
        }
        let a = self.parametric_values(tape, store, frame, input.time_features)?;
        let steps = vcycle_steps(graph);
        let mut v = self.lift.forward(tape, store, input.u)?;
        for cycle in &self.cycles {
            v = multipole_vcycle(tape, store, cycle, frame, v, a, &steps, self.act)?;
        }
        Ok(v)
    }
}
