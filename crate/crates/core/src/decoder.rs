//! Branch/trunk decoder with neighborhood aggregation in the branch.
//!
//! For a query `q = (x, t)` the branch feature `(i, k)` is
//! `σ(1/|N(x)| Σ_{j ∈ N(x), t_j} ξ_ik(x - x_j, t - t_j) · v_enc(x_j, t_j) + θ_ik)`,
//! the trunk feature `k` is `σ(η_k [x, t] + ζ_k)`, and
//! `v_dec = Σ_{i,k} c_ik · branch_ik · trunk_k`.
//!
//! `ξ` shares its hidden layers across heads. Its output layer is linear, so
//! the neighborhood sum is taken over `hidden ⊗ v_enc` first and the head
//! applied once per query.

use crate::config::{BranchNorm, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::nn::Mlp;
use crate::tensor::{Activation, PairIndex, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Query locations and lead times. Times are in the encoder's relative units
/// (zero at the last history frame).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryBatch {
    pub locations: Vec<Vec<f64>>,
    /// `(location index, time)` pairs.
    pub targets: Vec<(usize, f64)>,
}

impl QueryBatch {
    /// Every location at every time, time-major.
    pub fn grid(locations: Vec<Vec<f64>>, times: &[f64]) -> Self {
        let n = locations.len();
        let targets = times.iter().flat_map(|&t| (0..n).map(move |i| (i, t))).collect();
        QueryBatch { locations, targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self, coord_dim: usize) -> Result<()> {
        if self
            .locations
            .iter()
            .any(|x| x.len() != coord_dim || x.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Contract(format!(
                "query locations must be finite {coord_dim}-vectors"
            )));
        }
        for &(loc, t) in &self.targets {
            if loc >= self.locations.len() || !t.is_finite() {
                return Err(Error::Contract(format!("bad query target ({loc}, {t})")));
            }
        }
        Ok(())
    }
}

/// Encoded state the decoder reads from.
#[derive(Clone, Copy, Debug)]
pub struct EncodedContext<'a> {
    pub points: &'a PointSet,
    pub eps: f64,
    /// Relative times of the history frames.
    pub history: &'a [f64],
    pub windows: usize,
    /// `windows · n_t · n_s × d`.
    pub v_enc: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkNet {
    pub mlp: Mlp,
}

impl TrunkNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        coord_dim: usize,
        hidden: usize,
        r: usize,
        act: Activation,
    ) -> Self {
        TrunkNet {
            mlp: Mlp::new(store, rng, name, &[coord_dim + 1, hidden, r], act, true),
        }
    }

    /// `input` is `Q × (m + 1)` rows of `[x, t]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        self.mlp.forward(tape, store, input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchAgg {
    /// Hidden layers of `ξ` on `[Δx / ε, Δt]`.
    pub xi: Mlp,
    /// `((H + 1)·d) × (s·r)`: the `ξ` output layer (last block row is its bias).
    pub head: ParamId,
    pub theta: ParamId,
    pub hidden: usize,
    pub d: usize,
    pub heads: usize,
}

impl BranchAgg {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        coord_dim: usize,
        hidden: usize,
        d: usize,
        heads: usize,
        act: Activation,
    ) -> Self {
        let xi = Mlp::new(
            store,
            rng,
            &format!("{name}.xi"),
            &[coord_dim + 1, hidden, hidden],
            act,
            true,
        );
        let head = store.add_weight(rng, format!("{name}.xi_head"), (hidden + 1) * d, heads);
        let theta = store.add_zeros(format!("{name}.theta"), vec![heads]);
        BranchAgg {
            xi,
            head,
            theta,
            hidden,
            d,
            heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGroup {
    pub branch: BranchAgg,
    pub trunk: TrunkNet,
    /// `(s·r) × d` contraction weights.
    pub c: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub groups: Vec<DecoderGroup>,
    pub s: usize,
    pub r: usize,
    pub d: usize,
    pub coord_dim: usize,
    pub act: Activation,
    pub norm: BranchNorm,
    /// Lead time covered by the groups together, in relative units.
    pub span: f64,
}

/// Index work for one group: unique `ξ` inputs and the pair list.
struct GroupPlan {
    phi_input: Vec<f64>,
    phi_rows: usize,
    pairs: PairIndex,
    trunk_input: Vec<f64>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, coord_dim: usize, cfg: &ModelConfig, span: f64) -> Self {
        let (d, s, r) = (cfg.d, cfg.branch_width, cfg.trunk_width());
        let groups = (0..cfg.decoder_groups)
            .map(|g| {
                let name = format!("dec.group{g}");
                let branch = BranchAgg::new(
                    store,
                    rng,
                    &format!("{name}.branch"),
                    coord_dim,
                    cfg.xi_hidden,
                    d,
                    s * r,
                    cfg.activation,
                );
                let trunk = TrunkNet::new(
                    store,
                    rng,
                    &format!("{name}.trunk"),
                    coord_dim,
                    cfg.trunk_hidden,
                    r,
                    cfg.activation,
                );
                let c = store.add_weight(rng, format!("{name}.c"), s * r, d);
                DecoderGroup { branch, trunk, c }
            })
            .collect();
        Decoder {
            groups,
            s,
            r,
            d,
            coord_dim,
            act: cfg.activation,
            norm: cfg.branch_norm,
            span,
        }
    }

    /// Group owning lead time `t`: the span is cut into equal consecutive parts.
    pub fn group_of(&self, t: f64) -> usize {
        let g = self.groups.len();
        let pos = (t / self.span * g as f64 - 1e-9).ceil() as isize - 1;
        pos.clamp(0, g as isize - 1) as usize
    }

    fn plan(
        &self,
        ctx: &EncodedContext<'_>,
        queries: &QueryBatch,
        members: &[usize],
        balls: &[Vec<usize>],
    ) -> GroupPlan {
        let m = self.coord_dim;
        let n_t = ctx.history.len();
        let n_s = ctx.points.len();
        let mut phi_index: HashMap<(usize, usize, u64), usize> = HashMap::new();
        let mut phi_input = Vec::new();
        let mut pairs = PairIndex {
            n_out: ctx.windows * members.len(),
            ..PairIndex::default()
        };
        let mut trunk_input = Vec::with_capacity(members.len() * (m + 1));
        for (qi, &q) in members.iter().enumerate() {
            let (loc, t) = queries.targets[q];
            let x = &queries.locations[loc];
            trunk_input.extend_from_slice(x);
            trunk_input.push(t);
            let ball = &balls[loc];
            if ball.is_empty() {
                continue;
            }
            let weight = match self.norm {
                BranchNorm::Spatial => 1.0 / ball.len() as f64,
                BranchNorm::Spatiotemporal => 1.0 / (ball.len() * n_t) as f64,
            };
            for &j in ball {
                let xj = ctx.points.point(j);
                for (tj, &time_j) in ctx.history.iter().enumerate() {
                    let dt = t - time_j;
                    let row = *phi_index.entry((loc, j, dt.to_bits())).or_insert_with(|| {
                        phi_input.extend(x.iter().zip(xj).map(|(a, b)| (a - b) / ctx.eps));
                        phi_input.push(dt);
                        phi_input.len() / (m + 1) - 1
                    });
                    for b in 0..ctx.windows {
                        pairs.phi_row.push(row);
                        pairs.v_row.push((b * n_t + tj) * n_s + j);
                        pairs.out_row.push(b * members.len() + qi);
                        pairs.weight.push(weight);
                    }
                }
            }
        }
        if phi_input.is_empty() {
            phi_input = vec![0.0; m + 1];
        }
        let phi_rows = phi_input.len() / (m + 1);
        GroupPlan {
            phi_input,
            phi_rows,
            pairs,
            trunk_input,
        }
    }

    /// `v_dec` for every window and query: `windows · Q × d`, window-major.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: EncodedContext<'_>,
        queries: &QueryBatch,
    ) -> Result<Var> {
        queries.validate(self.coord_dim)?;
        let n_t = ctx.history.len();
        let n_s = ctx.points.len();
        if n_t == 0 || queries.is_empty() {
            return Err(Error::Contract(
                "decoding needs a history and at least one query".into(),
            ));
        }
        if tape.shape(ctx.v_enc) != [ctx.windows * n_t * n_s, self.d] {
            return Err(Error::shape(
                "decode",
                &[ctx.windows * n_t * n_s, self.d],
                tape.shape(ctx.v_enc),
            ));
        }
        let balls: Vec<Vec<usize>> = queries.locations.iter().map(|x| ctx.points.ball(x, ctx.eps)).collect();
        let mut members = vec![Vec::new(); self.groups.len()];
        for (q, &(_, t)) in queries.targets.iter().enumerate() {
            members[self.group_of(t)].push(q);
        }
        let nq = queries.len();
        let mut total: Option<Var> = None;
        for (g, group) in self.groups.iter().enumerate() {
            if members[g].is_empty() {
                continue;
            }
            let plan = self.plan(&ctx, queries, &members[g], &balls);
            let out = self.group_forward(tape, store, group, &ctx, plan, members[g].len())?;
            let out = if self.groups.len() == 1 {
                out
            } else {
                let seg: Arc<[usize]> = (0..ctx.windows)
                    .flat_map(|b| members[g].iter().map(move |&q| b * nq + q))
                    .collect();
                let ones: Arc<[f64]> = vec![1.0; seg.len()].into();
                tape.segment_sum(out, seg, ones, ctx.windows * nq)?
            };
            total = Some(match total {
                None => out,
                Some(acc) => tape.add(acc, out)?,
            });
        }
        total.ok_or_else(|| Error::Contract("no decoder group received a query".into()))
    }

    fn group_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        group: &DecoderGroup,
        ctx: &EncodedContext<'_>,
        plan: GroupPlan,
        nq: usize,
    ) -> Result<Var> {
        let m = self.coord_dim;
        let sr = self.s * self.r;
        let br = &group.branch;

        let phi_in = tape.constant(vec![plan.phi_rows, m + 1], plan.phi_input)?;
        let phi = br.xi.forward(tape, store, phi_in)?;
        let ones = tape.constant(vec![plan.phi_rows, 1], vec![1.0; plan.phi_rows])?;
        let phi = tape.concat_cols(&[phi, ones])?;
        let moments = tape.pair_outer_sum(phi, ctx.v_enc, Arc::new(plan.pairs))?;
        let head = tape.param(store, br.head);
        let theta = tape.param(store, br.theta);
        let pre = tape.matmul(moments, head)?;
        let pre = tape.add(pre, theta)?;
        let branch = tape.activation(pre, self.act);

        let t_in = tape.constant(vec![nq, m + 1], plan.trunk_input)?;
        let trunk = group.trunk.forward(tape, store, t_in)?;
        let tile: Arc<[usize]> = (0..self.s).flat_map(|_| 0..self.r).collect();
        let trunk = tape.gather_cols(trunk, tile)?;

        let product = if ctx.windows == 1 {
            tape.mul(branch, trunk)?
        } else {
            let b3 = tape.reshape(branch, vec![ctx.windows, nq, sr])?;
            let p = tape.mul(b3, trunk)?;
            tape.reshape(p, vec![ctx.windows * nq, sr])?
        };
        let c = tape.param(store, group.c);
        tape.matmul(product, c)
    }
}
