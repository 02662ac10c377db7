use opcast::config::{BranchNorm, ModelConfig};
use opcast::data::ObservationSeries;
use opcast::decoder::{Decoder, EncodedContext, QueryBatch, TrunkNet};
use opcast::geometry::{Domain, NeighborGraph, PointSet};
use opcast::model::{Model, ModelShape, Scaling, WindowInput};
use opcast::nn::{Linear, Mlp};
use opcast::tensor::{Activation, ParamId, ParamStore, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp_naive(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (i, l) in mlp.layers.iter().enumerate() {
        let w = store.get(l.weight).data();
        let b = store.get(l.bias).data();
        h = (0..l.fan_out)
            .map(|o| b[o] + (0..l.fan_in).map(|k| h[k] * w[k * l.fan_out + o]).sum::<f64>())
            .collect();
        if i < last || mlp.act_output {
            h.iter_mut().for_each(|v| *v = mlp.act.apply(*v));
        }
    }
    h
}

/// Random encoder states for `windows · n_t · n_s` rows.
struct Fixture {
    points: PointSet,
    history: Vec<f64>,
    windows: usize,
    v: Vec<f64>,
    eps: f64,
}

impl Fixture {
    fn new(rng: &mut ChaCha8Rng, n_s: usize, n_t: usize, windows: usize, d: usize) -> Self {
        let pts: Vec<Vec<f64>> = (0..n_s).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let history = (0..n_t).map(|k| (k as f64 + 1.0 - n_t as f64) / n_t as f64).collect();
        let v = (0..windows * n_t * n_s * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Fixture {
            points: PointSet::new(Domain::Plane, &pts).unwrap(),
            history,
            windows,
            v,
            eps: 0.35,
        }
    }

    fn decode(&self, store: &ParamStore, dec: &Decoder, queries: &QueryBatch) -> Vec<f64> {
        let mut tape = Tape::new();
        let rows = self.v.len() / dec.d;
        let v_enc = tape.constant(vec![rows, dec.d], self.v.clone()).unwrap();
        let ctx = EncodedContext {
            points: &self.points,
            eps: self.eps,
            history: &self.history,
            windows: self.windows,
            v_enc,
        };
        let out = dec.forward(&mut tape, store, ctx, queries).unwrap();
        tape.value(out).to_vec()
    }

    /// Term-by-term evaluation of the decoder output for one window and query.
    fn naive(&self, store: &ParamStore, dec: &Decoder, b: usize, x: &[f64], t: f64) -> Vec<f64> {
        self.naive_repeated(store, dec, b, x, t, 1)
    }

    /// As `naive`, with every neighbor listed `copies` times.
    fn naive_repeated(
        &self,
        store: &ParamStore,
        dec: &Decoder,
        b: usize,
        x: &[f64],
        t: f64,
        copies: usize,
    ) -> Vec<f64> {
        let group = &dec.groups[dec.group_of(t)];
        let br = &group.branch;
        let (d, sr, n_t, n_s) = (dec.d, dec.s * dec.r, self.history.len(), self.points.len());
        let ball: Vec<usize> = (0..n_s)
            .filter(|&j| {
                let p = self.points.point(j);
                ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)).sqrt() <= self.eps
            })
            .flat_map(|j| std::iter::repeat_n(j, copies))
            .collect();
        let head = store.get(br.head).data();
        let theta = store.get(br.theta).data();
        let mut pre = theta.to_vec();
        let norm = match dec.norm {
            BranchNorm::Spatial => ball.len() as f64,
            BranchNorm::Spatiotemporal => (ball.len() * n_t) as f64,
        };
        for &j in &ball {
            let p = self.points.point(j);
            for (tj, &time_j) in self.history.iter().enumerate() {
                let mut feat = mlp_naive(
                    store,
                    &br.xi,
                    &[(x[0] - p[0]) / self.eps, (x[1] - p[1]) / self.eps, t - time_j],
                );
                feat.push(1.0);
                let v = &self.v[((b * n_t + tj) * n_s + j) * d..][..d];
                for (k, out) in pre.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (h, f) in feat.iter().enumerate() {
                        for (c, vc) in v.iter().enumerate() {
                            s += f * vc * head[(h * d + c) * sr + k];
                        }
                    }
                    *out += s / norm;
                }
            }
        }
        let trunk = mlp_naive(store, &group.trunk.mlp, &[x[0], x[1], t]);
        let cw = store.get(group.c).data();
        (0..d)
            .map(|o| {
                (0..sr)
                    .map(|k| dec.act.apply(pre[k]) * trunk[k % dec.r] * cw[k * d + o])
                    .sum()
            })
            .collect()
    }
}

fn set(store: &mut ParamStore, id: ParamId, values: &[f64]) {
    store.get_mut(id).data_mut().copy_from_slice(values);
}

fn fill(store: &mut ParamStore, id: ParamId, value: f64) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
}

fn cfg(d: usize, groups: usize, act: Activation, norm: BranchNorm) -> ModelConfig {
    ModelConfig {
        d,
        branch_width: 3,
        trunk_width: Some(2),
        decoder_groups: groups,
        activation: act,
        branch_norm: norm,
        xi_hidden: 5,
        trunk_hidden: 6,
        ..ModelConfig::default()
    }
}

fn random_queries(rng: &mut ChaCha8Rng, n_loc: usize, n_q: usize) -> QueryBatch {
    QueryBatch {
        locations: (0..n_loc).map(|_| vec![rng.gen(), rng.gen()]).collect(),
        targets: (0..n_q)
            .map(|_| (rng.gen_range(0..n_loc), rng.gen_range(0.01..1.0)))
            .collect(),
    }
}

#[test]
fn decode_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (groups, norm) in [
        (1, BranchNorm::Spatial),
        (2, BranchNorm::Spatiotemporal),
        (3, BranchNorm::Spatial),
    ] {
        let cfg = cfg(3, groups, Activation::Tanh, norm);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut rng, 2, &cfg, 1.0);
        // Nonzero θ so that the bias path is exercised.
        for g in &dec.groups {
            let n = store.get(g.branch.theta).numel();
            let th: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            set(&mut store, g.branch.theta, &th);
        }
        let fx = Fixture::new(&mut rng, 14, 4, 2, 3);
        let queries = random_queries(&mut rng, 5, 12);
        let got = fx.decode(&store, &dec, &queries);
        assert_eq!(got.len(), 2 * 12 * 3);
        for b in 0..2 {
            for (q, &(loc, t)) in queries.targets.iter().enumerate() {
                let want = fx.naive(&store, &dec, b, &queries.locations[loc], t);
                for (o, w) in want.iter().enumerate() {
                    let g = got[(b * 12 + q) * 3 + o];
                    assert!((g - w).abs() < 1e-12, "groups {groups}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn group_boundaries_split_the_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        2,
        &cfg(2, 3, Activation::Relu, BranchNorm::Spatial),
        1.5,
    );
    assert_eq!(dec.group_of(0.1), 0);
    assert_eq!(dec.group_of(0.5), 0);
    assert_eq!(dec.group_of(0.6), 1);
    assert_eq!(dec.group_of(1.0), 1);
    assert_eq!(dec.group_of(1.5), 2);
    assert_eq!(dec.group_of(9.0), 2);
}

#[test]
fn zero_kernel_or_zero_contraction_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        2,
        &cfg(3, 1, Activation::Relu, BranchNorm::Spatial),
        1.0,
    );
    let fx = Fixture::new(&mut rng, 10, 3, 1, 3);
    let queries = random_queries(&mut rng, 4, 6);
    let g = &dec.groups[0];

    let head = g.branch.head;
    let saved = store.get(head).data().to_vec();
    fill(&mut store, head, 0.0);
    assert!(fx.decode(&store, &dec, &queries).iter().all(|v| *v == 0.0));

    set(&mut store, head, &saved);
    fill(&mut store, g.c, 0.0);
    assert!(fx.decode(&store, &dec, &queries).iter().all(|v| *v == 0.0));
}

/// Branch ≡ `θ`, trunk ≡ 1: only the constant paths remain.
fn constant_paths(store: &mut ParamStore, dec: &Decoder) {
    let g = &dec.groups[0];
    fill(store, g.branch.head, 0.0);
    let last = g.trunk.mlp.layers.last().unwrap();
    fill(store, last.weight, 0.0);
    fill(store, last.bias, 1.0);
}

#[test]
fn one_hot_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        2,
        &cfg(4, 1, Activation::Identity, BranchNorm::Spatial),
        1.0,
    );
    constant_paths(&mut store, &dec);
    let g = &dec.groups[0];
    fill(&mut store, g.branch.theta, 1.0);
    let (sr, d) = (dec.s * dec.r, dec.d);
    let fx = Fixture::new(&mut rng, 8, 2, 1, 4);
    let queries = random_queries(&mut rng, 3, 3);
    for k in 0..sr {
        for o in 0..d {
            let mut c = vec![0.0; sr * d];
            c[k * d + o] = 1.0;
            set(&mut store, g.c, &c);
            for row in fx.decode(&store, &dec, &queries).chunks(d) {
                let want: Vec<f64> = (0..d).map(|i| if i == o { 1.0 } else { 0.0 }).collect();
                assert_eq!(row, want.as_slice());
            }
        }
    }
}

#[test]
fn single_neighbor_branch_replicates_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = 3;
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        2,
        &cfg(d, 1, Activation::Identity, BranchNorm::Spatial),
        1.0,
    );
    constant_paths(&mut store, &dec);
    let g = &dec.groups[0];
    let (sr, h) = (dec.s * dec.r, g.branch.hidden);
    // Only the constant block of the head is nonzero: feature k reads component k mod d.
    let mut head = vec![0.0; (h + 1) * d * sr];
    for k in 0..sr {
        head[(h * d + k % d) * sr + k] = 1.0;
    }
    set(&mut store, g.branch.head, &head);

    let fx = Fixture {
        points: PointSet::new(Domain::Plane, &[vec![0.3, 0.3], vec![0.9, 0.9]]).unwrap(),
        history: vec![0.0],
        windows: 1,
        v: vec![0.5, -1.5, 2.0, 9.0, 9.0, 9.0],
        eps: 0.2,
    };
    let queries = QueryBatch::grid(vec![vec![0.35, 0.3]], &[0.25]);
    for k in 0..sr {
        let mut c = vec![0.0; sr * d];
        c[k * d] = 1.0;
        set(&mut store, g.c, &c);
        let out = fx.decode(&store, &dec, &queries);
        assert_eq!(out[0], fx.v[k % d]);
    }
}

#[test]
fn duplicated_neighbors_leave_the_mean_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        2,
        &cfg(2, 1, Activation::Tanh, BranchNorm::Spatial),
        1.0,
    );
    let fx = Fixture::new(&mut rng, 7, 3, 1, 2);
    let queries = random_queries(&mut rng, 4, 8);
    let got = fx.decode(&store, &dec, &queries);
    for (q, &(loc, t)) in queries.targets.iter().enumerate() {
        let x = &queries.locations[loc];
        let doubled = fx.naive_repeated(&store, &dec, 0, x, t, 2);
        for (o, w) in doubled.iter().enumerate() {
            assert!((got[q * 2 + o] - w).abs() < 1e-12);
        }
    }
}

#[test]
fn trunk_examples_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let trunk = TrunkNet::new(&mut store, &mut rng, "trunk", 2, 5, 3, Activation::Tanh);
    let input = vec![0.2, 0.7, 0.4, 0.9, 0.1, 1.3];
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], input.clone()).unwrap();
        let y = trunk.forward(&mut tape, store, x).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(eval(&store), eval(&store));

    let eta = trunk.mlp.layers[0].weight;
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 3], input.clone()).unwrap();
    let y = trunk.forward(&mut tape, &store, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap().accumulate_into(&mut store);
    let analytic = store.get(eta).grad().unwrap().to_vec();
    let h = 1e-6;
    let mut err = 0.0;
    let mut norm = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = store.get(eta).data()[i];
        store.get_mut(eta).data_mut()[i] = orig + h;
        let plus: f64 = eval(&store).iter().sum();
        store.get_mut(eta).data_mut()[i] = orig - h;
        let minus: f64 = eval(&store).iter().sum();
        store.get_mut(eta).data_mut()[i] = orig;
        let n = (plus - minus) / (2.0 * h);
        err += (a - n).powi(2);
        norm += n * n;
    }
    assert!((err / norm).sqrt() < 1e-4);

    let relu = TrunkNet::new(&mut store, &mut rng, "zero", 2, 5, 3, Activation::Relu);
    for l in &relu.mlp.layers {
        fill(&mut store, l.weight, 0.0);
        fill(&mut store, l.bias, 0.0);
    }
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 3], input).unwrap();
    let y = relu.forward(&mut tape, &store, x).unwrap();
    assert!(tape.value(y).iter().all(|v| *v == 0.0));
}

#[test]
fn decoding_is_continuous_in_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        &mut rng,
        2,
        &cfg(3, 1, Activation::Tanh, BranchNorm::Spatial),
        1.0,
    );
    let fx = Fixture::new(&mut rng, 12, 3, 1, 3);
    let x = vec![0.5, 0.5];
    let t = 0.4;
    let base = fx.decode(&store, &dec, &QueryBatch::grid(vec![x.clone()], &[t]));
    let mut slopes = Vec::new();
    for delta in [1e-3, 1e-4, 1e-5] {
        let moved = fx.decode(&store, &dec, &QueryBatch::grid(vec![x.clone()], &[t + delta]));
        let gap = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        slopes.push(gap / delta);
    }
    assert!(slopes.iter().all(|s| s.is_finite() && *s < 1e3));
    assert!((slopes[2] - slopes[1]).abs() <= 0.1 * slopes[1].max(1e-9) + 1e-6);
}

#[test]
fn projection_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut store = ParamStore::new();
    let proj = Linear::new(&mut store, &mut rng, "proj", 2, 1);
    set(&mut store, proj.weight, &[1.0, 1.0]);
    let mut tape = Tape::new();
    let v = tape.constant(vec![1, 2], vec![2.0, 3.0]).unwrap();
    let u = proj.forward(&mut tape, &store, v).unwrap();
    assert_eq!(tape.value(u), &[5.0]);

    fill(&mut store, proj.weight, 0.0);
    let mut tape = Tape::new();
    let v = tape.constant(vec![1, 2], vec![2.0, 3.0]).unwrap();
    let u = proj.forward(&mut tape, &store, v).unwrap();
    assert_eq!(tape.value(u), &[0.0]);

    // Lifting c=2 → d=3 with a full-column-rank map, then projecting with its left inverse.
    let lift = Linear::new(&mut store, &mut rng, "lift", 2, 3);
    set(&mut store, lift.weight, &[1.0, 2.0, 0.0, 0.0, 1.0, 3.0]);
    fill(&mut store, lift.bias, 0.0);
    // Left inverse of P = [[1,2,0],[0,1,3]]ᵀ-wise: P · L = I for L (3 × 2).
    let back = Linear::new(&mut store, &mut rng, "back", 3, 2);
    set(&mut store, back.weight, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0 / 3.0]);
    fill(&mut store, back.bias, 0.0);
    let u = vec![0.7, -2.5, 3.25, 1e3];
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 2], u.clone()).unwrap();
    let v = lift.forward(&mut tape, &store, x).unwrap();
    let r = back.forward(&mut tape, &store, v).unwrap();
    for (a, b) in tape.value(r).iter().zip(&u) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn small_model(n_s_seed: u64) -> (Model, PointSet, NeighborGraph, ObservationSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(n_s_seed);
    let cfg = ModelConfig {
        d: 3,
        d_t: 2,
        d_a: 3,
        branch_width: 4,
        history: 3,
        ..ModelConfig::default()
    };
    let shape = ModelShape {
        channels: 1,
        coord_dim: 2,
        levels: 2,
        horizon: 3,
    };
    let scaling = Scaling {
        mean: vec![0.5],
        std: vec![2.0],
        time_scale: 0.3,
    };
    let model = Model::new(&cfg, shape, scaling, 5).unwrap();
    let pts: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.gen(), rng.gen()]).collect();
    let points = PointSet::new(Domain::Plane, &pts).unwrap();
    let graph = NeighborGraph::build_with_levels(&points, 0.4, (0..10).map(|i| i % 2 + 1).collect()).unwrap();
    let values = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let history = ObservationSeries::new(points.clone(), vec![0.0, 0.1, 0.2], 1, values).unwrap();
    (model, points, graph, history)
}

#[test]
fn forecast_is_the_decode_project_composition() {
    let (model, points, graph, history) = small_model(19);
    let times = [0.3, 0.4, 0.5];
    let fc = model.forecast(&history, &graph, &times, &points).unwrap();
    assert_eq!((fc.n_t(), fc.n_s()), (3, 10));

    let rel_h = model.relative(history.times(), 0.2);
    let rel_o = model.relative(&times, 0.2);
    let queries = QueryBatch::grid(points.iter().map(<[f64]>::to_vec).collect(), &rel_o);
    let u = model.scaling.normalize(history.values());
    let mut tape = Tape::new();
    let out = model
        .forward(
            &mut tape,
            &points,
            &graph,
            WindowInput {
                u: &u,
                windows: 1,
                history: &rel_h,
                queries: &queries,
            },
        )
        .unwrap();
    assert_eq!(fc.values(), model.scaling.denormalize(tape.value(out.pred)).as_slice());

    // The same (x, t) twice in one batch.
    let twice = QueryBatch {
        locations: vec![vec![0.5, 0.5]],
        targets: vec![(0, 0.5), (0, 0.25), (0, 0.5)],
    };
    let mut tape = Tape::new();
    let out = model
        .forward(
            &mut tape,
            &points,
            &graph,
            WindowInput {
                u: &u,
                windows: 1,
                history: &rel_h,
                queries: &twice,
            },
        )
        .unwrap();
    let pred = tape.value(out.pred);
    assert_eq!(pred[0], pred[2]);

    assert!(model.forecast(&history, &graph, &[0.2], &points).is_err());
    assert!(model
        .forecast(&history.slice_time(0..0).unwrap(), &graph, &[0.3], &points)
        .is_err());
}

#[test]
fn zero_contraction_predicts_the_projection_bias() {
    let (mut model, points, graph, history) = small_model(20);
    for g in &model.decoder.groups {
        fill(&mut model.store, g.c, 0.0);
    }
    set(&mut model.store, model.project.bias, &[0.25]);
    let fc = model.forecast(&history, &graph, &[0.3, 0.45], &points).unwrap();
    let want = 0.25 * 2.0 + 0.5;
    assert!(fc.values().iter().all(|v| (v - want).abs() < 1e-15));
}

#[test]
fn decoder_parameters_do_not_depend_on_node_count() {
    let cfg = ModelConfig::default();
    let shape = ModelShape {
        channels: 1,
        coord_dim: 2,
        levels: 2,
        horizon: 12,
    };
    let bytes: Vec<Vec<u8>> = [16usize, 64]
        .iter()
        .map(|&n_s| {
            let model = Model::new(&cfg, shape.clone(), Scaling::identity(1, 1.0), 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(n_s as u64);
            let pts: Vec<Vec<f64>> = (0..n_s).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let points = PointSet::new(Domain::Plane, &pts).unwrap();
            let graph = NeighborGraph::build_with_levels(&points, 0.3, (0..n_s).map(|i| i % 2 + 1).collect()).unwrap();
            let values = vec![0.1; 12 * n_s];
            let times: Vec<f64> = (0..12).map(f64::from).collect();
            let history = ObservationSeries::new(points.clone(), times, 1, values).unwrap();
            model.forecast(&history, &graph, &[12.0], &points).unwrap();
            model.decoder_bytes()
        })
        .collect();
    assert!(!bytes[0].is_empty());
    assert_eq!(bytes[0], bytes[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_queries_permutes_outputs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut rng, 2, &cfg(2, 2, Activation::Relu, BranchNorm::Spatial), 1.0);
        let fx = Fixture::new(&mut rng, 9, 2, 2, 2);
        let queries = random_queries(&mut rng, 4, 7);
        let mut order: Vec<usize> = (0..7).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let permuted = QueryBatch {
            locations: queries.locations.clone(),
            targets: order.iter().map(|&q| queries.targets[q]).collect(),
        };
        let a = fx.decode(&store, &dec, &queries);
        let b = fx.decode(&store, &dec, &permuted);
        for w in 0..2 {
            for (k, &q) in order.iter().enumerate() {
                for o in 0..2 {
                    prop_assert!((b[(w * 7 + k) * 2 + o] - a[(w * 7 + q) * 2 + o]).abs() < 1e-12);
                }
            }
        }
    }
}
