use opcast::tensor::{Activation, Adam, AdamState, PairIndex, ParamStore, Tape, Tensor, Var};
use opcast::{Error, Result};
use proptest::prelude::*;
use std::sync::Arc;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn eval(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out)[0]
}

/// Central-difference gradient of `f` w.r.t. every input element.
fn finite_diff(inputs: &[Tensor], f: &Build, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::new();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((eval(&plus, f) - eval(&minus, f)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

fn analytic(inputs: &[Tensor], f: &Build) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(&t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect()
}

fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let flat = |x: &[Vec<f64>]| x.iter().flatten().copied().collect::<Vec<_>>();
    let (a, b) = (flat(a), flat(b));
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn grad_check(inputs: &[Tensor], f: &Build) -> f64 {
    rel_err(&analytic(inputs, f), &finite_diff(inputs, f, 1e-6))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.input(&t(&[2, 1], &[5.0, 7.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[5.0, 0.0]);
    assert_eq!(tape.shape(c), &[2, 1]);
}

#[test]
fn matmul_backward_of_sum() {
    let inputs = [t(&[1, 2], &[1.0, 2.0]), t(&[2, 1], &[3.0, 4.0])];
    let f: &Build = &|tp, v| {
        let c = tp.matmul(v[0], v[1])?;
        Ok(tp.sum(c))
    };
    let g = analytic(&inputs, f);
    assert_eq!(g[0], vec![3.0, 4.0]);
    assert_eq!(g[1], vec![1.0, 2.0]);
    let fd = finite_diff(&inputs, f, 1e-6);
    assert!(rel_err(&g, &fd) < 1e-8);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.input(&Tensor::zeros(vec![2, 3]));
    let b = tape.input(&Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.input(&t(&[2], &[1.0, 2.0]));
    let z = tape.input(&t(&[2], &[0.0, 0.0]));
    let s = tape.add(a, z).unwrap();
    assert_eq!(tape.value(s), &[1.0, 2.0]);
    let x = tape.input(&t(&[2], &[2.0, 3.0]));
    let y = tape.input(&t(&[2], &[4.0, 5.0]));
    let p = tape.mul(x, y).unwrap();
    assert_eq!(tape.value(p), &[8.0, 15.0]);

    let f: &Build = &|tp, v| {
        let sq = tp.mul(v[0], v[0])?;
        Ok(tp.sum(sq))
    };
    let g = analytic(&[t(&[1], &[3.0])], f);
    assert_eq!(g[0], vec![6.0]);
}

#[test]
fn broadcasting_is_leading_axis_only() {
    let mut tape = Tape::new();
    let m = tape.input(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let bias = tape.input(&t(&[3], &[10.0, 20.0, 30.0]));
    let s = tape.add(m, bias).unwrap();
    assert_eq!(tape.value(s), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let col = tape.input(&t(&[2], &[1.0, 1.0]));
    assert!(matches!(tape.add(m, col), Err(Error::Shape { .. })));
    let other = tape.input(&t(&[3, 2], &[0.0; 6]));
    assert!(tape.mul(m, other).is_err());
}

#[test]
fn relu_examples() {
    assert_eq!(Activation::Relu.apply(0.0), 0.0);
    let mut tape = Tape::new();
    let x = tape.input(&t(&[2], &[-1.0, 2.0]));
    let y = tape.activation(x, Activation::Relu);
    assert_eq!(tape.value(y), &[0.0, 2.0]);
    for act in [Activation::Relu, Activation::Tanh, Activation::Gelu] {
        let f: &Build = &move |tp, v| {
            let y = tp.activation(v[0], act);
            Ok(tp.sum(y))
        };
        let inputs = [t(&[1], &[0.5])];
        let err = (analytic(&inputs, f)[0][0] - finite_diff(&inputs, f, 1e-6)[0][0]).abs();
        assert!(err < 1e-6, "{act}: {err}");
    }
}

#[test]
fn constant_loss_leaves_parameters_without_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[1.0, 2.0]));
    let mut tape = Tape::new();
    let c = tape.constant(vec![], vec![4.0]).unwrap();
    let grads = tape.backward(c).unwrap();
    grads.accumulate_into(&mut store);
    assert!(store.get(w).grad().is_none());
}

#[test]
fn sum_of_linear_map_gradient() {
    // loss = sum(W·x): dW[i][j] = x[j] for every row i.
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[3, 2], &[0.3, -0.1, 0.7, 1.2, -0.4, 0.9]));
    let x = t(&[2, 1], &[1.5, -2.0]);
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let xv = tape.input(&x);
    let y = tape.matmul(wv, xv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap().accumulate_into(&mut store);
    let analytic = store.get(w).grad().unwrap().to_vec();
    assert_eq!(analytic, vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);

    let f: &Build = &|tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        Ok(tp.sum(y))
    };
    let fd = finite_diff(&[store.get(w).clone(), x], f, 1e-6);
    assert!(rel_err(&[analytic], &fd[..1]) < 1e-5);
}

#[test]
fn second_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.input(&t(&[1], &[2.0]).with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.input(&t(&[2], &[2.0, 1.0]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_additively() {
    let inputs = [t(&[2, 2], &[0.1, -0.4, 0.8, 1.1]), t(&[2, 1], &[0.7, -1.3])];
    let f: &Build = &|tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        let y = tp.activation(y, Activation::Tanh);
        Ok(tp.sum(y))
    };
    let g: &Build = &|tp, v| {
        let y = tp.mul(v[0], v[0])?;
        Ok(tp.sum(y))
    };
    let both: &Build = &|tp, v| {
        let a = f(tp, v)?;
        let b = g(tp, v)?;
        tp.add(a, b)
    };
    let gf = analytic(&inputs, f);
    let gg = analytic(&inputs, g);
    let gb = analytic(&inputs, both);
    for i in 0..2 {
        for j in 0..gb[i].len() {
            assert!((gb[i][j] - gf[i][j] - gg[i][j]).abs() < 1e-14);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let inputs = [
        t(&[2, 3], &[0.2, 0.4, -1.0, 1.5, 0.3, -0.7]),
        t(&[3, 2], &[1.0, -1.0, 0.5, 0.25, 2.0, 0.0]),
    ];
    let f: &Build = &|tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        let y = tp.activation(y, Activation::Gelu);
        Ok(tp.sum(y))
    };
    assert_eq!(eval(&inputs, f).to_bits(), eval(&inputs, f).to_bits());
}

#[test]
fn adam_minimizes_quadratic_through_tape() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[1], &[0.0]));
    let mut state = AdamState::new(&store, 0.1);
    for _ in 0..100 {
        store.zero_grad();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let three = tape.constant(vec![1], vec![3.0]).unwrap();
        let d = tape.sub(wv, three).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap().accumulate_into(&mut store);
        Adam::step(&mut store, &mut state).unwrap();
    }
    assert!((store.get(w).data()[0] - 3.0).abs() < 0.1);
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Keep inputs away from the kinks of relu/abs where central differences are meaningless.
fn off_kink(v: Vec<f64>) -> Vec<f64> {
    v.into_iter()
        .map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        a in vals(6), b in vals(6), c in vals(3), k in vals(8), idx in prop::collection::vec(0usize..3, 4)
    ) {
        let a = off_kink(a);
        let ta = t(&[2, 3], &a);
        let tb = t(&[3, 2], &b);
        let tb23 = t(&[2, 3], &b);
        let tc = t(&[3], &c);
        let idx: Arc<[usize]> = idx.into();
        let tol = 1e-4;

        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("matmul", vec![ta.clone(), tb.clone()], Box::new(|tp, v| { let y = tp.matmul(v[0], v[1])?; let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("add_bcast", vec![ta.clone(), tc.clone()], Box::new(|tp, v| { let y = tp.add(v[0], v[1])?; let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("sub_bcast_lhs", vec![tc.clone(), ta.clone()], Box::new(|tp, v| { let y = tp.sub(v[0], v[1])?; let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("mul_bcast", vec![ta.clone(), tc.clone()], Box::new(|tp, v| { let y = tp.mul(v[0], v[1])?; let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("mul", vec![ta.clone(), tb23.clone()], Box::new(|tp, v| { let y = tp.mul(v[0], v[1])?; Ok(tp.sum(y)) })),
            ("scale", vec![ta.clone()], Box::new(|tp, v| { let y = tp.scale(v[0], -1.7); let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("relu", vec![ta.clone()], Box::new(|tp, v| { let y = tp.activation(v[0], Activation::Relu); let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("tanh", vec![ta.clone()], Box::new(|tp, v| { let y = tp.activation(v[0], Activation::Tanh); Ok(tp.sum(y)) })),
            ("gelu", vec![ta.clone()], Box::new(|tp, v| { let y = tp.activation(v[0], Activation::Gelu); Ok(tp.sum(y)) })),
            ("sin_cos", vec![ta.clone()], Box::new(|tp, v| { let s = tp.sin(v[0]); let c = tp.cos(v[0]); let y = tp.mul(s, c)?; let y = tp.add(y, c)?; Ok(tp.sum(y)) })),
            ("abs", vec![ta.clone()], Box::new(|tp, v| { let y = tp.abs(v[0]); let y = tp.mul(y, y)?; let y = tp.mul(y, v[0])?; Ok(tp.sum(y)) })),
            ("reshape", vec![ta.clone(), tb.clone()], Box::new(|tp, v| { let r = tp.reshape(v[0], vec![3, 2])?; let y = tp.mul(r, v[1])?; Ok(tp.sum(y)) })),
            ("gather_rows", vec![tb.clone()], { let idx = idx.clone(); Box::new(move |tp, v| { let g = tp.gather_rows(v[0], idx.clone())?; let y = tp.mul(g, g)?; Ok(tp.sum(y)) }) }),
            ("gather_cols", vec![ta.clone()], { let idx = idx.clone(); Box::new(move |tp, v| { let g = tp.gather_cols(v[0], idx.clone())?; let y = tp.mul(g, g)?; Ok(tp.sum(y)) }) }),
            ("concat_cols", vec![ta.clone(), t(&[2, 2], &k[..4])], Box::new(|tp, v| { let cat = tp.concat_cols(&[v[0], v[1]])?; let y = tp.mul(cat, cat)?; let y = tp.activation(y, Activation::Tanh); Ok(tp.sum(y)) })),
            ("segment_sum", vec![tb.clone()], { let idx = idx.clone(); Box::new(move |tp, v| {
                let seg: Arc<[usize]> = vec![idx[0] % 2, idx[1] % 2, 1].into();
                let w: Arc<[f64]> = vec![0.5, -1.5, 2.0].into();
                let s = tp.segment_sum(v[0], seg, w, 2)?; let y = tp.mul(s, s)?; Ok(tp.sum(y)) }) }),
            ("replace_rows", vec![tb.clone(), t(&[1, 2], &k[..2])], Box::new(|tp, v| {
                let r = tp.replace_rows(v[0], vec![1usize].into(), v[1])?; let y = tp.mul(r, r)?; let y = tp.activation(y, Activation::Tanh); Ok(tp.sum(y)) })),
            ("row_matvec", vec![t(&[2, 4], &k), t(&[2, 2], &b[..4])], Box::new(|tp, v| {
                let y = tp.row_matvec(v[0], v[1])?; let y = tp.mul(y, y)?; Ok(tp.sum(y)) })),
            ("pair_outer_sum", vec![t(&[2, 3], &a), t(&[3, 2], &b)], { let idx = idx.clone(); Box::new(move |tp, v| {
                let pairs = Arc::new(PairIndex { phi_row: vec![0, 1, 1, idx[0] % 2], v_row: vec![idx[1], 0, 2, idx[2]], out_row: vec![0, 0, 1, 1], weight: vec![0.5, 1.0, -0.25, 2.0], n_out: 2 });
                let y = tp.pair_outer_sum(v[0], v[1], pairs)?; let y = tp.mul(y, y)?; Ok(tp.sum(y)) }) }),
        ];
        for (name, inputs, f) in cases {
            let err = grad_check(&inputs, f.as_ref());
            prop_assert!(err < tol, "{} rel err {}", name, err);
        }
    }
}
