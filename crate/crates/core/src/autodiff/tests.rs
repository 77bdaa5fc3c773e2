use super::*;
use crate::rng::SplitMix64;
use crate::Error;

fn rand_array(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn vals(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn add_relu_mean_square_examples() {
    let mut g = Graph::new();
    let a = g.constant(Array::vector(vec![1.0, 2.0]));
    let b = g.constant(Array::vector(vec![3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(vals(&g, s), [4.0, 6.0]);

    let r = g.constant(Array::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(r).unwrap();
    assert_eq!(vals(&g, r), [0.0, 0.0, 2.0]);

    let x = g.constant(Array::vector(vec![3.0, 4.0]));
    let sq = g.square(x).unwrap();
    let m = g.mean(sq).unwrap();
    assert_eq!(g.value(m).item(), 12.5);
}

#[test]
fn broadcast_rules() {
    let mut g = Graph::new();
    let a = g.constant(Array::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let bias = g.constant(Array::vector(vec![10., 20.]));
    let col = g.constant(Array::matrix(2, 1, vec![100., 200.]).unwrap());
    let s = g.add(a, bias).unwrap();
    assert_eq!(vals(&g, s), [11., 22., 13., 24.]);
    let s = g.add(a, col).unwrap();
    assert_eq!(vals(&g, s), [101., 102., 203., 204.]);
    let bad = g.constant(Array::vector(vec![1., 2., 3.]));
    assert!(matches!(g.add(a, bad), Err(Error::Contract(_))));
    // no implicit promotion of the first operand
    assert!(g.add(bias, a).is_err());
}

#[test]
fn log_domain_error() {
    let mut g = Graph::new();
    let x = g.constant(Array::vector(vec![1.0, 0.0]));
    assert!(matches!(g.log(x), Err(Error::Domain(_))));
    let x = g.constant(Array::vector(vec![1.0, -2.0]));
    assert!(matches!(g.log(x), Err(Error::Domain(_))));
}

#[test]
fn finite_checks_catch_overflow() {
    let mut g = Graph::new().with_finite_checks(true);
    let x = g.constant(Array::vector(vec![1000.0]));
    assert!(matches!(g.exp(x), Err(Error::NonFinite("exp"))));
}

#[test]
fn matmul_examples() {
    let mut rng = SplitMix64::new(11);
    let mut g = Graph::new();
    let a = rand_array(&mut rng, &[3, 3], -1.0, 1.0);
    let av = g.constant(a.clone());
    let i = g.constant(Array::identity(3));
    let p = g.matmul(av, i).unwrap();
    assert_eq!(g.value(p), &a);

    let x = g.constant(Array::matrix(1, 2, vec![1., 2.]).unwrap());
    let y = g.constant(Array::matrix(2, 1, vec![3., 4.]).unwrap());
    let p = g.matmul(x, y).unwrap();
    assert_eq!(vals(&g, p), [11.0]);
    assert!(g.matmul(x, x).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitMix64::new(5);
    let a = rand_array(&mut rng, &[4, 5], -2.0, 2.0);
    let b = rand_array(&mut rng, &[5, 3], -2.0, 2.0);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((g.value(c).at(i, j) - s).abs() <= 1e-12);
        }
    }
    let bt = g.constant(b.transpose());
    let c2 = g.matmul_nt(av, bt).unwrap();
    assert!(g.value(c2).max_abs_diff(g.value(c)) <= 1e-12);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Array::vector(vec![0.0, 2f64.ln()]));
    let s = g.softmax(x, 0).unwrap();
    let v = vals(&g, s);
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = g.constant(Array::vector(vec![0.7; 3]));
    let s = g.softmax(x, 0).unwrap();
    assert!(vals(&g, s).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));

    let x = g.constant(Array::vector(vec![1000.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = vals(&g, s);
    assert_eq!(v[0], 1.0);
    assert!(v[1] >= 0.0 && v[1] < 1e-300);
}

#[test]
fn softmax_rows_normalized_and_shift_invariant() {
    let mut rng = SplitMix64::new(21);
    for _ in 0..100 {
        let x = rand_array(&mut rng, &[4, 7], -30.0, 30.0);
        let c = rng.uniform(-50.0, 50.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = g.constant(x.map(|v| v + c));
        let a = g.softmax(xv, 1).unwrap();
        let b = g.softmax(sv, 1).unwrap();
        for r in 0..4 {
            let s: f64 = g.value(a).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-12);
        // along axis 0 as well
        let c0 = g.softmax(xv, 0).unwrap();
        for j in 0..7 {
            let s: f64 = (0..4).map(|r| g.value(c0).at(r, j)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Array::vector(vec![1.0; 3]));
    let bias = g.constant(Array::vector(vec![0.0; 3]));
    let x = g.constant(Array::matrix(1, 3, vec![2.5; 3]).unwrap());
    let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
    assert!(vals(&g, y).iter().all(|&v| v == 0.0));

    let gain = g.constant(Array::vector(vec![1.0; 2]));
    let bias = g.constant(Array::vector(vec![0.0; 2]));
    let x = g.constant(Array::matrix(1, 2, vec![1.0, -1.0]).unwrap());
    let y = g.layernorm(x, gain, bias, 1e-14).unwrap();
    let v = vals(&g, y);
    assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![1.0, -2.0, 3.0]));
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);

    let mut g = Graph::new();
    let a = g.param(Array::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
    let b = g.param(Array::matrix(2, 2, vec![5., 6., 7., 8.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    // dA = 1 * B^T: row sums of B
    assert_eq!(g.grad(a).unwrap().data(), &[11., 15., 11., 15.]);
    // dB = A^T * 1: column sums of A repeated
    assert_eq!(g.grad(b).unwrap().data(), &[4., 4., 6., 6.]);

    let v = g.param(Array::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_shared_consumers() {
    // y = sum(x * x) + sum(3x): x feeds two consumers, dy/dx = 2x + 3.
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![0.5, -1.5]));
    let sq = g.mul(x, x).unwrap();
    let a = g.sum(sq).unwrap();
    let t = g.scale(x, 3.0).unwrap();
    let b = g.sum(t).unwrap();
    let y = g.add(a, b).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 0.0]);
    // second pass accumulates; intermediates are not double counted
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[8.0, 0.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![1.0]));
    let c = g.constant(Array::vector(vec![2.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
}

#[test]
fn grad_check_examples() {
    let r = grad_check(
        |g, v| {
            let s = g.square(v[0])?;
            g.sum(s)
        },
        &[Array::scalar(3.0)],
        1e-5,
        1e-9,
        Probe::All,
    )
    .unwrap();
    assert!((r.entries[0].analytic - 6.0).abs() < 1e-15);
    assert!(r.entries[0].rel_error < 1e-9 && r.passed());

    let r = grad_check(|g, _| Ok(g.constant(Array::scalar(4.0))), &[Array::scalar(1.0)], 1e-5, 1e-9, Probe::All)
        .unwrap();
    assert_eq!(r.entries[0].analytic, 0.0);
    assert_eq!(r.entries[0].numeric, 0.0);
}

type Build = fn(&mut Graph, &[Var]) -> crate::Result<Var>;

/// Every op is checked through `sum(op(..) * w)` with a fixed random weighting `w`
/// passed as the last parameter slot's constant copy.
fn weighted(g: &mut Graph, y: Var, w: &Array) -> crate::Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

#[test]
fn every_op_matches_finite_differences() {
    let cases: Vec<(&str, Vec<Vec<usize>>, (f64, f64), Build)> = vec![
        ("add", vec![vec![3, 4], vec![4]], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("add_trailing", vec![vec![3, 4], vec![3, 1]], (-1.0, 1.0), |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![4]], (-1.0, 1.0), |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![5]], (-1.0, 1.0), |g, v| g.scale(v[0], -1.7)),
        ("offset", vec![vec![5]], (-1.0, 1.0), |g, v| g.offset(v[0], 0.3)),
        ("scale_by", vec![vec![3, 2], vec![1]], (-1.0, 1.0), |g, v| g.scale_by(v[0], v[1])),
        ("relu", vec![vec![4, 3]], (-1.0, 1.0), |g, v| g.relu(v[0])),
        ("gelu", vec![vec![4, 3]], (-3.0, 3.0), |g, v| g.gelu(v[0])),
        ("tanh", vec![vec![4, 3]], (-2.0, 2.0), |g, v| g.tanh(v[0])),
        ("exp", vec![vec![6]], (-1.0, 1.0), |g, v| g.exp(v[0])),
        ("log", vec![vec![6]], (0.5, 2.0), |g, v| g.log(v[0])),
        ("square", vec![vec![6]], (-1.0, 1.0), |g, v| g.square(v[0])),
        ("row_norm", vec![vec![5, 3]], (-1.0, 1.0), |g, v| g.row_norm(v[0])),
        ("sum_axis0", vec![vec![2, 3, 4]], (-1.0, 1.0), |g, v| g.sum_axis(v[0], 0)),
        ("mean_axis1", vec![vec![2, 3, 4]], (-1.0, 1.0), |g, v| g.mean_axis(v[0], 1)),
        ("mean_axis2", vec![vec![2, 3, 4]], (-1.0, 1.0), |g, v| g.mean_axis(v[0], 2)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], (-1.0, 1.0), |g, v| g.matmul_nt(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], (-1.0, 1.0), |g, v| g.transpose(v[0])),
        ("softmax1", vec![vec![3, 5]], (-2.0, 2.0), |g, v| g.softmax(v[0], 1)),
        ("softmax0", vec![vec![3, 5]], (-2.0, 2.0), |g, v| g.softmax(v[0], 0)),
        ("log_softmax", vec![vec![3, 5]], (-2.0, 2.0), |g, v| g.log_softmax(v[0], 1)),
        ("layernorm", vec![vec![3, 5], vec![5], vec![5]], (-1.0, 1.0), |g, v| g.layernorm(v[0], v[1], v[2], 1e-5)),
        ("gather_rows", vec![vec![4, 3]], (-1.0, 1.0), |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], (-1.0, 1.0), |g, v| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], (-1.0, 1.0), |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice_cols", vec![vec![3, 6]], (-1.0, 1.0), |g, v| g.slice_cols(v[0], 2, 3)),
        ("reshape", vec![vec![3, 4]], (-1.0, 1.0), |g, v| g.reshape(v[0], &[2, 6])),
        ("segment_max", vec![vec![6, 3]], (-1.0, 1.0), |g, v| g.segment_max(v[0], 3)),
    ];
    for (name, shapes, (lo, hi), build) in cases {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = SplitMix64::new(seed * 7919 + name.len() as u64);
            let params: Vec<Array> = shapes.iter().map(|s| rand_array(&mut rng, s, lo, hi)).collect();
            let mut probe = Graph::new();
            let pv: Vec<Var> = params.iter().map(|p| probe.constant(p.clone())).collect();
            let out = build(&mut probe, &pv).unwrap();
            let out_shape = probe.value(out).shape().to_vec();
            let w = rand_array(&mut rng, &out_shape, -1.0, 1.0);
            let report = grad_check(
                |g, v| {
                    let y = build(g, v)?;
                    weighted(g, y, &w)
                },
                &params,
                1e-5,
                1e-6,
                Probe::All,
            )
            .unwrap();
            worst = worst.max(report.max_rel_error());
        }
        assert!(worst <= 1e-6, "{name}: worst relative error {worst:e}");
    }
}
