use super::*;
use crate::autodiff::{grad_check, Array, Graph, ParamSet, Probe, Var};
use crate::backbone::{Backbone, BackboneConfig, FeatureTokens};
use crate::geometry::{Point, PointCloud};
use crate::rng::SplitMix64;

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = SplitMix64::new(seed);
    PointCloud::new((0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()).unwrap()
}

fn random_array(rows: usize, cols: usize, rng: &mut SplitMix64, spread: f64) -> Array {
    Array::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform(-spread, spread)).collect()).unwrap()
}

fn centers(n: usize, seed: u64) -> Vec<Point> {
    cloud(n, seed).points().to_vec()
}

/// Tiny auxiliary pipeline with phi copied from psi1's encoder.
fn tiny_cascade(seed: u64) -> (CascadeModel, ParamSet) {
    let m = CascadeModel::new(CascadeMode::Auxiliary, BackboneConfig::tiny()).unwrap();
    let mut ps = m.psi1.as_ref().unwrap().init(seed, "recon");
    let phi = m.phi.as_ref().unwrap();
    let head = format!("{RECON_PREFIX}.");
    let enc: Vec<(String, Array)> = ps
        .iter()
        .filter(|(k, _)| Backbone::is_encoder_param(&k[head.len()..]))
        .map(|(k, v)| (format!("{}.{}", phi.prefix, &k[head.len()..]), v.clone()))
        .collect();
    enc.into_iter().for_each(|(k, v)| {
        ps.insert(k, v);
    });
    ps.merge(fusion_init(16));
    ps.merge(m.psi2.init(seed, "main"));
    m.check_params(&ps).unwrap();
    (m, ps)
}

fn oracle_kl(t: &Array, s: &Array, tau: f64) -> f64 {
    let sm = |row: &[f64]| {
        let z: Vec<f64> = row.iter().map(|v| (v / tau).exp()).collect();
        let tot: f64 = z.iter().sum();
        z.into_iter().map(|v| v / tot).collect::<Vec<_>>()
    };
    let mut acc = 0.0;
    for r in 0..t.rows() {
        let (p, q) = (sm(t.row(r)), sm(s.row(r)));
        acc += p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
    }
    tau * tau * acc / t.rows() as f64
}

fn distill_value(t: &Array, s: &Array, pts: &[Point], mode: DistillMode, tau: f64) -> f64 {
    let mut g = Graph::new();
    let sv = g.param(s.clone());
    let st = FeatureTokens { centers: pts.to_vec(), feats: sv };
    let target = TokenTarget { centers: pts.to_vec(), feats: t.clone() };
    let l = distill_loss(&mut g, &target, &st, mode, tau).unwrap();
    g.value(l).item()
}

#[test]
fn match_tokens_cases() {
    let a = centers(8, 1);
    assert_eq!(match_tokens(&a, &a), (0..8).collect::<Vec<_>>());
    let s = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
    let t = [[4.9, 0.1, 0.0], [0.2, 0.0, 0.0]];
    assert_eq!(match_tokens(&s, &t), vec![1, 0]);
    // equidistant teacher centers: lowest index wins
    let t2 = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
    assert_eq!(match_tokens(&[[0.0; 3]], &t2), vec![0]);
    let b = centers(8, 2);
    assert!(match_tokens(&a, &b).iter().all(|&i| i < 8));
}

#[test]
fn fuse_analytic_weights() {
    let mut rng = SplitMix64::new(3);
    let c = 4;
    let pts = centers(5, 3);
    let other = centers(5, 4);
    let (a0, aa) = (random_array(5, c, &mut rng, 1.0), random_array(5, c, &mut rng, 1.0));
    let run = |w: Array, aux_centers: &[Point]| {
        let mut g = Graph::new();
        let mut ps = ParamSet::new();
        ps.insert("fuse.w", w);
        ps.insert("fuse.b", Array::zeros(&[c]));
        let b = ps.bind_all(&mut g, true);
        let z0 = FeatureTokens { centers: pts.clone(), feats: g.constant(a0.clone()) };
        let za = FeatureTokens { centers: aux_centers.to_vec(), feats: g.constant(aa.clone()) };
        let out = fuse(&mut g, &b, &z0, &za).unwrap();
        assert_eq!(out.centers, pts);
        g.value(out.feats).clone()
    };
    assert_eq!(run(fusion_init(c).get("fuse.w").unwrap().clone(), &other).data(), a0.data());
    let mut w = Array::zeros(&[2 * c, c]);
    for i in 0..c {
        w.data_mut()[(c + i) * c + i] = 1.0;
    }
    assert_eq!(run(w, &pts).data(), aa.data());
}

#[test]
fn fuse_gradient_reaches_both_inputs() {
    let mut rng = SplitMix64::new(4);
    let c = 3;
    let (p0, pa) = (centers(4, 5), centers(4, 6));
    let params = vec![random_array(4, c, &mut rng, 1.0), random_array(4, c, &mut rng, 1.0), random_array(2 * c, c, &mut rng, 1.0)];
    let rep = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let mut ps = ParamSet::new();
            ps.insert("fuse.b", Array::vector(vec![0.1, -0.2, 0.3]));
            let mut b = ps.bind_all(g, false);
            b.insert("fuse.w", v[2]);
            let z0 = FeatureTokens { centers: p0.clone(), feats: v[0] };
            let za = FeatureTokens { centers: pa.clone(), feats: v[1] };
            let o = fuse(g, &b, &z0, &za)?;
            let s = g.tanh(o.feats)?;
            g.sum(s)
        },
        &params,
        1e-6,
        1e-6,
        Probe::All,
    )
    .unwrap();
    assert!(rep.passed(), "{}", rep.max_rel_error());
    assert!(rep.entries.iter().filter(|e| e.param == 1).any(|e| e.analytic.abs() > 1e-3));
}

#[test]
fn distill_hand_case() {
    let t = Array::matrix(2, 2, vec![0.0, 2f64.ln(), 0.0, 2f64.ln()]).unwrap();
    let s = Array::zeros(&[2, 2]);
    let pts = centers(2, 7);
    // p = (1/3, 2/3), q = (1/2, 1/2): identical per token, so the token mean is one term
    let want = (1.0 / 3.0) * ((1.0 / 3.0) / 0.5f64).ln() + (2.0 / 3.0) * ((2.0 / 3.0) / 0.5f64).ln();
    let got = distill_value(&t, &s, &pts, DistillMode::Kl, 1.0);
    assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    assert!((oracle_kl(&t, &s, 1.0) - want).abs() < 1e-15);
    let mse = distill_value(&t, &s, &pts, DistillMode::Mse, 1.0);
    assert!((mse - 2f64.ln().powi(2) / 2.0).abs() < 1e-15);
}

#[test]
fn distill_matches_direct_summation() {
    let mut rng = SplitMix64::new(8);
    for case in 0..200 {
        let (n, c) = (1 + case % 5, 1 + case % 7);
        let (t, s) = (random_array(n, c, &mut rng, 3.0), random_array(n, c, &mut rng, 3.0));
        let pts = centers(n, case as u64);
        let tau = [0.5, 1.0, 2.0][case % 3];
        let got = distill_value(&t, &s, &pts, DistillMode::Kl, tau);
        assert!((got - oracle_kl(&t, &s, tau)).abs() < 1e-12);
    }
}

#[test]
fn distill_zero_iff_equal_and_nonnegative() {
    let mut rng = SplitMix64::new(9);
    for case in 0..500 {
        let (n, c) = (1 + case % 4, 2 + case % 5);
        let t = random_array(n, c, &mut rng, 2.0);
        let pts = centers(n, 100 + case as u64);
        for mode in [DistillMode::Kl, DistillMode::Mse] {
            assert_eq!(distill_value(&t, &t, &pts, mode, 1.0), 0.0);
        }
        let s = random_array(n, c, &mut rng, 2.0);
        assert!(distill_value(&t, &s, &pts, DistillMode::Kl, 1.0) > 0.0);
        assert!(distill_value(&t, &s, &pts, DistillMode::Mse, 1.0) > 0.0);
        // a per-token shift changes logits but not the distributions
        let shifted = Array::new(vec![n, c], (0..n * c).map(|i| s.data()[i] + (i / c) as f64 * 0.7 - 1.0).collect()).unwrap();
        let kl = distill_value(&t, &s, &pts, DistillMode::Kl, 1.0);
        assert!((distill_value(&t, &shifted, &pts, DistillMode::Kl, 1.0) - kl).abs() < 1e-12);
    }
}

#[test]
fn distill_aligns_teacher_rows_by_center() {
    let mut rng = SplitMix64::new(10);
    let t = random_array(3, 4, &mut rng, 1.0);
    let pts = centers(3, 11);
    let perm = [2, 0, 1];
    let tp = Array::new(vec![3, 4], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap();
    let cp: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
    let mut g = Graph::new();
    let sv = g.param(t.clone());
    let st = FeatureTokens { centers: pts.clone(), feats: sv };
    let l = distill_loss(&mut g, &TokenTarget { centers: cp, feats: tp }, &st, DistillMode::Kl, 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn distill_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let sv = g.param(Array::zeros(&[3, 4]));
    let st = FeatureTokens { centers: centers(3, 1), feats: sv };
    let t = TokenTarget { centers: centers(3, 2), feats: Array::zeros(&[3, 5]) };
    assert!(distill_loss(&mut g, &t, &st, DistillMode::Kl, 1.0).is_err());
}

#[test]
fn reconstruct_shape_is_deterministic_four_n() {
    let (m, ps) = tiny_cascade(1);
    let x = cloud(32, 1);
    let a = m.reconstruct_shape(&ps, &x).unwrap();
    assert_eq!(a.len(), 128);
    assert_eq!(a, m.reconstruct_shape(&ps, &x).unwrap());
}

#[test]
fn aux_tokens_regression() {
    let (m, ps) = tiny_cascade(2);
    let p_rec = m.reconstruct_shape(&ps, &cloud(32, 2)).unwrap();
    let mut g = Graph::new();
    let b = ps.bind_all(&mut g, false);
    let z = aux_encode(&mut g, &b, m.phi.as_ref().unwrap(), &p_rec).unwrap();
    assert_eq!(g.shape(z.feats), [8, 16]);
    let first = g.value(z.feats).at(0, 0);
    assert!((first - AUX_FIRST).abs() < 1e-12, "{first:?}");
}

const AUX_FIRST: f64 = -0.3571142744609366;

#[test]
fn fused_equals_manual_composition() {
    let (m, mut ps) = tiny_cascade(3);
    // make fusion non-trivial
    let mut rng = SplitMix64::new(3);
    ps.insert("fuse.w", random_array(32, 16, &mut rng, 0.3));
    let x = cloud(32, 3);
    let mut g = Graph::new();
    let b = ps.bind_all(&mut g, false);
    let out = complete_fused(&mut g, &b, &m, &x, None).unwrap();
    assert_eq!(g.shape(out.out.fine), [128, 3]);

    let p_rec = reconstruct_shape(m.psi1.as_ref().unwrap(), &ps, &x).unwrap();
    let z0 = m.psi2.encode_cloud(&mut g, &b, &x).unwrap();
    let za = aux_encode(&mut g, &b, m.phi.as_ref().unwrap(), &p_rec).unwrap();
    let fused = fuse(&mut g, &b, &z0, &za).unwrap();
    let (_, fine) = m.psi2.head(&mut g, &b, &fused).unwrap();
    assert_eq!(g.value(fine).data(), g.value(out.out.fine).data());
    assert_eq!(g.value(z0.feats).data(), g.value(out.out.tokens.feats).data());
    assert_eq!(m.infer(&ps, &x).unwrap().to_array().data(), g.value(fine).data());
}

#[test]
fn progressive_is_literal_composition() {
    let cfg = BackboneConfig::tiny();
    let m = CascadeModel::new(CascadeMode::Progressive, cfg).unwrap();
    let (s1, s2) = (m.psi1.clone().unwrap(), m.psi2.clone());
    let mut ps = s1.init(4, "recon");
    ps.merge(s2.init(4, "main"));
    m.check_params(&ps).unwrap();
    let x = cloud(32, 4);
    let mut g = Graph::new();
    let b = ps.bind_all(&mut g, false);
    let out = complete_progressive(&mut g, &s1, &ps, &s2, &b, &x).unwrap();
    assert_eq!(g.shape(out.fine), [128, 3]);
    let mid = s1.infer(&ps, &x).unwrap();
    assert_eq!(mid.len(), 64);
    assert_eq!(s2.infer(&ps, &mid).unwrap().to_array().data(), g.value(out.fine).data());
    assert_eq!(m.infer(&ps, &x).unwrap().to_array().data(), g.value(out.fine).data());
}

struct Fixture {
    m: CascadeModel,
    ps: ParamSet,
    x: PointCloud,
    gt: PointCloud,
    gt_coarse: PointCloud,
    p_rec: PointCloud,
    targets: TeacherTargets,
}

fn fixture() -> Fixture {
    let (m, ps) = tiny_cascade(5);
    let x = cloud(32, 5);
    let gt = cloud(128, 6);
    let gt_sub = gt.select(&crate::geometry::fps(&gt, 64, 0).unwrap());
    let gt_coarse = coarse_target(&gt, 8).unwrap();
    let p_rec = m.reconstruct_shape(&ps, &x).unwrap();
    let ta = Backbone::new(BackboneConfig::tiny().with_io(128, 4), "aux").unwrap();
    let tb = Backbone::new(BackboneConfig::tiny().with_io(64, 2), "main").unwrap();
    let teachers = TeacherSet { a: Some((ta.clone(), ta.init_encoder(77, "main"))), b: Some((tb.clone(), tb.init(78, "main"))) };
    let targets = teachers.targets(&gt, &gt_sub).unwrap();
    Fixture { m, ps, x, gt, gt_coarse, p_rec, targets }
}

impl Fixture {
    fn inputs(&self) -> LossInputs<'_> {
        LossInputs { x: &self.x, gt: &self.gt, p_rec: Some(&self.p_rec), gt_coarse: &self.gt_coarse }
    }

    fn loss(&self, cfg: &LossConfig) -> (f64, f64) {
        let mut g = Graph::new();
        let b = self.ps.bind_all(&mut g, true);
        let t = total_loss(&mut g, &b, &self.m, self.inputs(), &self.targets, cfg).unwrap();
        (g.value(t.total).item(), g.value(t.l0).item())
    }
}

#[test]
fn zero_weights_reduce_to_completion_loss() {
    let f = fixture();
    let (total, l0) = f.loss(&LossConfig { lambda1: 0.0, lambda2: 0.0, ..Default::default() });
    assert_eq!(total, l0);
    let (full, l0b) = f.loss(&LossConfig::default());
    assert_eq!(l0, l0b);
    assert!(full > l0);
    let (mse, _) = f.loss(&LossConfig { distill: DistillMode::Mse, ..Default::default() });
    assert!(mse >= l0);
}

#[test]
fn missing_teacher_is_config_error() {
    let mut f = fixture();
    f.targets.z_a = None;
    let mut g = Graph::new();
    let b = f.ps.bind_all(&mut g, true);
    let r = total_loss(&mut g, &b, &f.m, f.inputs(), &f.targets, &LossConfig::default());
    assert!(matches!(r, Err(crate::Error::Config(_))));
    assert!(LossConfig { lambda1: 1.0, cascade: CascadeMode::None, ..Default::default() }.validate().is_err());
    assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
    assert!(LossConfig { lambda2: -1.0, ..Default::default() }.validate().is_err());
}

#[test]
fn no_gradient_reaches_stage_one() {
    let f = fixture();
    for p_rec in [Some(&f.p_rec), None] {
        let mut g = Graph::new();
        let b = f.ps.bind_all(&mut g, true);
        let inp = LossInputs { p_rec, ..f.inputs() };
        let t = total_loss(&mut g, &b, &f.m, inp, &f.targets, &LossConfig::default()).unwrap();
        g.backward(t.total).unwrap();
        let grads = b.grads(&g);
        for (name, gr) in grads.iter() {
            let nz = gr.data().iter().any(|v| *v != 0.0);
            if name.starts_with("recon.") {
                assert!(!nz, "{name} received gradient");
            }
        }
        for prefix in ["aux.", "fuse.", "main."] {
            assert!(grads.with_prefix(prefix).any(|(_, g)| g.data().iter().any(|v| *v != 0.0)), "{prefix}");
        }
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let f = fixture();
    let names: Vec<String> = f.ps.names().filter(|n| !n.starts_with("recon.")).map(String::from).collect();
    let values: Vec<Array> = names.iter().map(|n| f.ps.get(n).unwrap().clone()).collect();
    for distill in [DistillMode::Kl, DistillMode::Mse] {
        let cfg = LossConfig { distill, ..Default::default() };
        let rep = grad_check(
            |g: &mut Graph, vars: &[Var]| {
                let mut b = f.ps.bind(g, |n| n.starts_with("recon."), |_| false);
                for (n, &v) in names.iter().zip(vars) {
                    b.insert(n.clone(), v);
                }
                Ok(total_loss(g, &b, &f.m, f.inputs(), &f.targets, &cfg)?.total)
            },
            &values,
            1e-6,
            1e-4,
            Probe::Random { count: 400, seed: 12 },
        )
        .unwrap();
        assert!(rep.passed(), "{distill}: {}", rep.max_rel_error());
    }
}
