use super::*;
use crate::autodiff::{grad_check, Array, Bound, Graph, ParamSet, Probe, Var};
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::metrics::{chamfer_grad, ChamferVariant};
use crate::rng::SplitMix64;
use crate::shapegen::{make_shape, ShapeKind, ShapeSpec};

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = SplitMix64::new(seed);
    PointCloud::new((0..n).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect()).unwrap()
}

fn tiny() -> (Backbone, ParamSet) {
    let bb = Backbone::new(BackboneConfig::tiny(), "m").unwrap();
    let ps = bb.init(11, "main");
    (bb, ps)
}

fn zero(ps: &mut ParamSet, name: &str) {
    ps.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
}

/// Runs a finite-difference check over the tensors of `ps` selected by `pick`;
/// the remaining tensors stay constant.
fn check_subset(
    ps: &ParamSet,
    pick: impl Fn(&str) -> bool,
    count: usize,
    loss: impl Fn(&mut Graph, &Bound) -> Result<Var>,
) -> crate::autodiff::GradCheckReport {
    let names: Vec<String> = ps.names().filter(|n| pick(n)).map(String::from).collect();
    assert!(!names.is_empty());
    let values: Vec<Array> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    let build = |g: &mut Graph, vars: &[Var]| {
        let mut b = ps.bind(g, |n| !pick(n), |_| false);
        for (n, &v) in names.iter().zip(vars) {
            b.insert(n.clone(), v);
        }
        loss(g, &b)
    };
    grad_check(build, &values, 1e-6, 1e-4, Probe::Random { count, seed: 5 }).unwrap()
}

#[test]
fn config_invariants() {
    assert!(BackboneConfig::default().validate().is_ok());
    assert_eq!(BackboneConfig::default().r(), 32);
    assert!(BackboneConfig { heads: 5, ..Default::default() }.validate().is_err());
    assert!(BackboneConfig { factor: 3, ..Default::default() }.validate().is_err());
    assert!(BackboneConfig { n_q: 30, ..Default::default() }.validate().is_err());
    assert!(BackboneConfig { n_c: 300, ..Default::default() }.validate().is_err());
}

#[test]
fn output_shapes() {
    let (bb, ps) = tiny();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, true);
    let out = bb.complete(&mut g, &b, &cloud(32, 1)).unwrap();
    assert_eq!(g.shape(out.tokens.feats), [8, 16]);
    assert_eq!(g.shape(out.coarse), [8, 3]);
    assert_eq!(g.shape(out.fine), [128, 3]);
    assert!(bb.complete(&mut g, &b, &cloud(31, 1)).is_err());
}

#[test]
fn desk_config_emits_four_n() {
    let bb = Backbone::new(BackboneConfig::default(), "m").unwrap();
    let ps = bb.init(0, "main");
    let inp = make_shape(&ShapeSpec::random(ShapeKind::Torus, &mut SplitMix64::new(2)), 256, 3).unwrap();
    let a = bb.infer(&ps, &inp).unwrap();
    assert_eq!(a.len(), 1024);
    assert_eq!(a, bb.infer(&ps, &inp).unwrap());
}

#[test]
fn too_few_points_for_proxies() {
    let (bb, ps) = tiny();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    assert!(matches!(bb.extract_proxies(&mut g, &b, &cloud(7, 1)), Err(crate::Error::Contract(_))));
}

#[test]
fn proxies_translation_only_moves_positional_term() {
    let (bb, mut ps) = tiny();
    let c = cloud(32, 2);
    let t = c.translated([0.3, -1.2, 0.5]);
    let feats = |ps: &ParamSet, c: &PointCloud| {
        let mut g = Graph::new();
        let b = bb.bind(&mut g, ps, false);
        let tok = bb.extract_proxies(&mut g, &b, c).unwrap();
        g.value(tok.feats).clone()
    };
    assert!(feats(&ps, &c).max_abs_diff(&feats(&ps, &t)) > 1e-3);
    zero(&mut ps, "m.pos.l2.w");
    zero(&mut ps, "m.pos.l2.b");
    assert!(feats(&ps, &c).max_abs_diff(&feats(&ps, &t)) < 1e-12);
}

#[test]
fn deterministic_tokens() {
    let (bb, ps) = tiny();
    let c = cloud(32, 3);
    let (c1, f1) = bb.infer_tokens(&ps, &c).unwrap();
    let (c2, f2) = bb.infer_tokens(&ps, &c).unwrap();
    assert_eq!(c1, c2);
    assert_eq!(f1.data(), f2.data());
    assert_eq!(bb.init(11, "main"), ps);
    assert_ne!(bb.init(12, "main"), ps);
    // prefix does not change initial values
    let other = Backbone::new(BackboneConfig::tiny(), "z").unwrap().init(11, "main");
    assert_eq!(other.get("z.enc0.attn.wq"), ps.get("m.enc0.attn.wq"));
}

#[test]
fn attention_rows_are_distributions() {
    let (bb, ps) = tiny();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let mut log = AttentionLog::default();
    let tok = bb.extract_proxies(&mut g, &b, &cloud(32, 4)).unwrap();
    let enc = bb.encode_logged(&mut g, &b, &tok, &mut log).unwrap();
    let (_, q) = bb.generate_queries(&mut g, &b, &enc).unwrap();
    bb.decode_logged(&mut g, &b, q, &enc, &mut log).unwrap();
    let cfg = bb.cfg;
    assert_eq!(log.maps.len(), cfg.heads * (cfg.enc_layers + 2 * cfg.dec_layers));
    for &m in &log.maps {
        let a = g.value(m);
        for r in 0..a.rows() {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "{s}");
            assert!(a.row(r).iter().all(|&p| p >= 0.0));
        }
    }
    // cross-attention maps are n_q x n_c
    assert_eq!(g.shape(*log.maps.last().unwrap()), [cfg.n_q, cfg.n_c]);
}

#[test]
fn zero_residual_branches_are_identity() {
    let (bb, mut ps) = tiny();
    for l in 0..bb.cfg.enc_layers {
        for n in ["attn.wo", "attn.bo", "ffn2.w", "ffn2.b"] {
            zero(&mut ps, &format!("m.enc{l}.{n}"));
        }
    }
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let tok = bb.extract_proxies(&mut g, &b, &cloud(32, 5)).unwrap();
    let enc = bb.encode(&mut g, &b, &tok).unwrap();
    assert_eq!(g.value(enc.feats).data(), g.value(tok.feats).data());
}

#[test]
fn encode_rejects_wrong_shape() {
    let (bb, ps) = tiny();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let feats = g.constant(Array::zeros(&[7, 16]));
    let tok = FeatureTokens { centers: vec![[0.0; 3]; 7], feats };
    assert!(bb.encode(&mut g, &b, &tok).is_err());
}

#[test]
fn coarse_invariant_to_token_permutation() {
    let (bb, ps) = tiny();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let tok = bb.encode_cloud(&mut g, &b, &cloud(32, 6)).unwrap();
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let pf = g.gather_rows(tok.feats, &perm).unwrap();
    let pt = FeatureTokens { centers: perm.iter().map(|&i| tok.centers[i]).collect(), feats: pf };
    let (c1, _) = bb.generate_queries(&mut g, &b, &tok).unwrap();
    let (c2, _) = bb.generate_queries(&mut g, &b, &pt).unwrap();
    assert!(g.value(c1).max_abs_diff(g.value(c2)) < 1e-12);
}

#[test]
fn first_coarse_center_regression() {
    let bb = Backbone::new(BackboneConfig::tiny(), "m").unwrap();
    let ps = bb.init(2024, "main");
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let out = bb.complete(&mut g, &b, &cloud(32, 2024)).unwrap();
    let first = g.value(out.coarse).row(0).to_vec();
    let want = FIRST_COARSE;
    for (a, w) in first.iter().zip(want) {
        assert!((a - w).abs() < 1e-12, "{first:?}");
    }
}

const FIRST_COARSE: [f64; 3] = [0.051689818061722105, 0.017347673378761683, 0.2744889480125652];

#[test]
fn zero_offsets_collapse_patches() {
    let (bb, mut ps) = tiny();
    zero(&mut ps, "m.rebuild.l2.w");
    zero(&mut ps, "m.rebuild.l2.b");
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let out = bb.complete(&mut g, &b, &cloud(32, 7)).unwrap();
    let (coarse, fine) = (g.value(out.coarse), g.value(out.fine));
    let r = bb.cfg.r();
    for i in 0..fine.rows() {
        assert_eq!(fine.row(i), coarse.row(i / r));
    }
}

#[test]
fn rebuild_translates_with_coarse() {
    let (bb, ps) = tiny();
    let mut g = Graph::new();
    let b = bb.bind(&mut g, &ps, false);
    let out = bb.complete(&mut g, &b, &cloud(32, 8)).unwrap();
    let refined = g.constant(Array::full(&[8, 16], 0.3));
    let f1 = bb.rebuild(&mut g, &b, refined, out.coarse).unwrap();
    let t = g.constant(Array::vector(vec![1.0, -2.0, 0.5]));
    let moved = g.add(out.coarse, t).unwrap();
    let f2 = bb.rebuild(&mut g, &b, refined, moved).unwrap();
    let (a, c) = (g.value(f1), g.value(f2));
    for i in 0..a.rows() {
        let d: Vec<f64> = (0..3).map(|j| c.at(i, j) - a.at(i, j)).collect();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (bb, ps) = tiny();
    let c = cloud(32, 9);
    let w = Array::new(vec![8, 16], (0..128).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect()).unwrap();
    let rep = check_subset(&ps, |n| Backbone::is_encoder_param(&n[2..]), 300, |g, b| {
        let t = bb.encode_cloud(g, b, &c)?;
        let wv = g.constant(w.clone());
        let y = g.mul(t.feats, wv)?;
        g.sum(y)
    });
    assert!(rep.passed(), "max rel error {}", rep.max_rel_error());
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (bb, ps) = tiny();
    let c = cloud(32, 10);
    let rep = check_subset(&ps, |n| n.starts_with("m.dec") || n.starts_with("m.query"), 300, |g, b| {
        let t = bb.encode_cloud(g, b, &c)?;
        let (_, q) = bb.generate_queries(g, b, &t)?;
        let d = bb.decode(g, b, q, &t)?;
        let s = g.square(d)?;
        g.mean(s)
    });
    assert!(rep.passed(), "max rel error {}", rep.max_rel_error());
}

#[test]
fn end_to_end_chamfer_gradient() {
    let (bb, ps) = tiny();
    let x = cloud(32, 11);
    let gt = cloud(128, 12);
    for variant in [ChamferVariant::L1, ChamferVariant::L2] {
        let rep = check_subset(&ps, |_| true, 300, |g, b| {
            let out = bb.complete(g, b, &x)?;
            chamfer_grad(g, out.fine, &gt, variant)
        });
        assert!(rep.passed(), "{variant:?}: max rel error {}", rep.max_rel_error());
    }
}

#[test]
fn encoder_token_count_independent_of_resolution() {
    let (bb, ps) = tiny();
    for n in [32, 64, 128] {
        let (centers, f) = bb.infer_tokens(&ps, &cloud(n, n as u64)).unwrap();
        assert_eq!(centers.len(), 8);
        assert_eq!(f.shape(), [8, 16]);
    }
}
