//! Self-check suites behind `cascomp check`: finite-difference gradients of
//! every differentiable op and of the full training loss, and the indexed
//! metrics against quadratic brute force.

use std::time::{Duration, Instant};

use crate::autodiff::{grad_check, Array, Graph, ParamSet, Probe, Var};
use crate::backbone::{Backbone, BackboneConfig, FeatureTokens};
use crate::cascade::{
    coarse_target, distill_loss, fusion_init, total_loss, CascadeMode, CascadeModel, DistillMode, LossConfig, LossInputs,
    TeacherSet, TokenTarget, RECON_PREFIX,
};
use crate::error::Result;
use crate::geometry::{fps, Point, PointCloud};
use crate::metrics::{chamfer_grad, chamfer_points, fscore, ChamferVariant};
use crate::rng::SplitMix64;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;
pub const ORACLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst error seen (relative for gradients, absolute for metrics).
    pub worst: f64,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} worst {:.3e}  {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.elapsed.as_secs_f64()
        )
    }
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

fn uniform(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape matches data")
}

/// Values bounded away from zero so kinks and poles stay out of the stencil.
fn signed(shape: &[usize], rng: &mut SplitMix64) -> Array {
    let mut a = uniform(shape, rng, 0.1, 1.0);
    a.data_mut().iter_mut().for_each(|v| {
        if rng.next_u64() & 1 == 1 {
            *v = -*v
        }
    });
    a
}

fn cloud(n: usize, rng: &mut SplitMix64, half: f64) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half)]).collect())
        .expect("non-empty cloud")
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A named graph builder with the inputs it is checked at.
struct Case {
    name: &'static str,
    build: Build,
    inputs: fn(&mut SplitMix64) -> Vec<Array>,
}

fn case(name: &'static str, inputs: fn(&mut SplitMix64) -> Vec<Array>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, build: Box::new(build), inputs }
}

/// Reduces any node to a scalar through a fixed nonlinear weighting, so that
/// every output coordinate contributes a distinct gradient.
fn reduce(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Array::new(shape, (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect())?;
    let w = g.constant(w);
    let t = g.tanh(v)?;
    let m = g.mul(t, w)?;
    g.sum(m)
}

fn mat(r: usize, c: usize) -> impl Fn(&mut SplitMix64) -> Array {
    move |rng| signed(&[r, c], rng)
}

fn op_cases() -> Vec<Case> {
    macro_rules! unary {
        ($name:literal, $inputs:expr, $op:ident $(, $arg:expr)*) => {
            case($name, $inputs, |g, v| {
                let y = g.$op(v[0] $(, $arg)*)?;
                reduce(g, y)
            })
        };
    }
    macro_rules! binary {
        ($name:literal, $inputs:expr, $op:ident) => {
            case($name, $inputs, |g, v| {
                let y = g.$op(v[0], v[1])?;
                reduce(g, y)
            })
        };
    }
    vec![
        binary!("add", |r| vec![mat(4, 3)(r), mat(4, 3)(r)], add),
        binary!("add (broadcast)", |r| vec![mat(4, 3)(r), mat(4, 1)(r)], add),
        binary!("sub (broadcast)", |r| vec![mat(4, 3)(r), signed(&[3], r)], sub),
        binary!("mul", |r| vec![mat(4, 3)(r), mat(4, 3)(r)], mul),
        binary!("mul (broadcast)", |r| vec![mat(4, 3)(r), mat(4, 1)(r)], mul),
        unary!("scale", |r| vec![mat(3, 3)(r)], scale, -1.7),
        unary!("offset", |r| vec![mat(3, 3)(r)], offset, 0.4),
        case("scale_by", |r| vec![mat(3, 4)(r), signed(&[1], r)], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            reduce(g, y)
        }),
        unary!("relu", |r| vec![mat(5, 3)(r)], relu),
        unary!("gelu", |r| vec![mat(5, 3)(r)], gelu),
        unary!("tanh", |r| vec![mat(5, 3)(r)], tanh),
        unary!("exp", |r| vec![mat(5, 3)(r)], exp),
        unary!("log", |r| vec![uniform(&[5, 3], r, 0.2, 2.0)], log),
        unary!("square", |r| vec![mat(5, 3)(r)], square),
        unary!("row_norm", |r| vec![mat(5, 3)(r)], row_norm),
        unary!("sum", |r| vec![mat(4, 3)(r)], sum),
        unary!("mean", |r| vec![mat(4, 3)(r)], mean),
        unary!("sum_axis 0", |r| vec![mat(4, 3)(r)], sum_axis, 0),
        unary!("sum_axis 1", |r| vec![mat(4, 3)(r)], sum_axis, 1),
        unary!("mean_axis 0", |r| vec![mat(4, 3)(r)], mean_axis, 0),
        unary!("mean_axis 1", |r| vec![mat(4, 3)(r)], mean_axis, 1),
        binary!("matmul", |r| vec![mat(4, 5)(r), mat(5, 3)(r)], matmul),
        binary!("matmul_nt", |r| vec![mat(4, 5)(r), mat(3, 5)(r)], matmul_nt),
        unary!("transpose", |r| vec![mat(4, 2)(r)], transpose),
        unary!("softmax 0", |r| vec![mat(4, 3)(r)], softmax, 0),
        unary!("softmax 1", |r| vec![mat(4, 3)(r)], softmax, 1),
        unary!("log_softmax 1", |r| vec![mat(4, 3)(r)], log_softmax, 1),
        case("layernorm", |r| vec![mat(4, 6)(r), signed(&[6], r), signed(&[6], r)], |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
            reduce(g, y)
        }),
        unary!("gather_rows", |r| vec![mat(4, 3)(r)], gather_rows, &[3, 0, 0, 2, 1, 3]),
        case("concat_cols", |r| vec![mat(3, 2)(r), mat(3, 4)(r)], |g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            reduce(g, y)
        }),
        case("concat_rows", |r| vec![mat(2, 3)(r), mat(4, 3)(r)], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            reduce(g, y)
        }),
        unary!("slice_cols", |r| vec![mat(3, 5)(r)], slice_cols, 1, 3),
        unary!("reshape", |r| vec![mat(4, 3)(r)], reshape, &[2, 6]),
        unary!("segment_max", |r| vec![mat(6, 3)(r)], segment_max, 3),
        case("two consumers", |r| vec![mat(3, 3)(r)], |g, v| {
            let a = g.square(v[0])?;
            let b = g.matmul(v[0], a)?;
            reduce(g, b)
        }),
    ]
}

fn fixed_cloud(seed: u64, n: usize) -> PointCloud {
    cloud(n, &mut SplitMix64::new(seed), 1.0)
}

fn metric_cases() -> Vec<Case> {
    let q = fixed_cloud(101, 16);
    let q2 = q.clone();
    let centers: Vec<Point> = fixed_cloud(102, 6).points().to_vec();
    let c2 = centers.clone();
    let teacher = signed(&[6, 5], &mut SplitMix64::new(103));
    let t2 = teacher.clone();
    vec![
        case("chamfer_grad L1", |r| vec![cloud(16, r, 1.0).to_array()], move |g, v| chamfer_grad(g, v[0], &q, ChamferVariant::L1)),
        case("chamfer_grad L2", |r| vec![cloud(16, r, 1.0).to_array()], move |g, v| chamfer_grad(g, v[0], &q2, ChamferVariant::L2)),
        case("distill KL", |r| vec![signed(&[6, 5], r)], move |g, v| {
            let s = FeatureTokens { centers: centers.clone(), feats: v[0] };
            distill_loss(g, &TokenTarget { centers: centers.clone(), feats: teacher.clone() }, &s, DistillMode::Kl, 2.0)
        }),
        case("distill MSE", |r| vec![signed(&[6, 5], r)], move |g, v| {
            let s = FeatureTokens { centers: c2.clone(), feats: v[0] };
            distill_loss(g, &TokenTarget { centers: c2.clone(), feats: t2.clone() }, &s, DistillMode::Mse, 1.0)
        }),
    ]
}

fn timed(name: impl Into<String>, f: impl FnOnce() -> Result<(bool, f64)>) -> Result<CheckOutcome> {
    let t = Instant::now();
    let (passed, worst) = f()?;
    Ok(CheckOutcome { name: name.into(), passed, worst, elapsed: t.elapsed() })
}

/// Tiny auxiliary model with teachers, used for whole-loss checks.
struct LossFixture {
    model: CascadeModel,
    params: ParamSet,
    x: PointCloud,
    gt: PointCloud,
    gt_coarse: PointCloud,
    p_rec: PointCloud,
    targets: crate::cascade::TeacherTargets,
}

fn loss_fixture(seed: u64) -> Result<LossFixture> {
    let cfg = BackboneConfig::tiny();
    let model = CascadeModel::new(CascadeMode::Auxiliary, cfg)?;
    let psi1 = model.psi1.as_ref().expect("auxiliary mode has stage one");
    let phi = model.phi.as_ref().expect("auxiliary mode has an auxiliary encoder");
    let mut params = psi1.init(seed, "recon");
    let phi_init = phi.init_encoder(seed, "recon");
    params.merge(phi_init);
    params.merge(fusion_init(cfg.c));
    params.merge(model.psi2.init(seed, "main"));
    model.check_params(&params)?;

    let mut rng = SplitMix64::named(seed, "data");
    let x = cloud(cfg.n_in, &mut rng, 1.0);
    let gt = cloud(cfg.n_out(), &mut rng, 1.0);
    let gt_sub = gt.select(&fps(&gt, 2 * cfg.n_in, 0)?);
    let gt_coarse = coarse_target(&gt, cfg.n_q)?;
    let p_rec = model.reconstruct_shape(&params, &x)?;
    let ta = Backbone::new(cfg.with_io(cfg.n_out(), 4), "aux")?;
    let tb = Backbone::new(cfg.with_io(2 * cfg.n_in, 2), "main")?;
    let teachers = TeacherSet {
        a: Some((ta.clone(), ta.init_encoder(seed ^ 1, "main"))),
        b: Some((tb.clone(), tb.init(seed ^ 2, "main"))),
    };
    let targets = teachers.targets(&gt, &gt_sub)?;
    Ok(LossFixture { model, params, x, gt, gt_coarse, p_rec, targets })
}

/// Full training loss of the tiny student, for both distillation modes,
/// probed at random coordinates of every trainable tensor.
fn total_loss_checks(seed: u64, probes: usize, tol: f64) -> Result<Vec<CheckOutcome>> {
    let f = loss_fixture(seed)?;
    let recon = format!("{RECON_PREFIX}.");
    let names: Vec<String> = f.params.names().filter(|n| !n.starts_with(&recon)).map(String::from).collect();
    let values: Vec<Array> = names.iter().map(|n| f.params.require(n).cloned()).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for distill in [DistillMode::Kl, DistillMode::Mse] {
        let cfg = LossConfig { distill, tau: 1.5, ..LossConfig::default() };
        out.push(timed(format!("training loss ({distill})"), || {
            let rep = grad_check(
                |g: &mut Graph, vars: &[Var]| {
                    let mut b = f.params.bind(g, |n| n.starts_with(&recon), |_| false);
                    for (n, &v) in names.iter().zip(vars) {
                        b.insert(n.clone(), v);
                    }
                    let inp = LossInputs { x: &f.x, gt: &f.gt, p_rec: Some(&f.p_rec), gt_coarse: &f.gt_coarse };
                    Ok(total_loss(g, &b, &f.model, inp, &f.targets, &cfg)?.total)
                },
                &values,
                GRAD_STEP,
                tol,
                Probe::Random { count: probes, seed },
            )?;
            Ok((rep.passed(), rep.max_rel_error()))
        })?);
    }
    Ok(out)
}

/// Finite-difference checks of every differentiable op over `seeds` random
/// draws each, then of the whole training loss on the tiny configuration.
pub fn grad_suite(seeds: u64, tol: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for c in op_cases().into_iter().chain(metric_cases()) {
        out.push(timed(c.name, || {
            let mut worst = 0.0f64;
            let mut passed = true;
            for s in 0..seeds {
                let mut rng = SplitMix64::named(s, c.name);
                let inputs = (c.inputs)(&mut rng);
                let rep = grad_check(|g, v| (c.build)(g, v), &inputs, GRAD_STEP, tol, Probe::All)?;
                worst = worst.max(rep.max_rel_error());
                passed &= rep.passed();
            }
            Ok((passed, worst))
        })?);
    }
    out.extend(total_loss_checks(7, 300, tol)?);
    Ok(out)
}

fn brute_d2(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum::<f64>()).fold(f64::INFINITY, f64::min))
        .collect()
}

fn brute_chamfer(p: &[Point], q: &[Point], variant: ChamferVariant) -> f64 {
    let m = |d: Vec<f64>| {
        let n = d.len() as f64;
        d.into_iter().map(|v| if variant == ChamferVariant::L1 { v.sqrt() } else { v }).sum::<f64>() / n
    };
    0.5 * (m(brute_d2(p, q)) + m(brute_d2(q, p)))
}

fn brute_fscore(p: &[Point], q: &[Point], tau: f64) -> f64 {
    let frac = |d: Vec<f64>| d.iter().filter(|v| v.sqrt() < tau).count() as f64 / d.len() as f64;
    let (pr, rc) = (frac(brute_d2(p, q)), frac(brute_d2(q, p)));
    if pr + rc == 0.0 {
        0.0
    } else {
        2.0 * pr * rc / (pr + rc)
    }
}

/// Indexed CD-L1, CD-L2 and F-Score against brute force on `pairs` random
/// cloud pairs of 1 to `max_points` points. Spreads vary per pair so the
/// F-Score threshold is met by some, all or none of the points.
pub fn oracle_suite(pairs: usize, max_points: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut worst = [0.0f64; 3];
    let t = Instant::now();
    let mut rng = SplitMix64::named(seed, "oracle");
    for _ in 0..pairs {
        let np = 1 + rng.below(max_points as u64) as usize;
        let nq = 1 + rng.below(max_points as u64) as usize;
        let half = [0.004, 0.03, 0.3, 1.0][rng.below(4) as usize];
        let p = cloud(np, &mut rng, half);
        let mut q = cloud(nq, &mut rng, half);
        if rng.below(4) == 0 {
            // shared points exercise exact ties and zero distances
            let mut pts = q.points().to_vec();
            pts.extend(p.points().iter().take(nq / 2));
            q = PointCloud::new(pts)?;
        }
        let (pp, qp) = (p.points(), q.points());
        worst[0] = worst[0].max((chamfer_points(pp, qp, ChamferVariant::L1)? - brute_chamfer(pp, qp, ChamferVariant::L1)).abs());
        worst[1] = worst[1].max((chamfer_points(pp, qp, ChamferVariant::L2)? - brute_chamfer(pp, qp, ChamferVariant::L2)).abs());
        worst[2] = worst[2].max((fscore(&p, &q, 0.01)? - brute_fscore(pp, qp, 0.01)).abs());
    }
    let elapsed = t.elapsed();
    Ok(["CD-L1 vs brute force", "CD-L2 vs brute force", "F-Score vs brute force"]
        .iter()
        .zip(worst)
        .map(|(name, w)| CheckOutcome { name: name.to_string(), passed: w <= ORACLE_TOL, worst: w, elapsed })
        .collect())
}
