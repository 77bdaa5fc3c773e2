use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Array, Graph, Var};
use crate::backbone::FeatureTokens;
use crate::error::{ensure, Error, Result};
use crate::geometry::{dist2, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    Kl,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CascadeMode {
    /// Stage-1 reconstruction enters stage 2 as fused auxiliary features.
    Auxiliary,
    /// Stage 2 consumes the stage-1 cloud directly (two chained 2x stages).
    Progressive,
    /// Single-stage network.
    None,
}

macro_rules! named_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " `{}` (expected one of: {})"), s, [$($s),+].join(", ")))),
                }
            }
        }
    };
}

named_enum!(DistillMode, "distill mode", DistillMode::Kl => "kl", DistillMode::Mse => "mse");
named_enum!(CascadeMode, "cascade mode", CascadeMode::Auxiliary => "auxiliary", CascadeMode::Progressive => "progressive", CascadeMode::None => "none");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the auxiliary-feature distillation term.
    pub lambda1: f64,
    /// Weight of the encoder-feature distillation term.
    pub lambda2: f64,
    pub tau: f64,
    pub distill: DistillMode,
    pub cascade: CascadeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, tau: 1.0, distill: DistillMode::Kl, cascade: CascadeMode::Auxiliary }
    }
}

impl LossConfig {
    /// Plain completion loss, no cascade, no distillation.
    pub fn plain() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, cascade: CascadeMode::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad(format!("lambda1 must be a non-negative number, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda2 must be a non-negative number, got {}", self.lambda2));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.lambda1 > 0.0 && self.cascade != CascadeMode::Auxiliary {
            return bad(format!("lambda1 > 0 needs cascade=auxiliary (got {})", self.cascade));
        }
        Ok(())
    }
}

/// For each student center, the index of the nearest teacher center (ties to the lowest index).
pub fn match_tokens(student: &[Point], teacher: &[Point]) -> Vec<usize> {
    student
        .iter()
        .map(|s| {
            let mut best = (f64::INFINITY, 0);
            for (j, t) in teacher.iter().enumerate() {
                let d = dist2(s, t);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Teacher features detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTarget {
    pub centers: Vec<Point>,
    /// `n_c x C`
    pub feats: Array,
}

/// Distillation of `student` toward a fixed teacher, after aligning teacher
/// rows to student centers with [`match_tokens`].
///
/// KL: `tau^2 / n_c * sum_i sum_c p_ic (ln p_ic - ln q_ic)` with `p_i = softmax(t_i / tau)`,
/// `q_i = softmax(s_i / tau)`. MSE: mean squared difference over all entries.
pub fn distill_loss(g: &mut Graph, teacher: &TokenTarget, student: &FeatureTokens, mode: DistillMode, tau: f64) -> Result<Var> {
    ensure!(tau > 0.0, "distill_loss: tau must be positive");
    let s_shape = g.shape(student.feats).to_vec();
    ensure!(s_shape.len() == 2, "distill_loss: student features must be rank 2");
    ensure!(
        teacher.feats.rank() == 2 && teacher.feats.cols() == s_shape[1] && teacher.feats.rows() == teacher.centers.len(),
        "distill_loss: teacher {:?} vs student {:?}",
        teacher.feats.shape(),
        s_shape
    );
    ensure!(student.centers.len() == s_shape[0], "distill_loss: {} student centers for {} rows", student.centers.len(), s_shape[0]);
    ensure!(teacher.centers.len() == s_shape[0], "distill_loss: {} teacher tokens for {} student tokens", teacher.centers.len(), s_shape[0]);
    let m = match_tokens(&student.centers, &teacher.centers);
    let (n, c) = (s_shape[0], s_shape[1]);
    let mut aligned = Vec::with_capacity(n * c);
    for &j in &m {
        aligned.extend_from_slice(teacher.feats.row(j));
    }
    let aligned = Array::new(vec![n, c], aligned)?;
    match mode {
        DistillMode::Mse => {
            let t = g.constant(aligned);
            let d = g.sub(student.feats, t)?;
            let sq = g.square(d)?;
            g.mean(sq)
        }
        DistillMode::Kl => {
            // same kernels as the student side, so equal logits give exactly zero
            let logp = {
                let mut tg = Graph::new();
                let t = tg.constant(aligned);
                let t = tg.scale(t, 1.0 / tau)?;
                let l = tg.log_softmax(t, 1)?;
                tg.value(l).clone()
            };
            let p = logp.map(f64::exp);
            let lp = g.constant(logp);
            let pv = g.constant(p);
            let s = g.scale(student.feats, 1.0 / tau)?;
            let lq = g.log_softmax(s, 1)?;
            let d = g.sub(lp, lq)?;
            let w = g.mul(d, pv)?;
            let total = g.sum(w)?;
            g.scale(total, tau * tau / n as f64)
        }
    }
}
