use super::{Array, Graph, Var};
use crate::error::{ensure, Result};
use crate::rng::SplitMix64;

/// Which coordinates of the parameters a check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// `count` coordinates drawn uniformly over all parameters.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |numeric|)`
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_error > self.tol)
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + h) - f(x - h)) / 2h`.
///
/// `build` receives a fresh graph and one parameter node per entry of `params`
/// and must return a scalar node.
pub fn grad_check<F>(build: F, params: &[Array], h: f64, tol: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    ensure!(h > 0.0, "grad_check step must be positive");
    ensure!(!params.is_empty(), "grad_check needs at least one parameter");

    let eval = |values: &[Array]| -> Result<f64> {
        let mut g = Graph::new().with_finite_checks(true);
        let vars: Vec<Var> = values.iter().map(|a| g.param(a.clone())).collect();
        let root = build(&mut g, &vars)?;
        ensure!(g.value(root).len() == 1, "grad_check function must be scalar");
        Ok(g.value(root).item())
    };

    let mut g = Graph::new().with_finite_checks(true);
    let vars: Vec<Var> = params.iter().map(|a| g.param(a.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Array> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect();

    let coords: Vec<(usize, usize)> = match probe {
        Probe::All => params.iter().enumerate().flat_map(|(p, a)| (0..a.len()).map(move |i| (p, i))).collect(),
        Probe::Random { count, seed } => {
            let total: usize = params.iter().map(Array::len).sum();
            let mut rng = SplitMix64::new(seed);
            (0..count)
                .map(|_| {
                    let mut flat = rng.below(total as u64) as usize;
                    let mut p = 0;
                    while flat >= params[p].len() {
                        flat -= params[p].len();
                        p += 1;
                    }
                    (p, flat)
                })
                .collect()
        }
    };

    let mut work = params.to_vec();
    let mut entries = Vec::with_capacity(coords.len());
    for (p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - h;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[p].data()[i];
        entries.push(GradCheckEntry {
            param: p,
            index: i,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / numeric.abs().max(1.0),
        });
    }
    Ok(GradCheckReport { entries, tol })
}
