use super::loss::{distill_loss, match_tokens, CascadeMode, LossConfig, TokenTarget};
use crate::autodiff::{Array, Bound, Graph, ParamSet, Var};
use crate::backbone::{Backbone, BackboneConfig, CompletionOutput, FeatureTokens};
use crate::error::{ensure, Error, Result};
use crate::geometry::{fps, PointCloud};
use crate::metrics::{chamfer_grad, ChamferVariant};

pub const RECON_PREFIX: &str = "recon";
pub const AUX_PREFIX: &str = "aux";
pub const MAIN_PREFIX: &str = "main";
pub const FUSE_PREFIX: &str = "fuse";

/// Architecture of a completion pipeline: the stage-1 reconstruction network
/// `psi1`, the auxiliary encoder `phi`, the fusion layer and the main network `psi2`.
///
/// With [`CascadeMode::None`] only `psi2` is used. With
/// [`CascadeMode::Progressive`] `psi2` consumes the output of `psi1` directly.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub mode: CascadeMode,
    pub psi1: Option<Backbone>,
    pub phi: Option<Backbone>,
    pub psi2: Backbone,
}

/// Output of one pipeline forward pass.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub out: CompletionOutput,
    /// Auxiliary tokens `phi(P_rec)` in auxiliary mode.
    pub z_aux: Option<FeatureTokens>,
}

impl CascadeModel {
    /// `cfg` describes the main network on `N` inputs with factor 4.
    pub fn new(mode: CascadeMode, cfg: BackboneConfig) -> Result<Self> {
        let n = cfg.n_in;
        Ok(match mode {
            CascadeMode::None => Self { mode, psi1: None, phi: None, psi2: Backbone::new(cfg, MAIN_PREFIX)? },
            CascadeMode::Auxiliary => Self {
                mode,
                psi1: Some(Backbone::new(cfg.with_io(n, 4), RECON_PREFIX)?),
                phi: Some(Backbone::new(cfg.with_io(4 * n, 4), AUX_PREFIX)?),
                psi2: Backbone::new(cfg, MAIN_PREFIX)?,
            },
            CascadeMode::Progressive => Self {
                mode,
                psi1: Some(Backbone::new(cfg.with_io(n, 2), RECON_PREFIX)?),
                phi: None,
                psi2: Backbone::new(cfg.with_io(2 * n, 2), MAIN_PREFIX)?,
            },
        })
    }

    pub fn input_size(&self) -> usize {
        self.psi1.as_ref().unwrap_or(&self.psi2).cfg.n_in
    }

    pub fn output_size(&self) -> usize {
        self.psi2.cfg.n_out()
    }

    /// Checks that `params` holds every tensor the pipeline reads.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if let Some(p1) = &self.psi1 {
            p1.check_params(params, false)?;
        }
        if let Some(phi) = &self.phi {
            phi.check_params(params, true)?;
            let c = self.psi2.cfg.c;
            for (name, shape) in fusion_shapes(c) {
                let a = params.require(&name)?;
                ensure!(a.shape() == shape.as_slice(), "parameter `{name}` has shape {:?}, expected {shape:?}", a.shape());
            }
        }
        self.psi2.check_params(params, false)
    }

    /// Stage-1 output `psi1(x).fine`, gradient-free.
    pub fn reconstruct_shape(&self, params: &ParamSet, x: &PointCloud) -> Result<PointCloud> {
        let p1 = self.psi1.as_ref().ok_or_else(|| Error::contract("reconstruct_shape needs a stage-1 network"))?;
        reconstruct_shape(p1, params, x)
    }

    /// Forward pass. `p_rec` is the stage-1 output; pass it when it is cached,
    /// otherwise it is computed from the bound stage-1 network's values.
    ///
    /// Teacher A runs this same pipeline with the ground truth in place of `p_rec`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: &PointCloud, p_rec: Option<&PointCloud>) -> Result<PipelineOutput> {
        match self.mode {
            CascadeMode::None => Ok(PipelineOutput { out: self.psi2.complete(g, b, x)?, z_aux: None }),
            CascadeMode::Auxiliary => {
                let phi = self.phi.as_ref().expect("auxiliary mode has phi");
                let owned;
                let p_rec = match p_rec {
                    Some(p) => p,
                    None => {
                        owned = self.stage1_from_graph(g, b, x)?;
                        &owned
                    }
                };
                ensure!(x.len() == self.psi2.cfg.n_in, "complete_fused: input has {} points, expected {}", x.len(), self.psi2.cfg.n_in);
                let z0 = self.psi2.encode_cloud(g, b, x)?;
                let z_aux = aux_encode(g, b, phi, p_rec)?;
                let fused = fuse(g, b, &z0, &z_aux)?;
                let (coarse, fine) = self.psi2.head(g, b, &fused)?;
                Ok(PipelineOutput { out: CompletionOutput { coarse, fine, tokens: z0 }, z_aux: Some(z_aux) })
            }
            CascadeMode::Progressive => {
                let owned;
                let mid = match p_rec {
                    Some(p) => p,
                    None => {
                        owned = self.stage1_from_graph(g, b, x)?;
                        &owned
                    }
                };
                Ok(PipelineOutput { out: self.psi2.complete(g, b, mid)?, z_aux: None })
            }
        }
    }

    /// Runs `psi1` on a scratch graph using the values bound in `b`, so no gradient links back.
    fn stage1_from_graph(&self, g: &Graph, b: &Bound, x: &PointCloud) -> Result<PointCloud> {
        let p1 = self.psi1.as_ref().expect("cascade modes have psi1");
        let mut params = ParamSet::new();
        for (name, _) in p1.param_shapes() {
            params.insert(name.clone(), g.value(b.get(&name)?).clone());
        }
        reconstruct_shape(p1, &params, x)
    }

    /// Gradient-free completion of `x`.
    pub fn infer(&self, params: &ParamSet, x: &PointCloud) -> Result<PointCloud> {
        let p_rec = match self.mode {
            CascadeMode::None => None,
            _ => Some(self.reconstruct_shape(params, x)?),
        };
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let out = self.forward(&mut g, &b, x, p_rec.as_ref())?;
        PointCloud::from_array(g.value(out.out.fine))
    }
}

pub fn reconstruct_shape(psi1: &Backbone, params: &ParamSet, x: &PointCloud) -> Result<PointCloud> {
    psi1.infer(params, x)
}

/// `Z_Aux = encode(extract_proxies(P_rec))`.
pub fn aux_encode(g: &mut Graph, b: &Bound, phi: &Backbone, p_rec: &PointCloud) -> Result<FeatureTokens> {
    ensure!(p_rec.len() == phi.cfg.n_in, "aux_encode: cloud has {} points, expected {}", p_rec.len(), phi.cfg.n_in);
    phi.encode_cloud(g, b, p_rec)
}

pub fn fusion_shapes(c: usize) -> [(String, Vec<usize>); 2] {
    [(format!("{FUSE_PREFIX}.w"), vec![2 * c, c]), (format!("{FUSE_PREFIX}.b"), vec![c])]
}

/// Fusion layer starting as the identity on the main tokens: `W = [I; 0]`, `b = 0`.
pub fn fusion_init(c: usize) -> ParamSet {
    let mut w = Array::zeros(&[2 * c, c]);
    for i in 0..c {
        w.data_mut()[i * c + i] = 1.0;
    }
    let mut ps = ParamSet::new();
    ps.insert(format!("{FUSE_PREFIX}.w"), w);
    ps.insert(format!("{FUSE_PREFIX}.b"), Array::zeros(&[c]));
    ps
}

/// `out_i = [Z0_i, Zaux_m(i)] W + b` with `m = match_tokens(Z0 centers, Zaux centers)`.
pub fn fuse(g: &mut Graph, b: &Bound, z0: &FeatureTokens, zaux: &FeatureTokens) -> Result<FeatureTokens> {
    let (s0, sa) = (g.shape(z0.feats).to_vec(), g.shape(zaux.feats).to_vec());
    ensure!(s0.len() == 2 && s0 == sa, "fuse: token shapes {s0:?} and {sa:?} differ");
    ensure!(zaux.centers.len() == sa[0] && z0.centers.len() == s0[0], "fuse: center counts do not match token rows");
    let m = match_tokens(&z0.centers, &zaux.centers);
    let aligned = g.gather_rows(zaux.feats, &m)?;
    let cat = g.concat_cols(&[z0.feats, aligned])?;
    let w = b.get(&format!("{FUSE_PREFIX}.w"))?;
    let bias = b.get(&format!("{FUSE_PREFIX}.b"))?;
    ensure!(g.shape(w) == [2 * s0[1], s0[1]], "fuse: weight shape {:?}", g.shape(w));
    let y = g.matmul(cat, w)?;
    let feats = g.add(y, bias)?;
    Ok(FeatureTokens { centers: z0.centers.clone(), feats })
}

/// `psi2(phi(psi1(x)), x)`.
pub fn complete_fused(g: &mut Graph, b: &Bound, model: &CascadeModel, x: &PointCloud, p_rec: Option<&PointCloud>) -> Result<PipelineOutput> {
    ensure!(model.mode == CascadeMode::Auxiliary, "complete_fused needs cascade mode auxiliary");
    model.forward(g, b, x, p_rec)
}

/// `stage2(stage1(x).fine)`, both stages upsampling by 2.
pub fn complete_progressive(
    g: &mut Graph,
    stage1: &Backbone,
    stage1_params: &ParamSet,
    stage2: &Backbone,
    b: &Bound,
    x: &PointCloud,
) -> Result<CompletionOutput> {
    ensure!(stage1.cfg.factor == 2 && stage2.cfg.factor == 2, "progressive stages must both upsample by 2");
    let mid = stage1.infer(stage1_params, x)?;
    stage2.complete(g, b, &mid)
}

/// Fixed teacher features for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherTargets {
    /// `phi_A(G)`, target of the auxiliary tokens.
    pub z_a: Option<TokenTarget>,
    /// `phi_B(G_s)`, target of the main encoder tokens.
    pub z_b: Option<TokenTarget>,
}

/// Frozen teacher networks with their parameters.
#[derive(Clone, Debug, Default)]
pub struct TeacherSet {
    /// Auxiliary encoder of teacher A, fed the ground truth.
    pub a: Option<(Backbone, ParamSet)>,
    /// Teacher B's encoder, fed the `2N` ground-truth subsample.
    pub b: Option<(Backbone, ParamSet)>,
}

impl TeacherSet {
    pub fn targets(&self, gt: &PointCloud, gt_sub: &PointCloud) -> Result<TeacherTargets> {
        let run = |t: &Option<(Backbone, ParamSet)>, c: &PointCloud| -> Result<Option<TokenTarget>> {
            t.as_ref()
                .map(|(bb, ps)| bb.infer_tokens(ps, c).map(|(centers, feats)| TokenTarget { centers, feats }))
                .transpose()
        };
        Ok(TeacherTargets { z_a: run(&self.a, gt)?, z_b: run(&self.b, gt_sub)? })
    }
}

/// Scalar nodes of one sample's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l0: Var,
    pub kl_a: Option<Var>,
    pub kl_b: Option<Var>,
    pub total: Var,
}

/// Per-sample data the loss reads.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub x: &'a PointCloud,
    pub gt: &'a PointCloud,
    /// Stage-1 output (cascade modes), or the ground truth for teacher A.
    pub p_rec: Option<&'a PointCloud>,
    /// `fps(G, n_q)`, the coarse target.
    pub gt_coarse: &'a PointCloud,
}

/// Coarse target `fps(G, n_q, start 0)`.
pub fn coarse_target(gt: &PointCloud, n_q: usize) -> Result<PointCloud> {
    Ok(gt.select(&fps(gt, n_q, 0)?))
}

/// `CD_L1(coarse, fps(G, n_q)) + CD_L1(fine, G)`.
pub fn completion_loss(g: &mut Graph, out: &CompletionOutput, gt: &PointCloud, gt_coarse: &PointCloud) -> Result<Var> {
    let a = chamfer_grad(g, out.coarse, gt_coarse, ChamferVariant::L1)?;
    let f = chamfer_grad(g, out.fine, gt, ChamferVariant::L1)?;
    g.add(a, f)
}

/// `L_PC = L_0 + lambda1 * D(Z_A, Z_Aux) + lambda2 * D(Z_B, Z_0)`. Terms with zero weight are not built.
pub fn total_loss(g: &mut Graph, b: &Bound, model: &CascadeModel, inp: LossInputs<'_>, targets: &TeacherTargets, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    ensure!(model.mode == cfg.cascade, "loss cascade mode {} does not match model mode {}", cfg.cascade, model.mode);
    let fwd = model.forward(g, b, inp.x, inp.p_rec)?;
    let l0 = completion_loss(g, &fwd.out, inp.gt, inp.gt_coarse)?;
    let mut total = l0;
    let mut kl_a = None;
    if cfg.lambda1 > 0.0 {
        let t = targets.z_a.as_ref().ok_or_else(|| Error::Config("lambda1 > 0 needs teacher A features".into()))?;
        let z = fwd.z_aux.as_ref().expect("auxiliary mode yields z_aux");
        let d = distill_loss(g, t, z, cfg.distill, cfg.tau)?;
        let w = g.scale(d, cfg.lambda1)?;
        total = g.add(total, w)?;
        kl_a = Some(d);
    }
    let mut kl_b = None;
    if cfg.lambda2 > 0.0 {
        let t = targets.z_b.as_ref().ok_or_else(|| Error::Config("lambda2 > 0 needs teacher B features".into()))?;
        let d = distill_loss(g, t, &fwd.out.tokens, cfg.distill, cfg.tau)?;
        let w = g.scale(d, cfg.lambda2)?;
        total = g.add(total, w)?;
        kl_b = Some(d);
    }
    Ok(LossTerms { l0, kl_a, kl_b, total })
}
