//! Phase setup, the training loop and trained-model reconstruction.

use rayon::prelude::*;

use super::adam::{adam_step, AdamState};
use super::checkpoint::{Checkpoint, ResumeState};
use super::config::{Phase, RunConfig};
use super::eval::{evaluate, EvalReport, Predictor};
use crate::autodiff::{Array, Graph, ParamSet};
use crate::backbone::{Backbone, BackboneConfig};
use crate::cascade::{
    coarse_target, fusion_init, total_loss, CascadeMode, CascadeModel, LossConfig, LossInputs, TeacherSet,
    TeacherTargets, AUX_PREFIX, FUSE_PREFIX, MAIN_PREFIX, RECON_PREFIX,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::MetricReport;
use crate::rng::{derive_seed, fnv1a, SplitMix64};
use crate::shapegen::{teacher_b_input, Dataset, Sample};

pub const LOG_HEADER: &str = "epoch,phase,L0,LKLA,LKLB,LPC,cd_l1,cd_l2,fscore";

/// Checkpoints of earlier phases that a phase may read.
#[derive(Clone, Debug, Default)]
pub struct Prerequisites {
    pub recon: Option<Checkpoint>,
    pub teacher_a: Option<Checkpoint>,
    pub teacher_b: Option<Checkpoint>,
}

impl Prerequisites {
    fn get(&self, phase: Phase, needed_by: &str) -> Result<&Checkpoint> {
        let slot = match phase {
            Phase::Recon => &self.recon,
            Phase::TeacherA => &self.teacher_a,
            Phase::TeacherB => &self.teacher_b,
            _ => unreachable!("only recon and teacher checkpoints are prerequisites"),
        };
        let ck = slot.as_ref().ok_or_else(|| Error::Config(format!("{needed_by} requires a `{phase}` checkpoint, none was given")))?;
        if ck.phase != phase.name() {
            return Err(Error::Config(format!("{needed_by} expected a `{phase}` checkpoint, got one from phase `{}`", ck.phase)));
        }
        Ok(ck)
    }
}

/// One epoch of the metric log. Test metrics are raw (unscaled).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub l0: f64,
    pub kl_a: f64,
    pub kl_b: f64,
    pub lpc: f64,
    pub test: Option<MetricReport>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let test = match &self.test {
            Some(r) => r.csv_fields(),
            None => ",,".to_string(),
        };
        format!("{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}", self.epoch, self.phase, self.l0, self.kl_a, self.kl_b, self.lpc, test)
    }

    fn to_numeric(&self) -> [f64; 8] {
        let t = self.test.unwrap_or(MetricReport { cd_l1: f64::NAN, cd_l2: f64::NAN, fscore_1pct: f64::NAN });
        [self.epoch as f64, self.l0, self.kl_a, self.kl_b, self.lpc, t.cd_l1, t.cd_l2, t.fscore_1pct]
    }

    fn from_numeric(phase: Phase, r: &[f64]) -> Self {
        let test = (!r[5].is_nan()).then(|| MetricReport { cd_l1: r[5], cd_l2: r[6], fscore_1pct: r[7] });
        LogRow { epoch: r[0] as usize, phase, l0: r[1], kl_a: r[2], kl_b: r[3], lpc: r[4], test }
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn log_array(rows: &[LogRow]) -> Array {
    let data: Vec<f64> = rows.iter().flat_map(|r| r.to_numeric()).collect();
    Array::new(vec![rows.len(), 8], data).expect("8 columns per row")
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Test report after the last epoch run (absent when the run stopped early
    /// or the test split is empty).
    pub report: Option<EvalReport>,
}

/// Controls for interrupting and resuming a phase.
#[derive(Default)]
pub struct RunControl<'a> {
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs and return a resumable checkpoint.
    pub stop_after: Option<usize>,
    /// Receives each periodic resume snapshot.
    pub on_snapshot: Option<&'a mut dyn FnMut(&Checkpoint) -> Result<()>>,
}

/// Everything that is fixed for the duration of a phase.
pub struct PhaseSetup {
    pub phase: Phase,
    pub model: CascadeModel,
    pub loss: LossConfig,
    pub init: ParamSet,
    /// Parameter name prefixes that receive updates.
    pub trainable: Vec<String>,
}

impl PhaseSetup {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Network input for a sample.
    pub fn input(&self, s: &Sample) -> Result<PointCloud> {
        match self.phase {
            Phase::TeacherB => teacher_b_input(s),
            _ => Ok(s.partial.clone()),
        }
    }
}

fn single(cfg: BackboneConfig, prefix: &str) -> Result<CascadeModel> {
    Ok(CascadeModel { mode: CascadeMode::None, psi1: None, phi: None, psi2: Backbone::new(cfg, prefix)? })
}

/// Teacher A: the auxiliary pipeline with its auxiliary branch fed the ground truth.
fn teacher_a_model(cfg: BackboneConfig) -> Result<CascadeModel> {
    let mut m = CascadeModel::new(CascadeMode::Auxiliary, cfg)?;
    m.psi1 = None;
    Ok(m)
}

fn teacher_b_backbone(cfg: BackboneConfig) -> Result<Backbone> {
    Backbone::new(cfg.with_io(2 * cfg.n_in, 2), MAIN_PREFIX)
}

/// Encoder tensors of `src` (under `from.`) renamed to `to.`.
fn copy_encoder(src: &ParamSet, from: &str, to: &str) -> ParamSet {
    let head = format!("{from}.");
    src.iter()
        .filter(|(k, _)| k.starts_with(&head) && Backbone::is_encoder_param(&k[head.len()..]))
        .map(|(k, v)| (format!("{to}.{}", &k[head.len()..]), v.clone()))
        .collect()
}

fn init_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.train.master_seed, fnv1a(b"init"))
}

fn recon_factor_of(ck: &Checkpoint) -> Result<usize> {
    Ok(RunConfig::parse(&ck.config, "recon checkpoint")?.train.recon_factor)
}

/// Builds the model, loss, initial parameters and trainable set of `phase`.
pub fn setup_phase(cfg: &RunConfig, phase: Phase, pre: &Prerequisites) -> Result<PhaseSetup> {
    cfg.validate()?;
    let bb = cfg.backbone();
    let seed = init_seed(cfg);
    let who = format!("phase `{phase}`");
    let plain = LossConfig::plain();
    Ok(match phase {
        Phase::Recon => {
            let model = single(bb.with_io(bb.n_in, cfg.train.recon_factor), RECON_PREFIX)?;
            let init = model.psi2.init(seed, "recon");
            PhaseSetup { phase, model, loss: plain, init, trainable: vec![format!("{RECON_PREFIX}.")] }
        }
        Phase::Baseline => {
            let model = single(bb, MAIN_PREFIX)?;
            let init = model.psi2.init(seed, "main");
            PhaseSetup { phase, model, loss: plain, init, trainable: vec![format!("{MAIN_PREFIX}.")] }
        }
        Phase::TeacherB => {
            let model = CascadeModel { mode: CascadeMode::None, psi1: None, phi: None, psi2: teacher_b_backbone(bb)? };
            let init = model.psi2.init(seed, "main");
            PhaseSetup { phase, model, loss: plain, init, trainable: vec![format!("{MAIN_PREFIX}.")] }
        }
        Phase::TeacherA => {
            let recon = pre.get(Phase::Recon, &who)?;
            let model = teacher_a_model(bb)?;
            let mut init = copy_encoder(&recon.params, RECON_PREFIX, AUX_PREFIX);
            init.merge(fusion_init(bb.c));
            init.merge(model.psi2.init(seed, "main"));
            model.check_params(&init)?;
            let trainable = [AUX_PREFIX, FUSE_PREFIX, MAIN_PREFIX].map(|p| format!("{p}.")).to_vec();
            PhaseSetup { phase, model, loss: LossConfig { cascade: CascadeMode::Auxiliary, ..plain }, init, trainable }
        }
        Phase::Student => {
            let loss = cfg.loss;
            let model = CascadeModel::new(loss.cascade, bb)?;
            let mut init = ParamSet::new();
            if loss.cascade != CascadeMode::None {
                let recon = pre.get(Phase::Recon, &who)?;
                let want = if loss.cascade == CascadeMode::Progressive { 2 } else { 4 };
                let got = recon_factor_of(recon)?;
                if got != want {
                    return Err(Error::Config(format!("cascade={} needs a recon checkpoint with recon_factor={want}, got {got}", loss.cascade)));
                }
                init.copy_prefix(&recon.params, &format!("{RECON_PREFIX}."), &format!("{RECON_PREFIX}."));
                if loss.cascade == CascadeMode::Auxiliary {
                    init.merge(copy_encoder(&recon.params, RECON_PREFIX, AUX_PREFIX));
                    init.merge(fusion_init(bb.c));
                }
            }
            init.merge(model.psi2.init(seed, "main"));
            model.check_params(&init)?;
            let mut trainable = vec![format!("{MAIN_PREFIX}.")];
            if loss.cascade == CascadeMode::Auxiliary {
                trainable.extend([format!("{AUX_PREFIX}."), format!("{FUSE_PREFIX}.")]);
            }
            PhaseSetup { phase, model, loss, init, trainable }
        }
    })
}

/// Frozen teachers needed by the student loss.
pub fn teachers_for(cfg: &RunConfig, phase: Phase, loss: &LossConfig, pre: &Prerequisites) -> Result<TeacherSet> {
    let mut t = TeacherSet::default();
    if phase != Phase::Student {
        return Ok(t);
    }
    let bb = cfg.backbone();
    let who = format!("phase `{phase}` with lambda1={}", loss.lambda1);
    if loss.lambda1 > 0.0 {
        let ck = pre.get(Phase::TeacherA, &who)?;
        let phi_a = Backbone::new(bb.with_io(4 * bb.n_in, 4), AUX_PREFIX)?;
        phi_a.check_params(&ck.params, true)?;
        t.a = Some((phi_a, ck.params.clone()));
    }
    let who = format!("phase `{phase}` with lambda2={}", loss.lambda2);
    if loss.lambda2 > 0.0 {
        let ck = pre.get(Phase::TeacherB, &who)?;
        let phi_b = teacher_b_backbone(bb)?;
        phi_b.check_params(&ck.params, true)?;
        t.b = Some((phi_b, ck.params.clone()));
    }
    Ok(t)
}

/// Precomputed per-sample tensors.
pub struct Item<'a> {
    pub sample: &'a Sample,
    pub x: PointCloud,
    pub p_rec: Option<PointCloud>,
    pub gt_coarse: PointCloud,
    pub targets: TeacherTargets,
}

fn prepare<'a>(setup: &PhaseSetup, teachers: &TeacherSet, samples: &[&'a Sample]) -> Result<Vec<Item<'a>>> {
    samples
        .par_iter()
        .map(|&s| {
            let x = setup.input(s)?;
            let p_rec = match (setup.phase, setup.model.mode) {
                (Phase::TeacherA, _) => Some(s.gt.clone()),
                (_, CascadeMode::None) => None,
                _ => Some(setup.model.reconstruct_shape(&setup.init, &x)?),
            };
            Ok(Item {
                sample: s,
                gt_coarse: coarse_target(&s.gt, setup.model.psi2.cfg.n_q)?,
                targets: teachers.targets(&s.gt, &s.gt_sub)?,
                x,
                p_rec,
            })
        })
        .collect()
}

struct StepOut {
    grads: ParamSet,
    terms: [f64; 4],
}

fn sample_step(setup: &PhaseSetup, params: &ParamSet, item: &Item<'_>) -> Result<StepOut> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |k| setup.is_trainable(k), |_| true);
    let inp = LossInputs { x: &item.x, gt: &item.sample.gt, p_rec: item.p_rec.as_ref(), gt_coarse: &item.gt_coarse };
    let t = total_loss(&mut g, &b, &setup.model, inp, &item.targets, &setup.loss)?;
    let val = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| g.value(v).item());
    let terms = [g.value(t.l0).item(), val(t.kl_a), val(t.kl_b), g.value(t.total).item()];
    g.backward(t.total)?;
    Ok(StepOut { grads: b.grads(&g), terms })
}

fn predict_item(setup: &PhaseSetup, params: &ParamSet, item: &Item<'_>) -> Result<PointCloud> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |k| setup.is_trainable(k), |_| false);
    let out = setup.model.forward(&mut g, &b, &item.x, item.p_rec.as_ref())?;
    PointCloud::from_array(g.value(out.out.fine))
}

fn evaluate_items(setup: &PhaseSetup, params: &ParamSet, items: &[Item<'_>]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<u64, &Item<'_>> = items.iter().map(|i| (i.sample.id, i)).collect();
    let samples: Vec<&Sample> = items.iter().map(|i| i.sample).collect();
    evaluate(&|s: &Sample| predict_item(setup, params, by_id[&s.id]), &samples)
}

fn shuffle_rng(cfg: &RunConfig, epoch: usize) -> SplitMix64 {
    SplitMix64::stream(derive_seed(cfg.train.master_seed, fnv1a(b"shuffle")), epoch as u64)
}

/// Trains `phase` on the train split of `data`, evaluating on its test split.
pub fn run_phase(cfg: &RunConfig, phase: Phase, data: &Dataset, pre: &Prerequisites) -> Result<PhaseOutcome> {
    run_phase_with(cfg, phase, data, pre, RunControl::default())
}

pub fn run_phase_with(cfg: &RunConfig, phase: Phase, data: &Dataset, pre: &Prerequisites, mut ctl: RunControl<'_>) -> Result<PhaseOutcome> {
    let setup = setup_phase(cfg, phase, pre)?;
    if data.n != cfg.dataset.n {
        return Err(Error::Config(format!("dataset has N={}, config says n={}", data.n, cfg.dataset.n)));
    }
    let teachers = teachers_for(cfg, phase, &setup.loss, pre)?;
    let (train, test) = (data.train(), data.test());
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let train_items = prepare(&setup, &teachers, &train)?;
    let test_items = prepare(&setup, &teachers, &test)?;

    let epochs = cfg.epochs_for(phase);
    let config_text = cfg.to_text();
    let mut params = setup.init.clone();
    let mut adam = AdamState::default();
    let mut log: Vec<LogRow> = Vec::new();
    let mut start = 0;
    if let Some(ck) = ctl.resume.take() {
        if ck.phase != phase.name() {
            return Err(Error::Config(format!("resume checkpoint is from phase `{}`, not `{phase}`", ck.phase)));
        }
        if ck.config != config_text {
            return Err(Error::Config("resume checkpoint was written with a different configuration".into()));
        }
        let r = ck.resume.ok_or_else(|| Error::Config("checkpoint holds no resume state".into()))?;
        params = r.params;
        adam = r.adam;
        log = (0..r.log.rows()).map(|i| LogRow::from_numeric(phase, r.log.row(i))).collect();
        start = ck.epoch;
    }

    let snapshot = |epoch: usize, params: &ParamSet, adam: &AdamState, log: &[LogRow]| {
        let mut ck = Checkpoint::new(phase.name(), epoch, shuffle_rng(cfg, epoch).state(), config_text.clone(), params);
        ck.resume = Some(ResumeState { params: params.clone(), adam: adam.clone(), log: log_array(log) });
        ck
    };

    let mut report = None;
    for epoch in start..epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        shuffle_rng(cfg, epoch).shuffle(&mut order);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.train.batch_size) {
            let outs: Vec<StepOut> = batch.par_iter().map(|&i| sample_step(&setup, &params, &train_items[i])).collect::<Result<_>>()?;
            let mut grads = outs[0].grads.zeros_like();
            for o in &outs {
                grads.add_assign(&o.grads)?;
                for (s, t) in sums.iter_mut().zip(o.terms) {
                    *s += t;
                }
            }
            grads.scale(1.0 / outs.len() as f64);
            adam_step(&mut params, &grads, &mut adam, &cfg.train.adam)?;
        }
        let n = train_items.len() as f64;
        let last = epoch + 1 == epochs;
        let every = cfg.train.eval_every;
        let test_report = if !test_items.is_empty() && (last || (every > 0 && (epoch + 1) % every == 0)) {
            let r = evaluate_items(&setup, &params, &test_items)?;
            let mean = r.mean;
            if last {
                report = Some(r);
            }
            Some(mean)
        } else {
            None
        };
        log.push(LogRow { epoch, phase, l0: sums[0] / n, kl_a: sums[1] / n, kl_b: sums[2] / n, lpc: sums[3] / n, test: test_report });
        let done = epoch + 1;
        if ctl.stop_after == Some(done) && !last {
            return Ok(PhaseOutcome { checkpoint: snapshot(done, &params, &adam, &log), log, report: None });
        }
        let ce = cfg.train.checkpoint_every;
        if ce > 0 && done % ce == 0 && !last {
            if let Some(cb) = ctl.on_snapshot.as_mut() {
                cb(&snapshot(done, &params, &adam, &log))?;
            }
        }
    }
    let checkpoint = Checkpoint::new(phase.name(), epochs, shuffle_rng(cfg, epochs).state(), config_text, &params);
    Ok(PhaseOutcome { checkpoint, log, report })
}

/// A checkpoint turned back into a runnable pipeline.
pub struct TrainedModel {
    pub phase: Phase,
    pub config: RunConfig,
    pub model: CascadeModel,
    pub params: ParamSet,
}

impl TrainedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let phase: Phase = ck.phase.parse()?;
        let config = RunConfig::parse(&ck.config, "checkpoint config")?;
        let bb = config.backbone();
        let model = match phase {
            Phase::Recon => single(bb.with_io(bb.n_in, config.train.recon_factor), RECON_PREFIX)?,
            Phase::Baseline => single(bb, MAIN_PREFIX)?,
            Phase::TeacherB => CascadeModel { mode: CascadeMode::None, psi1: None, phi: None, psi2: teacher_b_backbone(bb)? },
            Phase::TeacherA => teacher_a_model(bb)?,
            Phase::Student => CascadeModel::new(config.loss.cascade, bb)?,
        };
        model.check_params(&ck.params)?;
        Ok(Self { phase, config, model, params: ck.params.clone() })
    }

    pub fn input_size(&self) -> usize {
        self.model.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.model.output_size()
    }

    /// Completes a raw input cloud. Teacher A cannot run without ground truth.
    pub fn complete(&self, x: &PointCloud) -> Result<PointCloud> {
        if self.phase == Phase::TeacherA {
            return Err(Error::Config("a teacher-a checkpoint needs ground truth for its auxiliary branch".into()));
        }
        if x.len() != self.input_size() {
            return Err(Error::Config(format!("model expects {} input points, got {}", self.input_size(), x.len())));
        }
        self.model.infer(&self.params, x)
    }
}

impl Predictor for TrainedModel {
    fn predict(&self, s: &Sample) -> Result<PointCloud> {
        match self.phase {
            Phase::TeacherB => self.complete(&teacher_b_input(s)?),
            Phase::TeacherA => {
                let mut g = Graph::new();
                let b = self.params.bind_all(&mut g, false);
                let out = self.model.forward(&mut g, &b, &s.partial, Some(&s.gt))?;
                PointCloud::from_array(g.value(out.out.fine))
            }
            _ => self.complete(&s.partial),
        }
    }
}
