//! The ablation suite: cascade vs. baseline, progressive vs. auxiliary,
//! distillation on top of the cascade, and KL vs. MSE distillation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{Phase, RunConfig};
use super::eval::{evaluate, PaddedInput};
use super::phase::{log_csv, run_phase, PhaseOutcome, Prerequisites};
use crate::cascade::{CascadeMode, DistillMode, LossConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, CD_REPORT_SCALE};
use crate::shapegen::{Dataset, Setting};

/// Test-split means of every run of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedTrend {
    pub seed: u64,
    /// Pretrained stage-1 reconstruction network.
    pub recon: MetricReport,
    /// The partial input repeated up to the output size.
    pub padded: MetricReport,
    pub baseline: MetricReport,
    /// Auxiliary cascade, no distillation.
    pub cascade: MetricReport,
    /// Auxiliary cascade with both distillation terms (KL).
    pub full: MetricReport,
    /// Two chained 2x stages, no distillation.
    pub progressive: MetricReport,
    /// Single stage distilled from teacher B, KL, on teacherB-random inputs.
    pub distill_kl: MetricReport,
    /// Same with MSE.
    pub distill_mse: MetricReport,
}

impl SeedTrend {
    pub const CSV_HEADER: &'static str = "seed,run,cd_l1_x1000,cd_l2_x1000,fscore_1pct";

    pub fn runs(&self) -> [(&'static str, &MetricReport); 8] {
        [
            ("padded-input", &self.padded),
            ("recon", &self.recon),
            ("baseline", &self.baseline),
            ("cascade", &self.cascade),
            ("full", &self.full),
            ("progressive", &self.progressive),
            ("distill-kl", &self.distill_kl),
            ("distill-mse", &self.distill_mse),
        ]
    }

    pub fn csv_rows(&self) -> String {
        self.runs().iter().map(|(n, r)| format!("{},{n},{}\n", self.seed, r.csv_fields())).collect()
    }
}

/// One directional comparison counted over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub name: &'static str,
    pub wins: usize,
    pub seeds: usize,
    /// Wins required to pass.
    pub needed: usize,
    /// `(left, right)` per seed, scaled by 1000 for Chamfer.
    pub values: Vec<(f64, f64)>,
}

impl TrendCheck {
    pub fn passed(&self) -> bool {
        self.seeds > 0 && self.wins >= self.needed
    }
}

/// A comparison that must hold in at least two thirds of the seeds (2 of 3).
fn count(name: &'static str, trends: &[SeedTrend], f: impl Fn(&SeedTrend) -> (f64, f64), holds: impl Fn(f64, f64) -> bool) -> TrendCheck {
    let values: Vec<(f64, f64)> = trends.iter().map(f).map(|(a, b)| (a * CD_REPORT_SCALE, b * CD_REPORT_SCALE)).collect();
    let seeds = trends.len();
    TrendCheck { name, wins: values.iter().filter(|(a, b)| holds(*a, *b)).count(), seeds, needed: (2 * seeds).div_ceil(3), values }
}

/// The four directional comparisons, then the pretraining sanity check,
/// which must hold for every seed.
pub fn trend_checks(trends: &[SeedTrend]) -> [TrendCheck; 5] {
    let pretrained = TrendCheck {
        needed: trends.len(),
        ..count("recon CD-L2 < padded input CD-L2", trends, |t| (t.recon.cd_l2, t.padded.cd_l2), |a, b| a < b)
    };
    [
        count("cascade CD-L2 <= baseline CD-L2", trends, |t| (t.cascade.cd_l2, t.baseline.cd_l2), |a, b| a <= b),
        count("progressive CD-L1 > cascade CD-L1", trends, |t| (t.progressive.cd_l1, t.cascade.cd_l1), |a, b| a > b),
        count("full CD-L2 <= cascade CD-L2", trends, |t| (t.full.cd_l2, t.cascade.cd_l2), |a, b| a <= b),
        count("KL CD-L1 <= MSE CD-L1", trends, |t| (t.distill_kl.cd_l1, t.distill_mse.cd_l1), |a, b| a <= b),
        pretrained,
    ]
}

/// Runs phases for one seed, keeping checkpoints and logs under `dir` when given.
/// Existing checkpoints in `dir` are reused.
pub struct TrendRunner<'a> {
    pub base: RunConfig,
    pub dir: Option<PathBuf>,
    pub progress: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> TrendRunner<'a> {
    pub fn new(base: RunConfig, dir: Option<PathBuf>) -> Self {
        Self { base, dir, progress: Box::new(|_| {}) }
    }

    fn run(&mut self, tag: &str, cfg: &RunConfig, phase: Phase, data: &Dataset, pre: &Prerequisites) -> Result<(Checkpoint, MetricReport)> {
        let paths = self.dir.as_ref().map(|d| (d.join(format!("{tag}.ckpt")), d.join(format!("{tag}.csv")), d.join(format!("{tag}.eval.csv"))));
        if let Some((ck, _, ev)) = &paths {
            if ck.exists() && ev.exists() {
                let c = Checkpoint::load(ck)?;
                if c.config == cfg.to_text() && c.phase == phase.name() {
                    let m = read_mean(ev)?;
                    (self.progress)(&format!("{tag}: reused {}", ck.display()));
                    return Ok((c, m));
                }
            }
        }
        let t = Instant::now();
        let PhaseOutcome { checkpoint, log, report } = run_phase(cfg, phase, data, pre)?;
        let report = report.ok_or_else(|| Error::Config("the ablation suite needs a non-empty test split".into()))?;
        if let Some((ck, lg, ev)) = &paths {
            checkpoint.save(ck)?;
            write(lg, &log_csv(&log))?;
            write(ev, &report.to_csv())?;
        }
        let m = report.mean;
        (self.progress)(&format!(
            "{tag}: {:.0}s, train L0 {:.5} -> {:.5}, test CD-L1 {:.3} CD-L2 {:.4} F {:.3}",
            t.elapsed().as_secs_f64(),
            log.first().map_or(f64::NAN, |r| r.l0),
            log.last().map_or(f64::NAN, |r| r.l0),
            m.cd_l1 * CD_REPORT_SCALE,
            m.cd_l2 * CD_REPORT_SCALE,
            m.fscore_1pct
        ));
        Ok((checkpoint, m))
    }

    pub fn run_seed(&mut self, seed: u64, data: &Dataset) -> Result<SeedTrend> {
        let mut cfg = self.base.clone();
        cfg.train.master_seed = seed;
        cfg.train.phase = None;
        let s = |n: &str| format!("s{seed}-{n}");
        let none = LossConfig { lambda1: 0.0, lambda2: 0.0, cascade: CascadeMode::None, ..cfg.loss };

        let padded = evaluate(&PaddedInput, &data.test())?.mean;
        let mut pre = Prerequisites::default();
        let (recon_ck, recon) = self.run(&s("recon"), &cfg, Phase::Recon, data, &pre)?;
        pre.recon = Some(recon_ck);
        pre.teacher_a = Some(self.run(&s("teacher-a"), &cfg, Phase::TeacherA, data, &pre)?.0);
        pre.teacher_b = Some(self.run(&s("teacher-b"), &cfg, Phase::TeacherB, data, &pre)?.0);

        let (_, baseline) = self.run(&s("baseline"), &cfg, Phase::Baseline, data, &pre)?;
        let with = |loss: LossConfig| RunConfig { loss, ..cfg.clone() };
        let (_, cascade) = self.run(&s("cascade"), &with(LossConfig { cascade: CascadeMode::Auxiliary, ..none }), Phase::Student, data, &pre)?;
        let full_loss = LossConfig { lambda1: 1.0, lambda2: 1.0, distill: DistillMode::Kl, cascade: CascadeMode::Auxiliary, ..cfg.loss };
        let (_, full) = self.run(&s("full"), &with(full_loss), Phase::Student, data, &pre)?;

        let mut c2 = cfg.clone();
        c2.train.recon_factor = 2;
        let pre2 = Prerequisites { recon: Some(self.run(&s("recon2x"), &c2, Phase::Recon, data, &Prerequisites::default())?.0), ..Default::default() };
        let prog = RunConfig { loss: LossConfig { cascade: CascadeMode::Progressive, ..none }, ..c2 };
        let (_, progressive) = self.run(&s("progressive"), &prog, Phase::Student, data, &pre2)?;

        let random = data.with_setting(Setting::TeacherBRandom)?;
        let tb_only = Prerequisites { teacher_b: pre.teacher_b.clone(), ..Default::default() };
        let mut dcfg = with(LossConfig { lambda2: 1.0, ..none });
        dcfg.dataset.setting = Setting::TeacherBRandom;
        let (_, distill_kl) = self.run(&s("distill-kl"), &dcfg, Phase::Student, &random, &tb_only)?;
        dcfg.loss.distill = DistillMode::Mse;
        let (_, distill_mse) = self.run(&s("distill-mse"), &dcfg, Phase::Student, &random, &tb_only)?;

        Ok(SeedTrend { seed, recon, padded, baseline, cascade, full, progressive, distill_kl, distill_mse })
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the `Mean` row of an evaluation CSV back into raw units.
fn read_mean(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line = text.lines().find(|l| l.starts_with("Mean,")).ok_or_else(|| Error::parse(path.display(), "no Mean row"))?;
    let f: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().map_err(|_| Error::parse(path.display(), "bad number"))).collect::<Result<_>>()?;
    if f.len() != 3 {
        return Err(Error::parse(path.display(), "Mean row needs 3 metrics"));
    }
    Ok(MetricReport { cd_l1: f[0] / CD_REPORT_SCALE, cd_l2: f[1] / CD_REPORT_SCALE, fscore_1pct: f[2] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trend(seed: u64, cascade_l2: f64) -> SeedTrend {
        let m = |cd_l1: f64, cd_l2: f64| MetricReport { cd_l1, cd_l2, fscore_1pct: 0.0 };
        SeedTrend {
            seed,
            recon: m(0.05, 0.005),
            padded: m(0.08, if seed == 2 { 0.004 } else { 0.02 }),
            baseline: m(0.07, 0.007),
            cascade: m(0.06, cascade_l2),
            full: m(0.06, 0.006),
            progressive: m(0.065, 0.007),
            distill_kl: m(0.07, 0.007),
            distill_mse: m(0.07, 0.007),
        }
    }

    #[test]
    fn two_of_three_for_trends_and_all_for_pretraining() {
        let t = [trend(0, 0.006), trend(1, 0.008), trend(2, 0.007)];
        let [a, b, c, kl, pre] = trend_checks(&t);
        assert_eq!((a.wins, a.needed, a.passed()), (2, 2, true));
        assert_eq!((b.wins, b.passed()), (3, true));
        assert_eq!((c.wins, c.passed()), (3, true));
        assert_eq!((kl.wins, kl.passed()), (3, true));
        assert_eq!((pre.wins, pre.needed, pre.passed()), (2, 3, false));
        assert!((a.values[1].0 - 8.0).abs() < 1e-12);

        let [a, ..] = trend_checks(&t[1..]);
        assert_eq!((a.wins, a.needed, a.passed()), (1, 2, false));
        assert!(!trend_checks(&[])[0].passed());
    }

    #[test]
    fn csv_has_a_row_per_run() {
        let rows = trend(4, 0.006).csv_rows();
        assert_eq!(rows.lines().count(), 8);
        assert!(rows.starts_with("4,padded-input,"));
    }
}
