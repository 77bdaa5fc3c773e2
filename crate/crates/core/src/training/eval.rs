use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::MetricReport;
use crate::shapegen::Sample;

/// Anything that maps a sample to a completed cloud.
pub trait Predictor: Sync {
    fn predict(&self, sample: &Sample) -> Result<PointCloud>;
}

impl<F: Fn(&Sample) -> Result<PointCloud> + Sync> Predictor for F {
    fn predict(&self, sample: &Sample) -> Result<PointCloud> {
        self(sample)
    }
}

/// Stub that returns the ground truth; its report is exactly zero CD and unit F-Score.
#[derive(Clone, Copy, Debug, Default)]
pub struct GtEcho;

impl Predictor for GtEcho {
    fn predict(&self, sample: &Sample) -> Result<PointCloud> {
        Ok(sample.gt.clone())
    }
}

/// Stub that repeats the partial input cyclically up to the ground-truth size.
#[derive(Clone, Copy, Debug, Default)]
pub struct PaddedInput;

impl Predictor for PaddedInput {
    fn predict(&self, sample: &Sample) -> Result<PointCloud> {
        let x = sample.partial.points();
        PointCloud::new((0..sample.gt.len()).map(|i| x[i % x.len()]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by category name.
    pub rows: Vec<CategoryRow>,
    /// Mean over all samples.
    pub mean: MetricReport,
    pub count: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "category,count,cd_l1_x1000,cd_l2_x1000,fscore_1pct";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.category, r.count, r.report.csv_fields()));
        }
        s.push_str(&format!("Mean,{},{}\n", self.count, self.mean.csv_fields()));
        s
    }
}

/// Per-sample metrics of `predictor` against each sample's ground truth,
/// aggregated per category and overall.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, samples: &[&Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let per: Vec<MetricReport> = samples
        .par_iter()
        .map(|s| MetricReport::compute(&predictor.predict(s)?, &s.gt))
        .collect::<Result<_>>()?;
    Ok(aggregate(samples.iter().map(|s| s.category.as_str()).zip(per)))
}

/// Groups `(category, report)` pairs into an [`EvalReport`].
pub fn aggregate<'a>(items: impl IntoIterator<Item = (&'a str, MetricReport)>) -> EvalReport {
    let mut groups: std::collections::BTreeMap<&str, Vec<MetricReport>> = Default::default();
    let mut all = Vec::new();
    for (c, r) in items {
        groups.entry(c).or_default().push(r);
        all.push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(c, v)| CategoryRow { category: c.to_string(), count: v.len(), report: MetricReport::mean(&v).expect("non-empty group") })
        .collect();
    EvalReport { rows, mean: MetricReport::mean(&all).unwrap_or_default(), count: all.len() }
}
