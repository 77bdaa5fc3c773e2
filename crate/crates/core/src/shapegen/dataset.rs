//! Procedural datasets and their on-disk layout.
//!
//! ```text
//! <root>/manifest.tsv          # id  category  seed  setting  gt  gt_sub  partial
//! <root>/samples/000000.gt.xyz
//! <root>/samples/000000.gs.xyz
//! <root>/samples/000000.x.xyz
//! ```
//!
//! Sample `id` uses seed `derive_seed(master, id)` and category
//! `categories[id % categories.len()]`. A sample belongs to the test split
//! when `mix64(id ^ SPLIT_SALT) % 10 == 0`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::io::{read_cloud, write_cloud, CloudFormat};
use super::partial::{draw_viewpoint, make_partial, Sample, Setting};
use super::shapes::{make_shape, ShapeKind, ShapeSpec};
use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, mix64, SplitMix64};

const SPLIT_SALT: u64 = 0x5EED_5EED_0000_0055;
pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "#id\tcategory\tseed\tsetting\tgt\tgt_sub\tpartial";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn split_of(id: u64) -> Split {
    if mix64(id ^ SPLIT_SALT) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub categories: Vec<ShapeKind>,
    /// Partial input size `N`; ground truth holds `4N`.
    pub n: usize,
    pub seed: u64,
    pub setting: Setting,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 200, categories: ShapeKind::ALL.to_vec(), n: 256, seed: 0, setting: Setting::Simple }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| split_of(s.id) == which).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test)
    }

    /// Same shapes, partial inputs rebuilt under another setting.
    pub fn with_setting(&self, setting: Setting) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| make_partial(s.id, &s.category, s.gt.clone(), setting, s.seed))
            .collect::<Result<_>>()?;
        Ok(Dataset { n: self.n, samples })
    }
}

pub fn generate_sample(cfg: &DatasetConfig, id: u64) -> Result<Sample> {
    let seed = derive_seed(cfg.seed, id);
    let kind = cfg.categories[id as usize % cfg.categories.len()];
    let spec = ShapeSpec::random(kind, &mut SplitMix64::named(seed, "spec"));
    let gt = make_shape(&spec, 4 * cfg.n, SplitMix64::named(seed, "surface").next_u64())?;
    make_partial(id, kind.name(), gt, cfg.setting, seed)
}

/// Generates the whole dataset in memory.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    ensure!(cfg.count >= 1, "dataset count must be at least 1");
    ensure!(!cfg.categories.is_empty(), "dataset needs at least one category");
    ensure!(cfg.n >= 4, "N must be at least 4");
    let samples = (0..cfg.count as u64).into_par_iter().map(|id| generate_sample(cfg, id)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n: cfg.n, samples })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub category: String,
    pub seed: u64,
    pub setting: Setting,
    pub gt: PathBuf,
    pub gt_sub: PathBuf,
    pub partial: PathBuf,
}

impl ManifestEntry {
    fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.category,
            self.seed,
            self.setting,
            self.gt.display(),
            self.gt_sub.display(),
            self.partial.display()
        )
    }

    pub fn split(&self) -> Split {
        split_of(self.id)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates the dataset and writes the manifest plus per-sample XYZ files under `root`.
pub fn make_dataset(cfg: &DatasetConfig, root: &Path) -> Result<Vec<ManifestEntry>> {
    let data = generate(cfg)?;
    write_dataset(&data, root)
}

pub fn write_dataset(data: &Dataset, root: &Path) -> Result<Vec<ManifestEntry>> {
    let dir = root.join("samples");
    create_dir(&dir)?;
    let entries: Vec<ManifestEntry> = data
        .samples
        .par_iter()
        .map(|s| {
            let rel = |tag: &str| PathBuf::from("samples").join(format!("{:06}.{tag}.xyz", s.id));
            let e = ManifestEntry {
                id: s.id,
                category: s.category.clone(),
                seed: s.seed,
                setting: s.setting,
                gt: rel("gt"),
                gt_sub: rel("gs"),
                partial: rel("x"),
            };
            write_cloud(&root.join(&e.gt), &s.gt, CloudFormat::Xyz)?;
            write_cloud(&root.join(&e.gt_sub), &s.gt_sub, CloudFormat::Xyz)?;
            write_cloud(&root.join(&e.partial), &s.partial, CloudFormat::Xyz)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in &entries {
        text.push_str(&e.line());
        text.push('\n');
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::parse(loc, format!("expected 7 tab-separated fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::parse(&loc, format!("invalid integer `{s}`")));
        out.push(ManifestEntry {
            id: num(f[0])?,
            category: f[1].to_string(),
            seed: num(f[2])?,
            setting: f[3].parse().map_err(|e: Error| Error::parse(&loc, e.to_string()))?,
            gt: f[4].into(),
            gt_sub: f[5].into(),
            partial: f[6].into(),
        });
    }
    Ok(out)
}

/// Loads a dataset written by [`make_dataset`]. Viewpoints are re-derived from the seeds.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let entries = read_manifest(root)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("{} lists no samples", root.join(MANIFEST_FILE).display())));
    }
    let samples = entries
        .par_iter()
        .map(|e| {
            Ok(Sample {
                id: e.id,
                category: e.category.clone(),
                gt: read_cloud(&root.join(&e.gt), CloudFormat::Xyz)?,
                gt_sub: read_cloud(&root.join(&e.gt_sub), CloudFormat::Xyz)?,
                partial: read_cloud(&root.join(&e.partial), CloudFormat::Xyz)?,
                viewpoint: draw_viewpoint(e.seed),
                setting: e.setting,
                seed: e.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples[0].partial.len();
    for s in &samples {
        ensure!(
            s.partial.len() == n && s.gt.len() == 4 * n && s.gt_sub.len() == 2 * n,
            "sample {} has inconsistent sizes",
            s.id
        );
    }
    Ok(Dataset { n, samples })
}
