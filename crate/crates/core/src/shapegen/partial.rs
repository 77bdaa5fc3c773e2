//! Partial-view sample protocol.
//!
//! From a ground truth `G` of `4N` points:
//! - a viewpoint is drawn uniformly on the unit sphere,
//! - the farthest points from it are removed (`N` for simple, `2N` for
//!   moderate, uniform in `[N, 2N]` for the teacher-B setting),
//! - the survivors are downsampled uniformly to `N` points,
//! - the privileged input `G_s` is the FPS subsample of `G` to `2N` points.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::geometry::{fps, random_downsample, viewpoint_crop, Point, PointCloud};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    Simple,
    Moderate,
    TeacherBRandom,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Simple => "simple",
            Setting::Moderate => "moderate",
            Setting::TeacherBRandom => "teacherB-random",
        }
    }

    /// Points removed from a `4n` ground truth.
    fn removal(self, n: usize, rng: &mut SplitMix64) -> usize {
        match self {
            Setting::Simple => n,
            Setting::Moderate => 2 * n,
            Setting::TeacherBRandom => n + rng.below(n as u64 + 1) as usize,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Setting::Simple),
            "moderate" => Ok(Setting::Moderate),
            "teacherB-random" => Ok(Setting::TeacherBRandom),
            _ => Err(Error::Config(format!("unknown setting `{s}` (simple|moderate|teacherB-random)"))),
        }
    }
}

/// One training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub category: String,
    /// Ground truth, `4N` points.
    pub gt: PointCloud,
    /// Privileged subsample of the ground truth, `2N` points.
    pub gt_sub: PointCloud,
    /// Partial input, `N` points.
    pub partial: PointCloud,
    pub viewpoint: Point,
    pub setting: Setting,
    pub seed: u64,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.partial.len()
    }
}

fn check_gt(gt: &PointCloud) -> Result<usize> {
    ensure!(gt.len() >= 4 && gt.len() % 4 == 0, "ground truth must hold 4N points, got {}", gt.len());
    Ok(gt.len() / 4)
}

pub fn draw_viewpoint(seed: u64) -> Point {
    SplitMix64::named(seed, "viewpoint").unit_vector()
}

/// Builds the partial input, privileged subsample and viewpoint for `gt`.
pub fn make_partial(id: u64, category: &str, gt: PointCloud, setting: Setting, seed: u64) -> Result<Sample> {
    let n = check_gt(&gt)?;
    let viewpoint = draw_viewpoint(seed);
    let n_remove = setting.removal(n, &mut SplitMix64::named(seed, "crop"));
    let survivors = viewpoint_crop(&gt, &viewpoint, n_remove)?;
    let partial = random_downsample(&survivors, n, SplitMix64::named(seed, "downsample").next_u64())?;
    let start = SplitMix64::named(seed, "fps-start").below(gt.len() as u64) as usize;
    let gt_sub = gt.select(&fps(&gt, 2 * n, start)?);
    Ok(Sample { id, category: category.to_string(), gt, gt_sub, partial, viewpoint, setting, seed })
}

/// Teacher-B training input: crop a uniform `[N, 2N]` farthest points from
/// the sample's viewpoint, then downsample to `2N` points.
pub fn teacher_b_input(sample: &Sample) -> Result<PointCloud> {
    let n = check_gt(&sample.gt)?;
    let n_remove = Setting::TeacherBRandom.removal(n, &mut SplitMix64::named(sample.seed, "teacher-b-crop"));
    let survivors = viewpoint_crop(&sample.gt, &sample.viewpoint, n_remove)?;
    random_downsample(&survivors, 2 * n, SplitMix64::named(sample.seed, "teacher-b-downsample").next_u64())
}
