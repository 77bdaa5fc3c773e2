use super::cloud::{dist2, Point, PointCloud};
use crate::error::{ensure, Result};
use crate::rng::SplitMix64;

/// Greedy farthest-point sampling.
///
/// The first pick is `start`; every later pick maximizes the squared distance
/// to the nearest already-picked point, ties going to the lowest index.
pub fn fps(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    fps_points(cloud.points(), k, start)
}

pub fn fps_points(points: &[Point], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    ensure!(k >= 1 && k <= n, "fps: k = {k} outside 1..={n}");
    ensure!(start < n, "fps: start index {start} out of range for {n} points");
    let mut min_d = vec![f64::INFINITY; n];
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut cur = start;
    for _ in 0..k {
        picked.push(cur);
        taken[cur] = true;
        let c = points[cur];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    Ok(picked)
}

/// Indices `(kept, removed)` for removing the `n_remove` points farthest from
/// `viewpoint`. Among equal distances the lower index is removed first.
/// `kept` is in original order, `removed` in removal order.
pub fn viewpoint_crop_indices(cloud: &PointCloud, viewpoint: &Point, n_remove: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = cloud.len();
    ensure!(n_remove < n, "viewpoint_crop: cannot remove {n_remove} of {n} points");
    let d: Vec<f64> = cloud.points().iter().map(|p| dist2(p, viewpoint)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let removed = order[..n_remove].to_vec();
    let mut gone = vec![false; n];
    for &i in &removed {
        gone[i] = true;
    }
    let kept = (0..n).filter(|&i| !gone[i]).collect();
    Ok((kept, removed))
}

pub fn viewpoint_crop(cloud: &PointCloud, viewpoint: &Point, n_remove: usize) -> Result<PointCloud> {
    let (kept, _) = viewpoint_crop_indices(cloud, viewpoint, n_remove)?;
    Ok(cloud.select(&kept))
}

/// Uniform subset of `n` points without replacement; survivors keep their order.
pub fn random_downsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    ensure!(n >= 1 && n <= cloud.len(), "random_downsample: n = {n} outside 1..={}", cloud.len());
    let idx = SplitMix64::new(seed).choose_indices(cloud.len(), n);
    Ok(cloud.select(&idx))
}
