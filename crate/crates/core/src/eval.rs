//! Feature-mapping score, center-distance detection metrics and depth
//! histograms.

use serde::{Deserialize, Serialize};

use crate::depth::GroundDepthMap;
use crate::error::{Error, Result};
use crate::mapping::{Detection, WorldGrid};
use crate::scene::{RenderedView, Scene};

pub const FMS_CUBE_VOXELS: usize = 4;
pub const DETECTION_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching threshold whose true positives define mATE.
pub const MATE_THRESHOLD: f64 = 2.0;

/// Voxel index range of length `n` along one axis, centered as closely as
/// possible on continuous coordinate `c`.
fn cube_axis(c: f64, n: usize) -> std::ops::Range<i64> {
    let start = (c - n as f64 / 2.0).round() as i64;
    start..start + n as i64
}

/// Mass inside the `cube × cube × cube` voxel block around `center`.
/// Voxels outside the grid contribute nothing.
pub fn fms(grid: &WorldGrid, center: &nalgebra::Vector3<f64>, cube: usize) -> f64 {
    let (nx, ny, nz) = grid.dims();
    let c = grid.spec.local_coords(center);
    let mut total = 0.0;
    for i in cube_axis(c[0], cube) {
        for j in cube_axis(c[1], cube) {
            for k in cube_axis(c[2], cube) {
                if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
                    continue;
                }
                total += grid.mass[grid.spec.linear([i as usize, j as usize, k as usize])];
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub object_id: i32,
    pub fms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmsReport {
    pub per_object: Vec<ObjectScore>,
    pub mfms: f64,
}

pub fn mfms(grid: &WorldGrid, scene: &Scene) -> Result<FmsReport> {
    if scene.objects.is_empty() {
        return Err(Error::NoObjects);
    }
    let per_object: Vec<ObjectScore> = scene
        .objects
        .iter()
        .map(|o| ObjectScore {
            object_id: o.object_id,
            fms: fms(grid, &o.center, FMS_CUBE_VOXELS),
        })
        .collect();
    let mfms = per_object.iter().map(|s| s.fms).sum::<f64>() / per_object.len() as f64;
    Ok(FmsReport { per_object, mfms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub ap: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub ap_at: Vec<ThresholdScore>,
    pub map_mean: f64,
    /// Mean center error of true positives at [`MATE_THRESHOLD`]; `None`
    /// without true positives.
    pub mate: Option<f64>,
}

impl DetectionReport {
    pub fn at(&self, threshold: f64) -> Option<&ThresholdScore> {
        self.ap_at.iter().find(|s| s.threshold == threshold)
    }
}

/// Per prediction in score order, the matched ground truth and its distance.
pub type Assignment = Vec<Option<(usize, f64)>>;

/// Indices of `pred` by descending score, ties by index.
pub fn score_order(pred: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].score.total_cmp(&pred[a].score).then(a.cmp(&b)));
    order
}

fn dist(p: &Detection, g: &(f64, f64)) -> f64 {
    (p.x - g.0).hypot(p.y - g.1)
}

/// Greedy matching: predictions in score order each take the nearest free
/// ground truth within `threshold` (lowest index on ties).
pub fn greedy_assignment(pred: &[Detection], gt: &[(f64, f64)], threshold: f64) -> Assignment {
    let mut used = vec![false; gt.len()];
    score_order(pred)
        .into_iter()
        .map(|k| {
            let mut best: Option<(usize, f64)> = None;
            for (g, pos) in gt.iter().enumerate() {
                let d = dist(&pred[k], pos);
                if !used[g] && d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((g, d));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            best
        })
        .collect()
}

/// 11-point interpolated average precision of a score-ordered TP sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|r| {
            let r = r as f64 / 10.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, prec)| prec)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn match_detections(pred: &[Detection], gt: &[(f64, f64)], thresholds: &[f64]) -> DetectionReport {
    let ap_at: Vec<ThresholdScore> = thresholds
        .iter()
        .map(|&threshold| {
            let a = greedy_assignment(pred, gt, threshold);
            let tp: Vec<bool> = a.iter().map(Option::is_some).collect();
            let hits = tp.iter().filter(|&&t| t).count();
            ThresholdScore {
                threshold,
                ap: average_precision(&tp, gt.len()),
                recall: if gt.is_empty() { 1.0 } else { hits as f64 / gt.len() as f64 },
            }
        })
        .collect();
    let map_mean = if ap_at.is_empty() {
        0.0
    } else {
        ap_at.iter().map(|s| s.ap).sum::<f64>() / ap_at.len() as f64
    };
    let errors: Vec<f64> = greedy_assignment(pred, gt, MATE_THRESHOLD)
        .into_iter()
        .flatten()
        .map(|(_, d)| d)
        .collect();
    let mate = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
    DetectionReport { ap_at, map_mean, mate }
}

/// Ground-truth BEV centers of the scene objects.
pub fn gt_centers(scene: &Scene) -> Vec<(f64, f64)> {
    scene.objects.iter().map(|o| (o.center.x, o.center.y)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Lower edge of the first bin.
    pub origin: f64,
    pub counts: Vec<u64>,
    /// Smallest and largest sample; `None` when empty.
    pub range: Option<[f64; 2]>,
}

impl Histogram {
    pub fn from_samples(samples: &[f64], bin_width: f64) -> Self {
        let Some(min) = samples.iter().copied().reduce(f64::min) else {
            return Histogram {
                bin_width,
                origin: 0.0,
                counts: Vec::new(),
                range: None,
            };
        };
        let max = samples.iter().copied().fold(min, f64::max);
        let origin = (min / bin_width).floor() * bin_width;
        let n = ((max - origin) / bin_width).floor() as usize + 1;
        let mut counts = vec![0u64; n];
        for &s in samples {
            let b = (((s - origin) / bin_width).floor() as usize).min(n - 1);
            counts[b] += 1;
        }
        Histogram {
            bin_width,
            origin,
            counts,
            range: Some([min, max]),
        }
    }

    pub fn support_width(&self) -> f64 {
        self.range.map_or(0.0, |[a, b]| b - a)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHistograms {
    pub l_a: Histogram,
    pub l_ba: Histogram,
}

/// Histograms of pixel depth `l_A` and residual depth `l_BA = l_B − l_A`
/// over object pixels.
pub fn depth_hist(views: &[RenderedView], gdms: &[GroundDepthMap], bin_width: f64) -> Result<DepthHistograms> {
    if views.len() != gdms.len() {
        return Err(Error::Config("one ground depth map per view is required".into()));
    }
    let mut l_a = Vec::new();
    let mut l_ba = Vec::new();
    for (v, g) in views.iter().zip(gdms) {
        for i in 0..v.mask.len() {
            if v.mask[i] && g.valid[i] && v.depth_oracle[i] > 0.0 {
                l_a.push(v.depth_oracle[i]);
                l_ba.push(g.values[i] - v.depth_oracle[i]);
            }
        }
    }
    Ok(DepthHistograms {
        l_a: Histogram::from_samples(&l_a, bin_width),
        l_ba: Histogram::from_samples(&l_ba, bin_width),
    })
}
