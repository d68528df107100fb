//! Ground-prior depth: closed-form ground depth per pixel, ground-anchored
//! depth bins and categorical depth distributions.
//!
//! Bin `k = 1..=M` of a ground-anchored distribution stands for the residual
//! depth `l_BA = k·d` in frame `BA` and for the pixel depth `l_A = l_B − k·d`
//! in frame `A`. Slices are stored 0-based, so slot `i` holds bin `k = i + 1`.
//!
//! The depth estimator is a surrogate: it soft-assigns the oracle residual
//! depth to bins and corrupts the result with a configurable noise model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_center_world, Camera, Pixel};
use crate::scene::{hash_words, RenderedView};

/// Logit gain of the default Gaussian-logit noise model.
pub const DEFAULT_LOGIT_GAIN: f64 = 6.0;

/// Tolerance when flagging residual depths outside the bin support.
const RANGE_TOLERANCE: f64 = 1e-6;

const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundDepthMap {
    pub width: usize,
    pub height: usize,
    /// `l_B` per pixel; 0 where invalid.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub ground_z: f64,
}

impl GroundDepthMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Third row of `R⁻¹K⁻¹` and third component of `R⁻¹(−T)`.
struct GroundPlaneTerms {
    m3: [f64; 3],
    n3: f64,
}

impl GroundPlaneTerms {
    fn new(cam: &Camera) -> Self {
        let m = cam.r_inv() * cam.k_inv();
        GroundPlaneTerms {
            m3: [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            n3: camera_center_world(cam).z,
        }
    }

    fn eval(&self, px: Pixel, z_w: f64) -> Result<f64> {
        let denom = self.m3[0] * px.u + self.m3[1] * px.v + self.m3[2];
        if denom.abs() <= MIN_DENOMINATOR {
            return Err(Error::NoGroundIntersection);
        }
        let l_b = (z_w - self.n3) / denom;
        if !(l_b > 0.0) || !l_b.is_finite() {
            return Err(Error::NoGroundIntersection);
        }
        Ok(l_b)
    }
}

/// Optical-axis depth at which the ray through `px` meets the ground plane
/// `z = z_w`:
///
/// `l_B = (z_w − [R⁻¹(−T)]₃) / ([R⁻¹K⁻¹]₃₁·u + [R⁻¹K⁻¹]₃₂·v + [R⁻¹K⁻¹]₃₃)`
pub fn ground_depth(px: Pixel, cam: &Camera, z_w: f64) -> Result<f64> {
    GroundPlaneTerms::new(cam).eval(px, z_w)
}

/// Per-pixel [`ground_depth`]; pixels at or above the horizon are flagged
/// invalid.
pub fn ground_depth_map(cam: &Camera, resolution: (usize, usize), z_w: f64) -> Result<GroundDepthMap> {
    let (width, height) = resolution;
    let cam = if (cam.width(), cam.height()) == resolution {
        cam.clone()
    } else {
        cam.with_resolution(width, height)?
    };
    let terms = GroundPlaneTerms::new(&cam);
    let mut values = vec![0.0; width * height];
    let mut valid = vec![false; width * height];
    for row in 0..height {
        for col in 0..width {
            let idx = row * width + col;
            if let Ok(l_b) = terms.eval(Pixel::at(col, row), z_w) {
                values[idx] = l_b;
                valid[idx] = true;
            }
        }
    }
    Ok(GroundDepthMap {
        width,
        height,
        values,
        valid,
        ground_z: z_w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DepthBins {
    /// Residual-depth bins `k·d`, `k = 1..=m`, anchored on each pixel's
    /// ground depth. `m = 1, d = 0` maps every pixel onto its ground depth.
    GroundAnchored { m: usize, d: f64 },
    /// Equal-width bins over `[min, max]` shared by all pixels.
    Uniform { min: f64, max: f64, centers: Vec<f64> },
}

impl DepthBins {
    pub fn ground_anchored(m: usize, d: f64) -> Result<Self> {
        if m == 0 || !(d >= 0.0) || !d.is_finite() {
            return Err(Error::Config(format!("invalid ground-anchored bins m={m}, d={d}")));
        }
        if d == 0.0 && m != 1 {
            return Err(Error::Config("d = 0 requires a single bin".into()));
        }
        Ok(DepthBins::GroundAnchored { m, d })
    }

    pub fn m(&self) -> usize {
        match self {
            DepthBins::GroundAnchored { m, .. } => *m,
            DepthBins::Uniform { centers, .. } => centers.len(),
        }
    }

    /// Bin width in meters.
    pub fn d(&self) -> f64 {
        match self {
            DepthBins::GroundAnchored { d, .. } => *d,
            DepthBins::Uniform { min, max, centers } => (max - min) / centers.len() as f64,
        }
    }

    pub fn is_ground_anchored(&self) -> bool {
        matches!(self, DepthBins::GroundAnchored { .. })
    }
}

/// Equal-width bins over `[depth_min, depth_max]`.
pub fn uniform_baseline_bins(depth_min: f64, depth_max: f64, count: usize) -> Result<DepthBins> {
    if !(depth_max > depth_min && depth_min > 0.0) || count == 0 {
        return Err(Error::Config(format!(
            "uniform bins need 0 < min < max and count ≥ 1 (got {depth_min}, {depth_max}, {count})"
        )));
    }
    let width = (depth_max - depth_min) / count as f64;
    let centers = (0..count)
        .map(|i| depth_min + (i as f64 + 0.5) * width)
        .collect();
    Ok(DepthBins::Uniform {
        min: depth_min,
        max: depth_max,
        centers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthFrame {
    /// Index `k` means residual depth `k·d` above the ground intersection.
    #[serde(rename = "BA")]
    Ba,
    /// Index `k` means pixel depth.
    A,
}

impl DepthFrame {
    pub fn as_str(self) -> &'static str {
        match self {
            DepthFrame::Ba => "BA",
            DepthFrame::A => "A",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "BA" => Ok(DepthFrame::Ba),
            "A" => Ok(DepthFrame::A),
            _ => Err(Error::Format(format!("unknown depth frame {s:?}"))),
        }
    }
}

/// Per-pixel categorical depth distribution, `height × width × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
    pub valid: Vec<bool>,
    pub bins: DepthBins,
    pub frame: DepthFrame,
    /// `l_B` per pixel, carried by ground-anchored distributions in frame A.
    pub ground: Option<Vec<f64>>,
    /// Valid pixels whose true depth fell outside the bin support.
    pub range_exceeded: usize,
}

impl DepthDistribution {
    pub fn m(&self) -> usize {
        self.bins.m()
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        let m = self.m();
        &self.probs[idx * m..(idx + 1) * m]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Depth value of 0-based slot `i` at pixel `idx` in this distribution's
    /// frame.
    pub fn bin_value(&self, idx: usize, i: usize) -> f64 {
        match (&self.bins, self.frame) {
            (DepthBins::GroundAnchored { d, .. }, DepthFrame::Ba) => (i + 1) as f64 * d,
            (DepthBins::GroundAnchored { d, .. }, DepthFrame::A) => {
                let l_b = self.ground.as_ref().map_or(f64::NAN, |g| g[idx]);
                l_b - (i + 1) as f64 * d
            }
            (DepthBins::Uniform { centers, .. }, _) => centers[i],
        }
    }

    /// Bin depth values of one pixel.
    pub fn bin_values(&self, idx: usize) -> Vec<f64> {
        (0..self.m()).map(|i| self.bin_value(idx, i)).collect()
    }

    pub fn expected_value(&self, idx: usize) -> f64 {
        self.pixel(idx)
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.bin_value(idx, i))
            .sum()
    }

    pub fn argmax(&self, idx: usize) -> usize {
        argmax(self.pixel(idx))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// Linear split between the two bins bracketing the true depth.
    #[default]
    Triangular,
    /// All mass on the nearest bin.
    Snap,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    None,
    /// Softmax of `gain·p + sigma·ξ` with `ξ ~ N(0, 1)` per bin.
    LogitGaussian { sigma: f64, gain: f64 },
    /// `(1 − epsilon)·p + epsilon·uniform`.
    UniformMixture { epsilon: f64 },
}

impl NoiseModel {
    pub fn logit(sigma: f64) -> Self {
        NoiseModel::LogitGaussian {
            sigma,
            gain: DEFAULT_LOGIT_GAIN,
        }
    }
}

impl FromStr for NoiseModel {
    type Err = Error;

    /// Accepts `none`, `sigma=S[,gain=G]` or `eps=E`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(NoiseModel::None);
        }
        let mut sigma = None;
        let mut gain = DEFAULT_LOGIT_GAIN;
        let mut epsilon = None;
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad noise spec {s:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad noise value in {s:?}")))?;
            match k.trim() {
                "sigma" => sigma = Some(v),
                "gain" => gain = v,
                "eps" | "epsilon" => epsilon = Some(v),
                other => return Err(Error::Config(format!("unknown noise key {other:?}"))),
            }
        }
        let model = match (sigma, epsilon) {
            (Some(sigma), None) => NoiseModel::LogitGaussian { sigma, gain },
            (None, Some(epsilon)) => NoiseModel::UniformMixture { epsilon },
            _ => return Err(Error::Config(format!("noise spec {s:?} needs sigma or eps"))),
        };
        model.validate()?;
        Ok(model)
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::LogitGaussian { sigma, gain } if sigma >= 0.0 && gain.is_finite() => Ok(()),
            NoiseModel::UniformMixture { epsilon } if (0.0..=1.0).contains(&epsilon) => Ok(()),
            _ => Err(Error::Config(format!("invalid noise model {self}"))),
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::None => write!(f, "none"),
            NoiseModel::LogitGaussian { sigma, gain } => write!(f, "sigma={sigma},gain={gain}"),
            NoiseModel::UniformMixture { epsilon } => write!(f, "eps={epsilon}"),
        }
    }
}

/// Stand-in for a learned depth head: oracle soft-assignment plus noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Surrogate {
    pub kernel: Kernel,
    pub noise: NoiseModel,
}

impl Surrogate {
    pub fn new(kernel: Kernel, noise: NoiseModel) -> Self {
        Surrogate { kernel, noise }
    }
}

/// Writes the clean assignment of fractional slot position `pos` into `out`
/// (restricted to `allowed` slots). Positions outside `[0, m − 1]` clamp to
/// the end slots.
fn soft_assign(pos: f64, kernel: Kernel, out: &mut [f64]) {
    let m = out.len();
    out.iter_mut().for_each(|p| *p = 0.0);
    let pos = pos.clamp(0.0, (m - 1) as f64);
    match kernel {
        Kernel::Snap => out[pos.round() as usize] = 1.0,
        Kernel::Triangular => {
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < m && frac > 0.0 {
                out[lo] = 1.0 - frac;
                out[lo + 1] = frac;
            } else {
                out[lo] = 1.0;
            }
        }
    }
}

fn apply_noise(noise: &NoiseModel, probs: &mut [f64], allowed: &[bool], rng: &mut ChaCha8Rng) {
    match *noise {
        NoiseModel::None => {}
        NoiseModel::LogitGaussian { sigma, gain } => {
            let mut max = f64::NEG_INFINITY;
            for (p, &ok) in probs.iter_mut().zip(allowed) {
                let xi: f64 = rng.sample(StandardNormal);
                if ok {
                    *p = gain * *p + sigma * xi;
                    max = max.max(*p);
                }
            }
            for (p, &ok) in probs.iter_mut().zip(allowed) {
                *p = if ok { (*p - max).exp() } else { 0.0 };
            }
        }
        NoiseModel::UniformMixture { epsilon } => {
            let n = allowed.iter().filter(|&&a| a).count() as f64;
            for (p, &ok) in probs.iter_mut().zip(allowed) {
                if ok {
                    *p = (1.0 - epsilon) * *p + epsilon / n;
                }
            }
        }
    }
    normalize(probs, allowed);
}

fn normalize(probs: &mut [f64], allowed: &[bool]) {
    for (p, &ok) in probs.iter_mut().zip(allowed) {
        if !ok {
            *p = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    } else {
        let n = allowed.iter().filter(|&&a| a).count() as f64;
        for (p, &ok) in probs.iter_mut().zip(allowed) {
            *p = if ok { 1.0 / n } else { 0.0 };
        }
    }
}

/// Per-pixel inputs to the surrogate estimator.
struct PixelTarget {
    /// Fractional 0-based slot of the true depth; `None` for sky.
    pos: Option<f64>,
    out_of_range: bool,
}

fn estimate_rows(
    width: usize,
    height: usize,
    m: usize,
    surrogate: &Surrogate,
    seed: u64,
    target: impl Fn(usize) -> Option<(PixelTarget, Vec<bool>)> + Sync,
) -> (Vec<f64>, Vec<bool>, usize) {
    let rows: Vec<(Vec<f64>, Vec<bool>, usize)> = (0..height)
        .into_par_iter()
        .map(|row| {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[seed, row as u64]));
            let mut probs = vec![0.0; width * m];
            let mut valid = vec![false; width];
            let mut exceeded = 0;
            for col in 0..width {
                let Some((t, allowed)) = target(row * width + col) else {
                    continue;
                };
                if !allowed.iter().any(|&a| a) {
                    continue;
                }
                let out = &mut probs[col * m..(col + 1) * m];
                match t.pos {
                    Some(pos) => {
                        soft_assign(pos, surrogate.kernel, out);
                        normalize(out, &allowed);
                        apply_noise(&surrogate.noise, out, &allowed, &mut rng);
                    }
                    None => normalize(out, &allowed),
                }
                valid[col] = true;
                exceeded += t.out_of_range as usize;
            }
            (probs, valid, exceeded)
        })
        .collect();
    let mut probs = Vec::with_capacity(width * height * m);
    let mut valid = Vec::with_capacity(width * height);
    let mut exceeded = 0;
    for (p, v, e) in rows {
        probs.extend(p);
        valid.extend(v);
        exceeded += e;
    }
    (probs, valid, exceeded)
}

/// Residual-depth distribution `P_BA` for every valid ground pixel.
///
/// Bins whose pixel depth `l_B − k·d` would be non-positive get zero mass;
/// pixels with no such bin left are marked invalid. Sky pixels (no oracle
/// depth) get a uniform distribution.
pub fn estimate_p_ba(
    view: &RenderedView,
    gdm: &GroundDepthMap,
    bins: &DepthBins,
    surrogate: &Surrogate,
    seed: u64,
) -> Result<DepthDistribution> {
    let DepthBins::GroundAnchored { m, d } = *bins else {
        return Err(Error::Config("estimate_p_ba needs ground-anchored bins".into()));
    };
    check_shapes(view, gdm)?;
    surrogate.noise.validate()?;
    let (probs, valid, range_exceeded) =
        estimate_rows(gdm.width, gdm.height, m, surrogate, seed, |idx| {
            if !gdm.valid[idx] {
                return None;
            }
            let l_b = gdm.values[idx];
            let allowed: Vec<bool> = (1..=m).map(|k| l_b - k as f64 * d > 0.0).collect();
            let l_a = view.depth_oracle[idx];
            if l_a <= 0.0 {
                return Some((PixelTarget { pos: None, out_of_range: false }, allowed));
            }
            let l_ba = l_b - l_a;
            let out_of_range =
                l_ba < -RANGE_TOLERANCE || l_ba > m as f64 * d + RANGE_TOLERANCE;
            let pos = if d > 0.0 { l_ba / d - 1.0 } else { 0.0 };
            Some((PixelTarget { pos: Some(pos), out_of_range }, allowed))
        });
    Ok(DepthDistribution {
        width: gdm.width,
        height: gdm.height,
        probs,
        valid,
        bins: bins.clone(),
        frame: DepthFrame::Ba,
        ground: None,
        range_exceeded,
    })
}

/// Baseline pixel-depth distribution over uniform bins, produced by the same
/// surrogate directly in frame A.
pub fn estimate_p_a_uniform(
    view: &RenderedView,
    gdm: &GroundDepthMap,
    bins: &DepthBins,
    surrogate: &Surrogate,
    seed: u64,
) -> Result<DepthDistribution> {
    let DepthBins::Uniform { min, max, centers } = bins else {
        return Err(Error::Config("estimate_p_a_uniform needs uniform bins".into()));
    };
    check_shapes(view, gdm)?;
    surrogate.noise.validate()?;
    let m = centers.len();
    let width = (max - min) / m as f64;
    let (probs, valid, range_exceeded) =
        estimate_rows(gdm.width, gdm.height, m, surrogate, seed, |idx| {
            if !gdm.valid[idx] {
                return None;
            }
            let allowed = vec![true; m];
            let l_a = view.depth_oracle[idx];
            if l_a <= 0.0 {
                return Some((PixelTarget { pos: None, out_of_range: false }, allowed));
            }
            let out_of_range = l_a < *min - RANGE_TOLERANCE || l_a > *max + RANGE_TOLERANCE;
            let pos = (l_a - min) / width - 0.5;
            Some((PixelTarget { pos: Some(pos), out_of_range }, allowed))
        });
    Ok(DepthDistribution {
        width: gdm.width,
        height: gdm.height,
        probs,
        valid,
        bins: bins.clone(),
        frame: DepthFrame::A,
        ground: None,
        range_exceeded,
    })
}

fn check_shapes(view: &RenderedView, gdm: &GroundDepthMap) -> Result<()> {
    if view.width() != gdm.width || view.height() != gdm.height {
        return Err(Error::Config(format!(
            "view is {}x{} but ground depth map is {}x{}",
            view.width(),
            view.height(),
            gdm.width,
            gdm.height
        )));
    }
    Ok(())
}

/// Relabels a residual-depth distribution to pixel depths `l_B − k·d`.
/// Probabilities are copied untouched.
pub fn convert_to_p_a(p_ba: &DepthDistribution, gdm: &GroundDepthMap) -> Result<DepthDistribution> {
    if p_ba.frame != DepthFrame::Ba || !p_ba.bins.is_ground_anchored() {
        return Err(Error::Config("convert_to_p_a needs a ground-anchored BA distribution".into()));
    }
    if p_ba.width != gdm.width || p_ba.height != gdm.height {
        return Err(Error::Config("distribution and ground depth map differ in size".into()));
    }
    Ok(DepthDistribution {
        frame: DepthFrame::A,
        ground: Some(gdm.values.clone()),
        ..p_ba.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{intersect_ray_plane, pixel_ray, Intrinsics};
    use crate::scene::{FeatureImage, RenderedView};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    fn camera(pitch: f64) -> Camera {
        let intr = Intrinsics::from_fov(70f64.to_radians(), 480, 256);
        Camera::from_pose(intr, Vector3::new(0.0, 0.0, 50.0), 0.3, pitch, 480, 256).unwrap()
    }

    /// View with prescribed oracle depths and no descriptors.
    fn synthetic_view(cam: &Camera, depths: Vec<f64>) -> RenderedView {
        let n = depths.len();
        RenderedView {
            cam_index: 0,
            camera: cam.clone(),
            features: FeatureImage::zeros(cam.width(), cam.height(), 4),
            depth_oracle: depths,
            mask: vec![false; n],
            hit_points: vec![Vector3::zeros(); n],
            object_ids: vec![-1; n],
            scene_seed: 0,
            descriptor_quant: 0.025,
        }
    }

    #[test]
    fn ground_depth_nadir_and_pitched() {
        let nadir = camera(-FRAC_PI_2);
        let l = ground_depth(Pixel::new(240.0, 128.0), &nadir, 0.0).unwrap();
        assert!((l - 50.0).abs() < 1e-12);
        let pitched = camera(-FRAC_PI_4);
        let l = ground_depth(Pixel::new(240.0, 128.0), &pitched, 0.0).unwrap();
        assert!((l - 50.0 * SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn ground_depth_above_horizon_fails() {
        let cam = camera(-20f64.to_radians());
        assert!(matches!(
            ground_depth(Pixel::new(240.0, 0.0), &cam, 0.0),
            Err(Error::NoGroundIntersection)
        ));
        let level = camera(0.0);
        assert!(matches!(
            ground_depth(Pixel::new(240.0, 128.0), &level, 0.0),
            Err(Error::NoGroundIntersection)
        ));
    }

    #[test]
    fn ground_depth_map_properties() {
        let nadir = camera(-FRAC_PI_2);
        let gdm = ground_depth_map(&nadir, (480, 256), 0.0).unwrap();
        assert_eq!(gdm.valid_count(), 480 * 256);
        // Optical-axis depth of a plane parallel to the image is constant, so
        // the principal point attains the minimum trivially.
        let pp = gdm.values[128 * 480 + 240];
        assert!((pp - 50.0).abs() < 1e-12);
        assert!(gdm.values.iter().all(|&l| (l - 50.0).abs() < 1e-9 && l >= pp - 1e-12));

        let shallow = camera(-20f64.to_radians());
        let gdm = ground_depth_map(&shallow, (480, 256), 0.0).unwrap();
        assert!(!gdm.valid[0]);
        assert!(gdm.valid[255 * 480]);
        for idx in 0..gdm.values.len() {
            let px = Pixel::at(idx % 480, idx / 480);
            let oracle = intersect_ray_plane(&pixel_ray(px, &shallow), 0.0);
            assert_eq!(gdm.valid[idx], oracle.is_some(), "pixel {idx}");
            match ground_depth(px, &shallow, 0.0) {
                Ok(l) => assert_eq!(l.to_bits(), gdm.values[idx].to_bits()),
                Err(_) => assert!(!gdm.valid[idx]),
            }
        }
    }

    #[test]
    fn uniform_bins() {
        let b = uniform_baseline_bins(1.0, 101.0, 100).unwrap();
        let DepthBins::Uniform { centers, .. } = &b else { panic!() };
        assert_eq!(centers.len(), 100);
        assert!((centers[0] - 1.5).abs() < 1e-12 && (centers[99] - 100.5).abs() < 1e-12);
        assert!(centers.windows(2).all(|w| w[1] > w[0]));
        let one = uniform_baseline_bins(1.0, 101.0, 1).unwrap();
        assert_eq!(one.m(), 1);
        let DepthBins::Uniform { centers, .. } = one else { panic!() };
        assert_eq!(centers, vec![51.0]);
        assert!(uniform_baseline_bins(0.0, 10.0, 3).is_err());
        assert!(uniform_baseline_bins(5.0, 4.0, 3).is_err());
    }

    fn one_pixel(l_b: f64, l_a: f64, m: usize, d: f64, surrogate: Surrogate) -> DepthDistribution {
        let cam = camera(-FRAC_PI_2);
        let cam = cam.with_resolution(1, 1).unwrap();
        let view = synthetic_view(&cam, vec![l_a]);
        let gdm = GroundDepthMap {
            width: 1,
            height: 1,
            values: vec![l_b],
            valid: vec![true],
            ground_z: 0.0,
        };
        estimate_p_ba(&view, &gdm, &DepthBins::ground_anchored(m, d).unwrap(), &surrogate, 5)
            .unwrap()
    }

    #[test]
    fn noise_free_exact_bin() {
        let p = one_pixel(70.0, 67.0, 10, 1.0, Surrogate::default());
        let mut expect = vec![0.0; 10];
        expect[2] = 1.0;
        assert_eq!(p.pixel(0), expect.as_slice());
        assert_eq!(p.range_exceeded, 0);
    }

    #[test]
    fn ground_pixel_lands_on_first_bin() {
        let p = one_pixel(70.0, 70.0, 10, 1.0, Surrogate::default());
        assert_eq!(p.pixel(0)[0], 1.0);
        assert_eq!(p.range_exceeded, 0);
    }

    #[test]
    fn triangular_split_and_snap() {
        let p = one_pixel(70.0, 66.3, 10, 1.0, Surrogate::default());
        assert!((p.pixel(0)[2] - 0.3).abs() < 1e-12);
        assert!((p.pixel(0)[3] - 0.7).abs() < 1e-12);
        let snap = one_pixel(70.0, 66.3, 10, 1.0, Surrogate::new(Kernel::Snap, NoiseModel::None));
        assert_eq!(snap.pixel(0)[3], 1.0);
    }

    #[test]
    fn out_of_range_is_counted() {
        let p = one_pixel(70.0, 55.0, 10, 1.0, Surrogate::default());
        assert_eq!(p.range_exceeded, 1);
        assert_eq!(p.pixel(0)[9], 1.0);
    }

    #[test]
    fn degenerate_single_bin() {
        let p = one_pixel(70.0, 65.0, 1, 0.0, Surrogate::default());
        assert_eq!(p.pixel(0), &[1.0]);
        let a = convert_to_p_a(
            &p,
            &GroundDepthMap {
                width: 1,
                height: 1,
                values: vec![70.0],
                valid: vec![true],
                ground_z: 0.0,
            },
        )
        .unwrap();
        assert_eq!(a.bin_value(0, 0), 70.0);
    }

    #[test]
    fn non_positive_bins_are_zeroed() {
        let noisy = Surrogate::new(Kernel::Triangular, NoiseModel::logit(1.0));
        let p = one_pixel(3.5, 3.0, 10, 1.0, noisy);
        let probs = p.pixel(0);
        assert!(probs[3..].iter().all(|&x| x == 0.0));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convert_relabels_without_touching_probabilities() {
        let noisy = Surrogate::new(Kernel::Triangular, NoiseModel::logit(1.0));
        let p_ba = one_pixel(70.0, 66.0, 10, 1.0, noisy);
        let gdm = GroundDepthMap {
            width: 1,
            height: 1,
            values: vec![70.0],
            valid: vec![true],
            ground_z: 0.0,
        };
        let p_a = convert_to_p_a(&p_ba, &gdm).unwrap();
        assert_eq!(p_a.probs, p_ba.probs);
        assert_eq!(p_a.frame, DepthFrame::A);
        assert_eq!(p_a.bin_value(0, 2), 67.0);
        assert!(convert_to_p_a(&p_a, &gdm).is_err());
    }

    #[test]
    fn noise_spec_parsing() {
        assert_eq!("none".parse::<NoiseModel>().unwrap(), NoiseModel::None);
        assert_eq!(
            "sigma=1.0".parse::<NoiseModel>().unwrap(),
            NoiseModel::LogitGaussian { sigma: 1.0, gain: DEFAULT_LOGIT_GAIN }
        );
        assert_eq!(
            "sigma=2,gain=3".parse::<NoiseModel>().unwrap(),
            NoiseModel::LogitGaussian { sigma: 2.0, gain: 3.0 }
        );
        assert_eq!(
            "eps=0.1".parse::<NoiseModel>().unwrap(),
            NoiseModel::UniformMixture { epsilon: 0.1 }
        );
        assert!("sigma=1,eps=0.1".parse::<NoiseModel>().is_err());
        assert!("eps=2".parse::<NoiseModel>().is_err());
        assert!("bogus".parse::<NoiseModel>().is_err());
    }

    #[test]
    fn sky_pixels_get_uniform_mass() {
        let p = one_pixel(70.0, 0.0, 4, 1.0, Surrogate::default());
        assert_eq!(p.pixel(0), &[0.25; 4]);
    }

    /// `n`-pixel row view with ground depths `l_b` and residuals `l_ba`.
    fn synthetic_row(l_b: &[f64], l_ba: &[f64]) -> (RenderedView, GroundDepthMap) {
        let n = l_b.len();
        let cam = camera(-FRAC_PI_2).with_resolution(n, 1).unwrap();
        let depths = l_b.iter().zip(l_ba).map(|(b, r)| b - r).collect();
        let gdm = GroundDepthMap {
            width: n,
            height: 1,
            values: l_b.to_vec(),
            valid: vec![true; n],
            ground_z: 0.0,
        };
        (synthetic_view(&cam, depths), gdm)
    }

    fn draws(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l_b = (0..n).map(|_| rng.random_range(55.0..95.0)).collect();
        let l_ba = (0..n).map(|_| rng.random_range(0.5..10.5)).collect();
        (l_b, l_ba)
    }

    /// Fraction of pixels whose argmax depth lies within `tol` of the truth.
    fn argmax_accuracy(dist: &DepthDistribution, truth: &[f64], tol: f64) -> f64 {
        let hits = (0..truth.len())
            .filter(|&i| (dist.bin_value(i, dist.argmax(i)) - truth[i]).abs() <= tol + 1e-9)
            .count();
        hits as f64 / truth.len() as f64
    }

    #[test]
    fn default_noise_calibration() {
        let (l_b, l_ba) = draws(10_000, 11);
        let (view, gdm) = synthetic_row(&l_b, &l_ba);
        let bins = DepthBins::ground_anchored(10, 1.0).unwrap();
        let s = Surrogate::new(Kernel::Triangular, NoiseModel::logit(1.0));
        let p = estimate_p_ba(&view, &gdm, &bins, &s, 3).unwrap();
        let hits = (0..l_ba.len())
            .filter(|&i| p.argmax(i) == (l_ba[i].round() as usize).clamp(1, 10) - 1)
            .count();
        let acc = hits as f64 / l_ba.len() as f64;
        assert!(acc >= 0.85, "argmax accuracy {acc}");
    }

    #[test]
    fn baseline_is_less_accurate() {
        let (l_b, l_ba) = draws(10_000, 12);
        let (view, gdm) = synthetic_row(&l_b, &l_ba);
        let s = Surrogate::new(Kernel::Triangular, NoiseModel::logit(1.0));
        let ground = estimate_p_ba(&view, &gdm, &DepthBins::ground_anchored(10, 1.0).unwrap(), &s, 3).unwrap();
        let ground = convert_to_p_a(&ground, &gdm).unwrap();
        let uniform = uniform_baseline_bins(1.0, 121.0, 10).unwrap();
        let base = estimate_p_a_uniform(&view, &gdm, &uniform, &s, 3).unwrap();
        let truth: Vec<f64> = view.depth_oracle.clone();
        let a_ground = argmax_accuracy(&ground, &truth, 0.5);
        let a_base = argmax_accuracy(&base, &truth, 0.5);
        assert!(a_base < a_ground, "baseline {a_base} vs ground-anchored {a_ground}");
    }

    #[test]
    fn expected_depth_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100;
        let (l_b, l_ba) = draws(n, 22);
        let (view, gdm) = synthetic_row(&l_b, &l_ba);
        let bins = DepthBins::ground_anchored(10, 1.0).unwrap();
        let mut p_ba = estimate_p_ba(&view, &gdm, &bins, &Surrogate::default(), 0).unwrap();
        for x in p_ba.probs.iter_mut() {
            *x = rng.random::<f64>();
        }
        for i in 0..n {
            let s: f64 = p_ba.pixel(i).iter().sum();
            p_ba.probs[i * 10..(i + 1) * 10].iter_mut().for_each(|x| *x /= s);
        }
        let p_a = convert_to_p_a(&p_ba, &gdm).unwrap();
        assert_eq!(
            p_a.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            p_ba.probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let mut e_ba = 0.0;
            let mut e_a = 0.0;
            for k in 0..10 {
                e_ba += p_ba.pixel(i)[k] * (k + 1) as f64;
                e_a += p_a.pixel(i)[k] * (l_b[i] - (k + 1) as f64);
            }
            assert!((e_a - (l_b[i] - e_ba)).abs() <= 1e-9);
            assert!((p_a.expected_value(i) - e_a).abs() <= 1e-9);
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let (l_b, l_ba) = draws(2_000, 5);
        let (view, gdm) = synthetic_row(&l_b, &l_ba);
        let bins = DepthBins::ground_anchored(10, 1.0).unwrap();
        for noise in [NoiseModel::None, NoiseModel::logit(2.0), NoiseModel::UniformMixture { epsilon: 0.3 }] {
            for kernel in [Kernel::Triangular, Kernel::Snap] {
                let p = estimate_p_ba(&view, &gdm, &bins, &Surrogate::new(kernel, noise), 9).unwrap();
                for i in 0..l_b.len() {
                    let s: f64 = p.pixel(i).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                    assert!(p.pixel(i).iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn estimate_is_deterministic_per_seed() {
        let (l_b, l_ba) = draws(500, 6);
        let (view, gdm) = synthetic_row(&l_b, &l_ba);
        let bins = DepthBins::ground_anchored(10, 1.0).unwrap();
        let s = Surrogate::new(Kernel::Triangular, NoiseModel::logit(1.0));
        let a = estimate_p_ba(&view, &gdm, &bins, &s, 1).unwrap();
        let b = estimate_p_ba(&view, &gdm, &bins, &s, 1).unwrap();
        let c = estimate_p_ba(&view, &gdm, &bins, &s, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.probs, c.probs);
    }

    proptest! {
        #[test]
        fn ground_depth_matches_ray_plane(
            yaw in -std::f64::consts::PI..std::f64::consts::PI,
            pitch_deg in -90.0f64..-20.0,
            height in 20.0f64..80.0,
            u in 0.0f64..480.0,
            v in 0.0f64..256.0,
        ) {
            let intr = Intrinsics::from_fov(70f64.to_radians(), 480, 256);
            let cam = Camera::from_pose(
                intr, Vector3::new(3.0, -2.0, height), yaw, pitch_deg.to_radians(), 480, 256,
            ).unwrap();
            let px = Pixel::new(u, v);
            match intersect_ray_plane(&pixel_ray(px, &cam), 0.0) {
                Some((hit, _)) => {
                    let oracle = cam.to_camera_frame(&hit).z;
                    let l = ground_depth(px, &cam, 0.0).unwrap();
                    prop_assert!((l - oracle).abs() <= 1e-9 * oracle);
                }
                None => prop_assert!(ground_depth(px, &cam, 0.0).is_err()),
            }
        }

        #[test]
        fn nearest_bin_within_half_spacing(
            l_b in 20.0f64..150.0,
            m in 1usize..20,
            d in 0.1f64..2.0,
            frac in 0.0f64..1.0,
        ) {
            // True depth anywhere on the ground-anchored support.
            let l_a = l_b - m as f64 * d + frac * (m as f64 - 1.0) * d;
            let nearest = (1..=m)
                .map(|k| (l_b - k as f64 * d - l_a).abs())
                .fold(f64::INFINITY, f64::min);
            prop_assert!(nearest <= d / 2.0 + 1e-9);
        }
    }
}
