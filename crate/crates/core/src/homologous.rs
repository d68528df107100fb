//! Homologous pixel pairs across views and the multi-view consistency loss.
//!
//! For a pair `(P, Q)` with expected depths `z_P`, `z_Q` the backprojections
//! are `P̃ = R⁻¹(K⁻¹·P̄·z_P − T)` and likewise for `Q̃`; the loss over a batch
//! of `N` pairs is `L = (1/N)·Σ ‖P̃ − Q̃‖²`.
//!
//! Depths enter through categorical distributions over per-pixel bin depths,
//! so gradients flow back to the logits through the softmax.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{ground_depth, DepthDistribution, DepthFrame};
use crate::error::{Error, Result};
use crate::geometry::{backproject, Camera, Pixel};
use crate::scene::RenderedView;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomologousPair {
    pub view_i: usize,
    pub view_j: usize,
    pub p: Pixel,
    pub q: Pixel,
    pub correlation: f64,
}

impl HomologousPair {
    pub fn swapped(&self) -> Self {
        HomologousPair {
            view_i: self.view_j,
            view_j: self.view_i,
            p: self.q,
            q: self.p,
            correlation: self.correlation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<HomologousPair>,
}

impl PairBatch {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// True when no `(view, pixel)` occurs in more than one pair.
    pub fn is_one_to_one(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.pairs.iter().all(|pr| {
            seen.insert(PixelKey::new(pr.view_i, pr.p)) && seen.insert(PixelKey::new(pr.view_j, pr.q))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    /// Ground-truth object mask from the renderer.
    #[default]
    Oracle,
    /// Pixels whose descriptor norm exceeds `threshold`.
    DescriptorEnergy { threshold: f64 },
}

pub fn extraction_mask(view: &RenderedView, source: MaskSource) -> Vec<bool> {
    match source {
        MaskSource::Oracle => view.mask.clone(),
        MaskSource::DescriptorEnergy { threshold } => (0..view.mask.len())
            .map(|i| {
                let e: f64 = view.features.pixel(i).iter().map(|&x| (x as f64).powi(2)).sum();
                e.sqrt() > threshold
            })
            .collect(),
    }
}

/// Unit-normalized descriptors of the selected pixels.
fn normalized(view: &RenderedView, mask: &[bool]) -> (Vec<usize>, Vec<f64>) {
    let c = view.features.channels;
    let mut idx = Vec::new();
    let mut data = Vec::new();
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let f = view.features.pixel(i);
        let norm = f.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            idx.push(i);
            data.extend(f.iter().map(|&x| x as f64 / norm));
        }
    }
    debug_assert_eq!(data.len(), idx.len() * c);
    (idx, data)
}

/// For each row of `a`, the best-correlated row of `b` (lowest index on ties).
fn best_matches(a: &[f64], b: &[f64], c: usize) -> Vec<Option<(usize, f64)>> {
    a.par_chunks(c)
        .map(|x| {
            let mut best: Option<(usize, f64)> = None;
            for (j, y) in b.chunks(c).enumerate() {
                let s: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((j, s));
                }
            }
            best
        })
        .collect()
}

/// Mutual-best cosine matches between masked pixels of two views, kept at
/// correlation ≥ `tau`, sorted by correlation (descending) then pixel
/// indices, truncated to `n_max`.
pub fn extract_pairs(
    view_i: &RenderedView,
    mask_i: &[bool],
    view_j: &RenderedView,
    mask_j: &[bool],
    tau: f64,
    n_max: usize,
) -> Result<PairBatch> {
    let edges = mutual_best(view_i, mask_i, view_j, mask_j, tau)?;
    Ok(PairBatch {
        pairs: edges
            .into_iter()
            .take(n_max)
            .map(|(corr, a, b)| HomologousPair {
                view_i: view_i.cam_index,
                view_j: view_j.cam_index,
                p: view_i.pixel_of(a),
                q: view_j.pixel_of(b),
                correlation: corr,
            })
            .collect(),
    })
}

fn check_extract_args(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("correlation threshold must lie in (0, 1], got {tau}")));
    }
    Ok(())
}

fn mutual_best(
    view_i: &RenderedView,
    mask_i: &[bool],
    view_j: &RenderedView,
    mask_j: &[bool],
    tau: f64,
) -> Result<Vec<(f64, usize, usize)>> {
    check_extract_args(tau)?;
    if view_i.features.channels != view_j.features.channels {
        return Err(Error::Config("views have different descriptor sizes".into()));
    }
    let c = view_i.features.channels;
    let (ia, da) = normalized(view_i, mask_i);
    let (ib, db) = normalized(view_j, mask_j);
    if ia.is_empty() || ib.is_empty() {
        return Ok(Vec::new());
    }
    let ab = best_matches(&da, &db, c);
    let ba = best_matches(&db, &da, c);
    let mut edges: Vec<(f64, usize, usize)> = ab
        .iter()
        .enumerate()
        .filter_map(|(a, m)| {
            let (b, s) = (*m)?;
            let back = ba[b]?.0;
            (back == a && s >= tau).then_some((s.min(1.0), ia[a], ib[b]))
        })
        .collect();
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    Ok(edges)
}

/// Pairs over every view pair `i < j`, merged by correlation, with each
/// `(view, pixel)` used at most once, truncated to `n_max`.
pub fn extract_batch(views: &[RenderedView], masks: &[Vec<bool>], tau: f64, n_max: usize) -> Result<PairBatch> {
    check_extract_args(tau)?;
    let mut all = Vec::new();
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            let b = extract_pairs(&views[i], &masks[i], &views[j], &masks[j], tau, usize::MAX)?;
            all.extend(b.pairs);
        }
    }
    all.sort_by(|x, y| {
        y.correlation.total_cmp(&x.correlation).then_with(|| {
            let kx = (x.view_i, x.view_j, pixel_order(x.p), pixel_order(x.q));
            let ky = (y.view_i, y.view_j, pixel_order(y.p), pixel_order(y.q));
            kx.partial_cmp(&ky).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut used = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for pr in all {
        if pairs.len() >= n_max {
            break;
        }
        let (a, b) = (PixelKey::new(pr.view_i, pr.p), PixelKey::new(pr.view_j, pr.q));
        if used.contains(&a) || used.contains(&b) {
            continue;
        }
        used.insert(a);
        used.insert(b);
        pairs.push(pr);
    }
    Ok(PairBatch { pairs })
}

fn pixel_order(p: Pixel) -> (f64, f64) {
    (p.v, p.u)
}

/// Hashable `(view, pixel)` identity; pixel coordinates compared bitwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelKey {
    pub view: usize,
    u: u64,
    v: u64,
}

impl PixelKey {
    pub fn new(view: usize, px: Pixel) -> Self {
        PixelKey {
            view,
            u: px.u.to_bits(),
            v: px.v.to_bits(),
        }
    }
}

/// `Σ_k p_k·l_k`.
pub fn expected_depth(probs: &[f64], depths: &[f64]) -> f64 {
    probs.iter().zip(depths).map(|(p, l)| p * l).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Backproject each pixel once, at its expected depth.
    #[default]
    ExpectedDepth,
    /// Expectation of the squared distance over independent bin choices of
    /// both pixels.
    BinExpectation,
}

fn cam_for(cams: &[Camera], view: usize) -> Result<&Camera> {
    cams.get(view)
        .ok_or_else(|| Error::Config(format!("no camera for view {view}")))
}

/// Batch loss with depths read from per-view frame-A distributions.
/// Pixels must lie on the integer grid of their view.
pub fn consistency_loss(batch: &PairBatch, dists: &[DepthDistribution], cams: &[Camera]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lookup = |view: usize, px: Pixel| -> Result<(Vec<f64>, Vec<f64>)> {
        let d = dists
            .get(view)
            .ok_or_else(|| Error::Config(format!("no depth distribution for view {view}")))?;
        if d.frame != DepthFrame::A {
            return Err(Error::Config("consistency loss needs frame-A distributions".into()));
        }
        let (col, row) = (px.u.round(), px.v.round());
        if col != px.u || row != px.v || col < 0.0 || row < 0.0 || col as usize >= d.width || row as usize >= d.height {
            return Err(Error::Config(format!("pixel ({}, {}) is not on the grid of view {view}", px.u, px.v)));
        }
        let idx = row as usize * d.width + col as usize;
        if !d.valid[idx] {
            return Err(Error::Config(format!("pixel ({}, {}) of view {view} has no depth", px.u, px.v)));
        }
        Ok((d.pixel(idx).to_vec(), d.bin_values(idx)))
    };
    let mut total = 0.0;
    for pr in &batch.pairs {
        let (pp, lp) = lookup(pr.view_i, pr.p)?;
        let (pq, lq) = lookup(pr.view_j, pr.q)?;
        let a = backproject(pr.p, expected_depth(&pp, &lp), cam_for(cams, pr.view_i)?)?;
        let b = backproject(pr.q, expected_depth(&pq, &lq), cam_for(cams, pr.view_j)?)?;
        total += (a - b).norm_squared();
    }
    Ok(total / batch.n() as f64)
}

/// A pixel's trainable categorical depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthVariable {
    pub view: usize,
    pub pixel: Pixel,
    pub depths: Vec<f64>,
    pub logits: Vec<f64>,
    /// Frozen variables keep their logits during refinement.
    pub frozen: bool,
}

impl DepthVariable {
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn expected(&self) -> f64 {
        expected_depth(&self.probs(), &self.depths)
    }

    fn moments(&self) -> (Vec<f64>, f64, f64) {
        let p = self.probs();
        let mean = expected_depth(&p, &self.depths);
        let var: f64 = p.iter().zip(&self.depths).map(|(p, l)| p * (l - mean).powi(2)).sum();
        (p, mean, var)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Logits of a discretized Gaussian centered on `target`.
pub fn soft_logits(depths: &[f64], target: f64, width: f64) -> Vec<f64> {
    depths
        .iter()
        .map(|l| -(l - target).powi(2) / (2.0 * width * width))
        .collect()
}

/// Ground-anchored bin depths `l_B − k·d`, `k = 1..=m`, at any (sub)pixel.
pub fn ground_anchored_depths(px: Pixel, cam: &Camera, z_w: f64, m: usize, d: f64) -> Result<Vec<f64>> {
    let l_b = ground_depth(px, cam, z_w)?;
    Ok((1..=m).map(|k| l_b - k as f64 * d).collect())
}

/// Loss term of one pair and `(variable, dL/dmean, dL/dvar)` per endpoint.
type PairTerm = (f64, [(usize, f64, f64); 2]);

/// Trainable depths for the pixels of a pair batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefinableDepth {
    pub vars: Vec<DepthVariable>,
    index: HashMap<PixelKey, usize>,
}

impl RefinableDepth {
    pub fn new(vars: Vec<DepthVariable>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, v) in vars.iter().enumerate() {
            if v.depths.is_empty() || v.depths.len() != v.logits.len() {
                return Err(Error::Config(format!("depth variable {i} has mismatched bins and logits")));
            }
            if index.insert(PixelKey::new(v.view, v.pixel), i).is_some() {
                return Err(Error::Config(format!("duplicate depth variable for view {}", v.view)));
            }
        }
        Ok(RefinableDepth { vars, index })
    }

    /// One variable per distinct `(view, pixel)` of `batch`, in batch order.
    pub fn for_batch(
        batch: &PairBatch,
        mut make: impl FnMut(usize, Pixel) -> Result<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut vars = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for pr in &batch.pairs {
            for (view, px) in [(pr.view_i, pr.p), (pr.view_j, pr.q)] {
                if seen.insert(PixelKey::new(view, px)) {
                    let (depths, logits) = make(view, px)?;
                    vars.push(DepthVariable {
                        view,
                        pixel: px,
                        depths,
                        logits,
                        frozen: false,
                    });
                }
            }
        }
        Self::new(vars)
    }

    /// Ground-anchored variables initialized as soft distributions around
    /// `truth + N(0, sigma²)`.
    #[allow(clippy::too_many_arguments)]
    pub fn perturbed(
        batch: &PairBatch,
        cams: &[Camera],
        z_w: f64,
        m: usize,
        d: f64,
        sigma: f64,
        seed: u64,
        truth: impl Fn(usize, Pixel) -> Result<f64>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::for_batch(batch, |view, px| {
            let depths = ground_anchored_depths(px, cam_for(cams, view)?, z_w, m, d)?;
            let noise: f64 = rng.sample(StandardNormal);
            let target = truth(view, px)? + sigma * noise;
            let logits = soft_logits(&depths, target, d.max(1e-3));
            Ok((depths, logits))
        })
    }

    pub fn get(&self, view: usize, px: Pixel) -> Option<&DepthVariable> {
        self.index.get(&PixelKey::new(view, px)).map(|&i| &self.vars[i])
    }

    fn lookup(&self, view: usize, px: Pixel) -> Result<usize> {
        self.index
            .get(&PixelKey::new(view, px))
            .copied()
            .ok_or_else(|| Error::Config(format!("no depth variable for pixel ({}, {}) of view {view}", px.u, px.v)))
    }

    pub fn loss(&self, batch: &PairBatch, cams: &[Camera], mode: LossMode) -> Result<f64> {
        Ok(self.evaluate(batch, cams, mode, false)?.0)
    }

    /// Loss and its gradient with respect to every variable's logits
    /// (zero for frozen variables).
    pub fn loss_gradient(&self, batch: &PairBatch, cams: &[Camera], mode: LossMode) -> Result<(f64, Vec<Vec<f64>>)> {
        self.evaluate(batch, cams, mode, true)
    }

    fn evaluate(&self, batch: &PairBatch, cams: &[Camera], mode: LossMode, grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.n() as f64;
        let moments: Vec<(Vec<f64>, f64, f64)> = self.vars.iter().map(|v| v.moments()).collect();
        // Per pair: loss term, dL/dmean and dL/dvar of both endpoints.
        let terms: Vec<PairTerm> = batch
            .pairs
            .par_iter()
            .map(|pr| {
                let a = self.lookup(pr.view_i, pr.p)?;
                let b = self.lookup(pr.view_j, pr.q)?;
                let (ca, cb) = (cam_for(cams, pr.view_i)?, cam_for(cams, pr.view_j)?);
                let (za, va) = (moments[a].1, moments[a].2);
                let (zb, vb) = (moments[b].1, moments[b].2);
                let pa = backproject(pr.p, za, ca)?;
                let pb = backproject(pr.q, zb, cb)?;
                let (ra, rb) = (ca.ray_direction(pr.p), cb.ray_direction(pr.q));
                let diff = pa - pb;
                let mut loss = diff.norm_squared();
                let (mut gva, mut gvb) = (0.0, 0.0);
                if mode == LossMode::BinExpectation {
                    loss += va * ra.norm_squared() + vb * rb.norm_squared();
                    gva = ra.norm_squared() / n;
                    gvb = rb.norm_squared() / n;
                }
                let gza = 2.0 * diff.dot(&ra) / n;
                let gzb = -2.0 * diff.dot(&rb) / n;
                Ok((loss, [(a, gza, gva), (b, gzb, gvb)]))
            })
            .collect::<Result<_>>()?;
        let loss = terms.iter().map(|t| t.0).sum::<f64>() / n;
        if !grad {
            return Ok((loss, Vec::new()));
        }
        let mut dz = vec![0.0; self.vars.len()];
        let mut dvar = vec![0.0; self.vars.len()];
        for (_, ends) in &terms {
            for &(v, gz, gv) in ends {
                dz[v] += gz;
                dvar[v] += gv;
            }
        }
        let gradient = self
            .vars
            .iter()
            .enumerate()
            .map(|(i, var)| {
                if var.frozen {
                    return vec![0.0; var.logits.len()];
                }
                let (p, mean, variance) = &moments[i];
                p.iter()
                    .zip(&var.depths)
                    .map(|(&pj, &l)| {
                        let dmean = pj * (l - mean);
                        let dvariance = pj * ((l - mean).powi(2) - variance);
                        dz[i] * dmean + dvar[i] * dvariance
                    })
                    .collect()
            })
            .collect();
        Ok((loss, gradient))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    /// Initial step length of every iteration, in logit units per unit of
    /// `N·gradient`.
    pub step_size: f64,
    pub mode: LossMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 200,
            step_size: 1.0,
            mode: LossMode::ExpectedDepth,
        }
    }
}

const MIN_STEP: f64 = 1e-12;

/// Gradient descent on the logits. Each iteration starts from `step_size`
/// and halves until the loss does not increase; the returned trace holds
/// the accepted loss after every iteration, starting with the initial loss.
pub fn refine_depths(
    batch: &PairBatch,
    init: &RefinableDepth,
    cams: &[Camera],
    cfg: &RefineConfig,
) -> Result<(RefinableDepth, Vec<f64>)> {
    if cfg.steps == 0 {
        return Err(Error::Config("refinement needs at least one step".into()));
    }
    if !(cfg.step_size > 0.0) {
        return Err(Error::Config("step size must be positive".into()));
    }
    let n = batch.n() as f64;
    let mut cur = init.clone();
    let (mut loss, mut grad) = cur.loss_gradient(batch, cams, cfg.mode)?;
    let mut trace = vec![loss];
    for _ in 0..cfg.steps {
        let mut eta = cfg.step_size * n;
        let mut accepted = None;
        while eta >= MIN_STEP {
            let mut trial = cur.clone();
            for (var, g) in trial.vars.iter_mut().zip(&grad) {
                for (x, gx) in var.logits.iter_mut().zip(g) {
                    *x -= eta * gx;
                }
            }
            let l = trial.loss(batch, cams, cfg.mode)?;
            if l <= loss {
                accepted = Some((trial, l));
                break;
            }
            eta *= 0.5;
        }
        if let Some((next, l)) = accepted {
            cur = next;
            loss = l;
            grad = cur.loss_gradient(batch, cams, cfg.mode)?.1;
        }
        trace.push(loss);
    }
    Ok((cur, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub view_i: usize,
    pub view_j: usize,
    pub p_u: f64,
    pub p_v: f64,
    pub q_u: f64,
    pub q_v: f64,
    pub correlation: f64,
}

impl From<&HomologousPair> for PairRecord {
    fn from(p: &HomologousPair) -> Self {
        PairRecord {
            view_i: p.view_i,
            view_j: p.view_j,
            p_u: p.p.u,
            p_v: p.p.v,
            q_u: p.q.u,
            q_v: p.q.v,
            correlation: p.correlation,
        }
    }
}

impl From<&PairRecord> for HomologousPair {
    fn from(r: &PairRecord) -> Self {
        HomologousPair {
            view_i: r.view_i,
            view_j: r.view_j,
            p: Pixel::new(r.p_u, r.p_v),
            q: Pixel::new(r.q_u, r.q_v),
            correlation: r.correlation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
}
