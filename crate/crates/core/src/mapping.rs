//! Lift-splat into a shared world voxel grid, multi-agent fusion, BEV
//! collapse and peak detection.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthDistribution, DepthFrame};
use crate::error::{Error, Result};
use crate::geometry::{backproject, Camera};
use crate::scene::FeatureImage;

const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub resolution: f64,
    /// World position of the grid's local origin.
    pub origin: Vector3<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_range: [-51.2, 51.2],
            y_range: [-51.2, 51.2],
            z_range: [-5.0, 3.0],
            resolution: 0.8,
            origin: Vector3::zeros(),
        }
    }
}

fn cells(range: [f64; 2], res: f64) -> Result<usize> {
    let n = (range[1] - range[0]) / res;
    let rounded = n.round();
    if !(range[1] > range[0]) || (n - rounded).abs() > RANGE_TOLERANCE * rounded.max(1.0) {
        return Err(Error::Config(format!(
            "range {range:?} is not a positive multiple of resolution {res}"
        )));
    }
    Ok(rounded as usize)
}

impl GridSpec {
    pub fn anchored(origin: Vector3<f64>) -> Self {
        GridSpec {
            origin,
            ..GridSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::Config(format!("resolution must be positive, got {}", self.resolution)));
        }
        cells(self.x_range, self.resolution)?;
        cells(self.y_range, self.resolution)?;
        cells(self.z_range, self.resolution)?;
        Ok(())
    }

    /// Voxel counts `(nx, ny, nz)`. Assumes a validated spec.
    pub fn dims(&self) -> (usize, usize, usize) {
        let n = |r: [f64; 2]| ((r[1] - r[0]) / self.resolution).round() as usize;
        (n(self.x_range), n(self.y_range), n(self.z_range))
    }

    pub fn voxel_count(&self) -> usize {
        let (nx, ny, nz) = self.dims();
        nx * ny * nz
    }

    /// Continuous voxel coordinates of a world point; voxel `i` spans
    /// `[i, i + 1)`.
    pub fn local_coords(&self, p: &Vector3<f64>) -> [f64; 3] {
        let l = p - self.origin;
        [
            (l.x - self.x_range[0]) / self.resolution,
            (l.y - self.y_range[0]) / self.resolution,
            (l.z - self.z_range[0]) / self.resolution,
        ]
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let c = self.local_coords(p);
        let (nx, ny, nz) = self.dims();
        let idx = |x: f64, n: usize| {
            let f = x.floor();
            (f >= 0.0 && f < n as f64).then_some(f as usize)
        };
        Some([idx(c[0], nx)?, idx(c[1], ny)?, idx(c[2], nz)?])
    }

    pub fn linear(&self, v: [usize; 3]) -> usize {
        let (_, ny, nz) = self.dims();
        (v[0] * ny + v[1]) * nz + v[2]
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        let r = self.resolution;
        self.origin
            + Vector3::new(
                self.x_range[0] + (v[0] as f64 + 0.5) * r,
                self.y_range[0] + (v[1] as f64 + 0.5) * r,
                self.z_range[0] + (v[2] as f64 + 0.5) * r,
            )
    }

    /// World `(x, y)` of the center of BEV cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let r = self.resolution;
        (
            self.origin.x + self.x_range[0] + (i as f64 + 0.5) * r,
            self.origin.y + self.y_range[0] + (j as f64 + 0.5) * r,
        )
    }
}

/// Voxel accumulator. Layout is x-major: voxel `(i, j, k)` lives at
/// `(i·ny + j)·nz + k`, features at `voxel·channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub mass: Vec<f64>,
    /// Mass contributed by object-masked pixels only.
    pub object_mass: Vec<f64>,
    pub feat: Vec<f64>,
    /// Ids of the agents accumulated into this grid, ascending.
    pub agents: Vec<usize>,
}

impl WorldGrid {
    pub fn new(spec: GridSpec, channels: usize) -> Result<Self> {
        spec.validate()?;
        let n = spec.voxel_count();
        Ok(WorldGrid {
            spec,
            channels,
            mass: vec![0.0; n],
            object_mass: vec![0.0; n],
            feat: vec![0.0; n * channels],
            agents: Vec::new(),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.spec.dims()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_object_mass(&self) -> f64 {
        self.object_mass.iter().sum()
    }

    fn deposit(&mut self, voxel: usize, weight: f64, object: bool, feature: &[f32]) {
        self.mass[voxel] += weight;
        if object {
            self.object_mass[voxel] += weight;
        }
        let c = self.channels;
        for (dst, &f) in self.feat[voxel * c..(voxel + 1) * c].iter_mut().zip(feature) {
            *dst += weight * f as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub channels: usize,
    /// `nx × ny`, row `i` is x.
    pub mass: Vec<f64>,
    pub object_mass: Vec<f64>,
    pub feat: Vec<f64>,
}

impl BevGrid {
    pub fn dims(&self) -> (usize, usize) {
        let (nx, ny, _) = self.spec.dims();
        (nx, ny)
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// What one agent sends to the ego: its features, frame-A depth
/// distribution, object mask and camera.
#[derive(Debug, Clone, Copy)]
pub struct AgentMessage<'a> {
    pub agent_id: usize,
    pub features: &'a FeatureImage,
    pub p_a: &'a DepthDistribution,
    pub mask: &'a [bool],
    pub camera: &'a Camera,
}

impl<'a> AgentMessage<'a> {
    pub fn new(
        agent_id: usize,
        features: &'a FeatureImage,
        p_a: &'a DepthDistribution,
        mask: &'a [bool],
        camera: &'a Camera,
    ) -> Result<Self> {
        let (w, h) = (features.width, features.height);
        if p_a.width != w || p_a.height != h || mask.len() != w * h {
            return Err(Error::Config(format!(
                "agent {agent_id}: features {w}x{h}, depth {}x{}, mask {}",
                p_a.width,
                p_a.height,
                mask.len()
            )));
        }
        if (camera.width(), camera.height()) != (w, h) {
            return Err(Error::Config(format!("agent {agent_id}: camera resolution differs")));
        }
        if p_a.frame != DepthFrame::A {
            return Err(Error::Config(format!("agent {agent_id}: depth must be in frame A")));
        }
        Ok(AgentMessage {
            agent_id,
            features,
            p_a,
            mask,
            camera,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftEntry {
    pub depth: f64,
    pub weight: f64,
    pub feature: Vec<f64>,
}

/// Outer product of one pixel's feature with its depth distribution.
pub fn lift(feature: &[f32], probs: &[f64], depths: &[f64]) -> Vec<LiftEntry> {
    probs
        .iter()
        .zip(depths)
        .map(|(&p, &depth)| LiftEntry {
            depth,
            weight: p,
            feature: feature.iter().map(|&f| p * f as f64).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplatMode {
    #[default]
    Nearest,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseOp {
    #[default]
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplatStats {
    pub valid_pixels: usize,
    pub added: f64,
    pub dropped: f64,
    pub object_added: f64,
}

/// One accepted or dropped lifted point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatRecord {
    pub pixel: usize,
    pub bin: usize,
    pub point: Vector3<f64>,
    pub weight: f64,
    pub object: bool,
}

struct Deposit {
    pixel: usize,
    voxel: usize,
    weight: f64,
}

/// Deposit list of one image row plus the mass it dropped.
#[derive(Default)]
struct RowSplat {
    deposits: Vec<Deposit>,
    dropped: f64,
    valid: usize,
    log: Vec<SplatRecord>,
}

fn trilinear_targets(spec: &GridSpec, p: &Vector3<f64>, weight: f64, out: &mut Vec<(usize, f64)>) -> f64 {
    let (nx, ny, nz) = spec.dims();
    let c = spec.local_coords(p);
    // Offsets from the lower neighboring voxel center.
    let base: Vec<(f64, f64)> = c.iter().map(|&x| ((x - 0.5).floor(), x - 0.5 - (x - 0.5).floor())).collect();
    let n = [nx, ny, nz];
    let mut dropped = 0.0;
    for corner in 0..8 {
        let mut w = weight;
        let mut v = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            let (b, f) = base[a];
            w *= if hi { f } else { 1.0 - f };
            let i = b + hi as usize as f64;
            if i < 0.0 || i >= n[a] as f64 {
                inside = false;
            } else {
                v[a] = i as usize;
            }
        }
        if w == 0.0 {
            continue;
        }
        if inside {
            out.push((spec.linear(v), w));
        } else {
            dropped += w;
        }
    }
    dropped
}

fn splat_row(msg: &AgentMessage<'_>, spec: &GridSpec, mode: SplatMode, row: usize, log: bool) -> Result<RowSplat> {
    let w = msg.p_a.width;
    let m = msg.p_a.m();
    let mut out = RowSplat::default();
    let mut targets = Vec::with_capacity(8);
    for col in 0..w {
        let idx = row * w + col;
        if !msg.p_a.valid[idx] {
            continue;
        }
        out.valid += 1;
        let px = crate::geometry::Pixel::at(col, row);
        let probs = msg.p_a.pixel(idx);
        for (bin, &p) in probs.iter().enumerate().take(m) {
            if p == 0.0 {
                continue;
            }
            let depth = msg.p_a.bin_value(idx, bin);
            let point = backproject(px, depth, msg.camera)?;
            if log {
                out.log.push(SplatRecord {
                    pixel: idx,
                    bin,
                    point,
                    weight: p,
                    object: msg.mask[idx],
                });
            }
            match mode {
                SplatMode::Nearest => match spec.voxel_of(&point) {
                    Some(v) => out.deposits.push(Deposit {
                        pixel: idx,
                        voxel: spec.linear(v),
                        weight: p,
                    }),
                    None => out.dropped += p,
                },
                SplatMode::Trilinear => {
                    targets.clear();
                    out.dropped += trilinear_targets(spec, &point, p, &mut targets);
                    out.deposits.extend(targets.iter().map(|&(voxel, weight)| Deposit {
                        pixel: idx,
                        voxel,
                        weight,
                    }));
                }
            }
        }
    }
    Ok(out)
}

/// Lifts every valid pixel of `msg` and accumulates it into `grid`.
/// Rows are lifted in parallel and deposited in row order.
pub fn splat(msg: &AgentMessage<'_>, grid: &mut WorldGrid, mode: SplatMode) -> Result<SplatStats> {
    splat_impl(msg, grid, mode, false).map(|(s, _)| s)
}

/// [`splat`] that also returns every lifted point, in deposit order.
pub fn splat_logged(
    msg: &AgentMessage<'_>,
    grid: &mut WorldGrid,
    mode: SplatMode,
) -> Result<(SplatStats, Vec<SplatRecord>)> {
    splat_impl(msg, grid, mode, true)
}

fn splat_impl(
    msg: &AgentMessage<'_>,
    grid: &mut WorldGrid,
    mode: SplatMode,
    log: bool,
) -> Result<(SplatStats, Vec<SplatRecord>)> {
    if msg.features.channels != grid.channels {
        return Err(Error::Config(format!(
            "feature channels {} do not match grid channels {}",
            msg.features.channels, grid.channels
        )));
    }
    let spec = grid.spec.clone();
    let rows: Vec<RowSplat> = (0..msg.p_a.height)
        .into_par_iter()
        .map(|row| splat_row(msg, &spec, mode, row, log))
        .collect::<Result<_>>()?;
    let mut stats = SplatStats::default();
    let mut records = Vec::new();
    for row in rows {
        stats.valid_pixels += row.valid;
        stats.dropped += row.dropped;
        for d in &row.deposits {
            let object = msg.mask[d.pixel];
            grid.deposit(d.voxel, d.weight, object, msg.features.pixel(d.pixel));
            stats.added += d.weight;
            if object {
                stats.object_added += d.weight;
            }
        }
        records.extend(row.log);
    }
    if let Err(pos) = grid.agents.binary_search(&msg.agent_id) {
        grid.agents.insert(pos, msg.agent_id);
    }
    Ok((stats, records))
}

/// Splats each agent into its own grid, in parallel across agents.
pub fn splat_agents(
    msgs: &[AgentMessage<'_>],
    spec: &GridSpec,
    mode: SplatMode,
) -> Result<Vec<(WorldGrid, SplatStats)>> {
    msgs.par_iter()
        .map(|msg| {
            let mut grid = WorldGrid::new(spec.clone(), msg.features.channels)?;
            let stats = splat(msg, &mut grid, mode)?;
            Ok((grid, stats))
        })
        .collect()
}

/// Combines per-agent grids. Grids are accumulated in ascending order of
/// their lowest agent id, so the result does not depend on input order.
pub fn fuse(grids: &[WorldGrid], op: FuseOp) -> Result<WorldGrid> {
    let first = grids.first().ok_or_else(|| Error::Config("nothing to fuse".into()))?;
    if grids
        .iter()
        .any(|g| g.spec != first.spec || g.channels != first.channels)
    {
        return Err(Error::SpecMismatch);
    }
    let mut order: Vec<&WorldGrid> = grids.iter().collect();
    order.sort_by_key(|g| g.agents.first().copied().unwrap_or(usize::MAX));
    let mut out = WorldGrid::new(first.spec.clone(), first.channels)?;
    let combine = |a: &mut f64, b: f64| match op {
        FuseOp::Sum => *a += b,
        FuseOp::Max => *a = a.max(b),
    };
    for g in order {
        out.mass.iter_mut().zip(&g.mass).for_each(|(a, &b)| combine(a, b));
        out.object_mass
            .iter_mut()
            .zip(&g.object_mass)
            .for_each(|(a, &b)| combine(a, b));
        out.feat.iter_mut().zip(&g.feat).for_each(|(a, &b)| combine(a, b));
        out.agents.extend(&g.agents);
    }
    out.agents.sort_unstable();
    out.agents.dedup();
    Ok(out)
}

/// Sums the grid over z.
pub fn collapse_bev(grid: &WorldGrid) -> BevGrid {
    let (nx, ny, nz) = grid.dims();
    let c = grid.channels;
    let mut mass = vec![0.0; nx * ny];
    let mut object_mass = vec![0.0; nx * ny];
    let mut feat = vec![0.0; nx * ny * c];
    for col in 0..nx * ny {
        for k in 0..nz {
            let v = col * nz + k;
            mass[col] += grid.mass[v];
            object_mass[col] += grid.object_mass[v];
            for ch in 0..c {
                feat[col * c + ch] += grid.feat[v * c + ch];
            }
        }
    }
    BevGrid {
        spec: grid.spec.clone(),
        channels: c,
        mass,
        object_mass,
        feat,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    /// Minimum smoothed object mass of a peak.
    pub min_mass: f64,
    /// Peaks within this distance (meters) of a stronger one are suppressed.
    pub nms_radius: f64,
    /// Half-width in cells of the box filter applied before peak search.
    pub smooth_radius: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig {
            min_mass: 20.0,
            nms_radius: 2.4,
            smooth_radius: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Box-filtered sum over a `(2r + 1)²` window, via a summed-area table.
pub fn box_filter(values: &[f64], nx: usize, ny: usize, r: usize) -> Vec<f64> {
    let mut sat = vec![0.0; (nx + 1) * (ny + 1)];
    for i in 0..nx {
        for j in 0..ny {
            sat[(i + 1) * (ny + 1) + j + 1] =
                values[i * ny + j] + sat[i * (ny + 1) + j + 1] + sat[(i + 1) * (ny + 1) + j] - sat[i * (ny + 1) + j];
        }
    }
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx {
        let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(nx));
        for j in 0..ny {
            let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(ny));
            let s = sat[i1 * (ny + 1) + j1] - sat[i0 * (ny + 1) + j1] - sat[i1 * (ny + 1) + j0]
                + sat[i0 * (ny + 1) + j0];
            out[i * ny + j] = s.max(0.0);
        }
    }
    out
}

/// Object centers from the BEV object-mass channel: box-filter, 3×3 local
/// maxima above `min_mass`, greedy suppression by score, then centroid
/// refinement over the 3×3 window of the filtered map.
pub fn detect_peaks(bev: &BevGrid, cfg: &PeakConfig) -> Result<Vec<Detection>> {
    if cfg.nms_radius < bev.spec.resolution {
        return Err(Error::Config(format!(
            "nms_radius {} is below the grid resolution {}",
            cfg.nms_radius, bev.spec.resolution
        )));
    }
    let (nx, ny) = bev.dims();
    let s = box_filter(&bev.object_mass, nx, ny, cfg.smooth_radius);
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let v = s[i * ny + j];
            if v < cfg.min_mass || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                        continue;
                    }
                    let n = s[a as usize * ny + b as usize];
                    // Plateaus keep their first cell in scan order.
                    let earlier = (a, b) < (i as i64, j as i64);
                    if n > v || (n == v && earlier) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, i, j));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut kept: Vec<Detection> = Vec::new();
    for (score, i, j) in peaks {
        let (mut wx, mut wy, mut w) = (0.0, 0.0, 0.0);
        for a in i.saturating_sub(1)..(i + 2).min(nx) {
            for b in j.saturating_sub(1)..(j + 2).min(ny) {
                let m = s[a * ny + b];
                let (x, y) = bev.spec.cell_center(a, b);
                wx += m * x;
                wy += m * y;
                w += m;
            }
        }
        let det = Detection {
            x: wx / w,
            y: wy / w,
            score,
        };
        let suppressed = kept
            .iter()
            .any(|k| (k.x - det.x).hypot(k.y - det.y) <= cfg.nms_radius);
        if !suppressed {
            kept.push(det);
        }
    }
    Ok(kept)
}
