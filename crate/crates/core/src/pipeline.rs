//! End-to-end run: scene, render, depth, splat, fuse, collapse, detect and
//! score, with an optional homologous-pair refinement stage.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth::{
    convert_to_p_a, estimate_p_a_uniform, estimate_p_ba, ground_depth_map, uniform_baseline_bins, DepthBins,
    DepthDistribution, DepthFrame, GroundDepthMap, Kernel, NoiseModel, Surrogate,
};
use crate::error::{Error, Result};
use crate::eval::{gt_centers, match_detections, mfms, DetectionReport, FmsReport, DETECTION_THRESHOLDS};
use crate::geometry::Camera;
use crate::homologous::{
    extract_batch, extraction_mask, refine_depths, MaskSource, PairBatch, PairRecord, RefinableDepth, RefineConfig,
    TraceRecord,
};
use crate::io;
use crate::mapping::{
    collapse_bev, detect_peaks, fuse, splat_agents, AgentMessage, BevGrid, Detection, FuseOp, GridSpec, PeakConfig,
    SplatMode, SplatStats, WorldGrid,
};
use crate::scene::{generate_scene, hash_words, render_rig, RenderedView, Scene, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinsMode {
    /// `M` residual-depth bins of width `d` anchored on the ground depth.
    #[default]
    Ground,
    /// `M` equal-width bins over `[depth_min, depth_max]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub bins: BinsMode,
    pub m: usize,
    pub d: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub noise: NoiseModel,
    pub kernel: Kernel,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            bins: BinsMode::Ground,
            m: 10,
            d: 1.0,
            depth_min: 1.0,
            depth_max: 121.0,
            noise: NoiseModel::logit(1.0),
            kernel: Kernel::Triangular,
        }
    }
}

impl DepthConfig {
    pub fn depth_bins(&self) -> Result<DepthBins> {
        match self.bins {
            BinsMode::Ground => DepthBins::ground_anchored(self.m, self.d),
            BinsMode::Uniform => uniform_baseline_bins(self.depth_min, self.depth_max, self.m),
        }
    }

    /// Ground-anchored bins covering residual depths up to `range` meters at
    /// spacing `d`; a zero range maps every pixel onto its ground depth.
    pub fn with_range(&self, range: f64) -> Result<Self> {
        let (m, d) = if range == 0.0 {
            (1, 0.0)
        } else {
            let m = (range / self.d).round();
            if m < 1.0 || (m * self.d - range).abs() > 1e-9 {
                return Err(Error::Config(format!("range {range} is not a multiple of d = {}", self.d)));
            }
            (m as usize, self.d)
        };
        Ok(DepthConfig {
            bins: BinsMode::Ground,
            m,
            d,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HplConfig {
    pub enabled: bool,
    pub tau: f64,
    pub n_max: usize,
    pub mask: MaskSource,
    /// Standard deviation of the initial expected-depth perturbation.
    pub sigma: f64,
    pub refine: RefineConfig,
}

impl Default for HplConfig {
    fn default() -> Self {
        HplConfig {
            enabled: false,
            tau: 0.999,
            n_max: 200,
            mask: MaskSource::Oracle,
            sigma: 2.0,
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Agents used, taken from the start of the rig; all when unset.
    pub n_uavs: Option<usize>,
    pub scene: SceneConfig,
    pub depth: DepthConfig,
    pub grid: GridSpec,
    /// Replace the grid origin with the ego UAV's nadir point.
    pub anchor_grid_to_ego: bool,
    pub splat: SplatMode,
    pub fuse: FuseOp,
    pub detect: PeakConfig,
    pub hpl: HplConfig,
    /// Artifact directory; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            n_uavs: None,
            scene: SceneConfig::default(),
            depth: DepthConfig::default(),
            grid: GridSpec::default(),
            anchor_grid_to_ego: true,
            splat: SplatMode::Nearest,
            fuse: FuseOp::Sum,
            detect: PeakConfig::default(),
            hpl: HplConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.grid.validate()?;
        self.depth.depth_bins()?;
        self.depth.noise.validate()?;
        if let Some(n) = self.n_uavs {
            if n == 0 || n > self.scene.n_uavs {
                return Err(Error::Config(format!("n_uavs = {n} must lie in 1..={}", self.scene.n_uavs)));
            }
            if self.scene.ego_index >= n {
                return Err(Error::Config("the ego UAV must be among the agents used".into()));
            }
        }
        if !(self.hpl.tau > 0.0 && self.hpl.tau <= 1.0) || self.hpl.n_max == 0 {
            return Err(Error::Config("hpl needs 0 < tau ≤ 1 and n_max ≥ 1".into()));
        }
        Ok(())
    }

    pub fn agent_count(&self) -> usize {
        self.n_uavs.unwrap_or(self.scene.n_uavs)
    }

    /// SHA-256 of the canonical config text, output directory excluded.
    pub fn digest(&self) -> Result<String> {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        Ok(sha256_hex(canonical.to_toml()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Scene, rendered views and ground depth maps of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: Scene,
    pub views: Vec<RenderedView>,
    pub gdms: Vec<GroundDepthMap>,
}

impl Prepared {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }
}

pub fn prepare(seed: u64, scene_cfg: &SceneConfig) -> Result<Prepared> {
    prepare_scene(generate_scene(seed, scene_cfg).map_err(|e| e.at("scene"))?)
}

/// Renders and computes ground depth maps for an existing scene.
pub fn prepare_scene(scene: Scene) -> Result<Prepared> {
    let views = render_rig(&scene).map_err(|e| e.at("render"))?;
    let gdms = views
        .par_iter()
        .map(|v| ground_depth_map(&v.camera, (v.width(), v.height()), scene.ground_z))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at("ground depth"))?;
    Ok(Prepared { scene, views, gdms })
}

/// Distribution of agent `k` in its native frame: residual depth for
/// ground-anchored bins, absolute depth for the uniform baseline.
pub fn estimate_native(cfg: &RunConfig, prep: &Prepared, k: usize) -> Result<DepthDistribution> {
    let bins = cfg.depth.depth_bins()?;
    let surrogate = Surrogate::new(cfg.depth.kernel, cfg.depth.noise);
    let (v, g) = (&prep.views[k], &prep.gdms[k]);
    let seed = hash_words(&[cfg.seed, prep.scene.seed, k as u64]);
    match bins {
        DepthBins::GroundAnchored { .. } => estimate_p_ba(v, g, &bins, &surrogate, seed),
        DepthBins::Uniform { .. } => estimate_p_a_uniform(v, g, &bins, &surrogate, seed),
    }
}

/// Frame-A distributions of the first `n` agents.
pub fn estimate_depths(cfg: &RunConfig, prep: &Prepared, n: usize) -> Result<(Vec<DepthDistribution>, usize)> {
    let dists: Vec<DepthDistribution> = (0..n)
        .into_par_iter()
        .map(|k| {
            let native = estimate_native(cfg, prep, k)?;
            match native.frame {
                DepthFrame::Ba => convert_to_p_a(&native, &prep.gdms[k]),
                DepthFrame::A => Ok(native),
            }
        })
        .collect::<Result<_>>()
        .map_err(|e| e.at("depth"))?;
    let exceeded = dists.iter().map(|d| d.range_exceeded).sum();
    Ok((dists, exceeded))
}

pub fn grid_spec(cfg: &RunConfig, scene: &Scene) -> GridSpec {
    let mut spec = cfg.grid.clone();
    if cfg.anchor_grid_to_ego {
        spec.origin = scene.ego_nadir();
    }
    spec
}

/// Splats every agent into its own grid and fuses them.
pub fn map_agents(
    cfg: &RunConfig,
    prep: &Prepared,
    dists: &[DepthDistribution],
) -> Result<(WorldGrid, Vec<SplatStats>)> {
    let msgs = dists
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let v = &prep.views[k];
            AgentMessage::new(k, &v.features, d, &v.mask, &v.camera)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at("map"))?;
    let spec = grid_spec(cfg, &prep.scene);
    let per_agent = splat_agents(&msgs, &spec, cfg.splat).map_err(|e| e.at("map"))?;
    let (grids, stats): (Vec<_>, Vec<_>) = per_agent.into_iter().unzip();
    let grid = fuse(&grids, cfg.fuse).map_err(|e| e.at("fuse"))?;
    Ok((grid, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HplReport {
    pub pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean absolute expected-depth error over the batch pixels.
    pub initial_depth_error: f64,
    pub final_depth_error: f64,
}

#[derive(Debug, Clone)]
pub struct HplOutput {
    pub report: HplReport,
    pub batch: PairBatch,
    pub trace: Vec<f64>,
}

fn oracle_depth(views: &[RenderedView], view: usize, px: crate::geometry::Pixel) -> Result<f64> {
    let v = &views[view];
    let idx = v
        .index_of(px)
        .ok_or_else(|| Error::Config(format!("pixel ({}, {}) is off the image", px.u, px.v)))?;
    Ok(v.depth_oracle[idx])
}

fn mean_depth_error(views: &[RenderedView], depths: &RefinableDepth) -> Result<f64> {
    let mut total = 0.0;
    for var in &depths.vars {
        total += (var.expected() - oracle_depth(views, var.view, var.pixel)?).abs();
    }
    Ok(total / depths.vars.len().max(1) as f64)
}

/// Extracts pairs across the first `n` views, perturbs their depths and
/// refines them against the consistency loss.
pub fn run_hpl(cfg: &RunConfig, prep: &Prepared, n: usize) -> Result<HplOutput> {
    let views = &prep.views[..n];
    let masks: Vec<Vec<bool>> = views.iter().map(|v| extraction_mask(v, cfg.hpl.mask)).collect();
    let batch = extract_batch(views, &masks, cfg.hpl.tau, cfg.hpl.n_max)?;
    refine_batch(cfg, prep, batch)
}

/// Perturbs the depths of an existing batch and refines them.
pub fn refine_batch(cfg: &RunConfig, prep: &Prepared, batch: PairBatch) -> Result<HplOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let views = &prep.views;
    if let Some(p) = batch.pairs.iter().find(|p| p.view_i.max(p.view_j) >= views.len()) {
        return Err(Error::Format(format!("pair references view {} of {}", p.view_i.max(p.view_j), views.len())));
    }
    let cams = prep.cameras();
    let bins_d = if cfg.depth.d > 0.0 { cfg.depth.d } else { 1.0 };
    let init = RefinableDepth::perturbed(
        &batch,
        &cams,
        prep.scene.ground_z,
        cfg.depth.m.max(2),
        bins_d,
        cfg.hpl.sigma,
        hash_words(&[cfg.seed, prep.scene.seed, 0x0048_504c]),
        |view, px| oracle_depth(views, view, px),
    )?;
    let (refined, trace) = refine_depths(&batch, &init, &cams, &cfg.hpl.refine)?;
    let report = HplReport {
        pairs: batch.n(),
        initial_loss: trace[0],
        final_loss: *trace.last().unwrap_or(&trace[0]),
        initial_depth_error: mean_depth_error(views, &init)?,
        final_depth_error: mean_depth_error(views, &refined)?,
    };
    Ok(HplOutput { report, batch, trace })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scene: Scene,
    pub grid: WorldGrid,
    pub bev: BevGrid,
    pub detections: Vec<Detection>,
    pub fms: FmsReport,
    pub detection: DetectionReport,
    pub splat_stats: Vec<SplatStats>,
    pub range_exceeded: usize,
    pub hpl: Option<HplOutput>,
}

/// Runs everything after [`prepare`] for an already prepared seed.
pub fn run_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<PipelineOutput> {
    cfg.validate()?;
    let n = cfg.agent_count().min(prep.views.len());
    let (dists, range_exceeded) = estimate_depths(cfg, prep, n)?;
    let (grid, splat_stats) = map_agents(cfg, prep, &dists)?;
    let bev = collapse_bev(&grid);
    let detections = detect_peaks(&bev, &cfg.detect).map_err(|e| e.at("detect"))?;
    let fms = mfms(&grid, &prep.scene).map_err(|e| e.at("metrics"))?;
    let detection = match_detections(&detections, &gt_centers(&prep.scene), &DETECTION_THRESHOLDS);
    let hpl = if cfg.hpl.enabled {
        Some(run_hpl(cfg, prep, n).map_err(|e| e.at("hpl"))?)
    } else {
        None
    };
    Ok(PipelineOutput {
        scene: prep.scene.clone(),
        grid,
        bev,
        detections,
        fms,
        detection,
        splat_stats,
        range_exceeded,
        hpl,
    })
}

/// Full run; writes artifacts and a manifest when `output_dir` is set.
pub fn run_pipeline(cfg: &RunConfig) -> Result<(PipelineOutput, Option<Manifest>)> {
    cfg.validate()?;
    let prep = prepare(cfg.seed, &cfg.scene)?;
    let out = run_prepared(cfg, &prep)?;
    let manifest = match &cfg.output_dir {
        Some(dir) => Some(write_artifacts(cfg, &out, dir).map_err(|e| e.at("write"))?),
        None => None,
    };
    Ok((out, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metrics {
    mfms: f64,
    map_mean: f64,
    mate: Option<f64>,
    range_exceeded: usize,
    detection: DetectionReport,
    hpl: Option<HplReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct FmsRecord {
    object_id: i32,
    fms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct StatsRecord {
    agent: usize,
    valid_pixels: usize,
    added: f64,
    dropped: f64,
    object_added: f64,
}

/// BEV object mass as an image with +x to the right and +y up.
pub fn bev_image(bev: &BevGrid) -> (usize, usize, Vec<f64>) {
    let (nx, ny) = bev.dims();
    let mut img = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            img[(ny - 1 - j) * nx + i] = bev.object_mass[i * ny + j];
        }
    }
    (nx, ny, img)
}

pub fn write_artifacts(cfg: &RunConfig, out: &PipelineOutput, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<&str> = Vec::new();
    let canonical = RunConfig {
        output_dir: None,
        ..cfg.clone()
    };
    io::write_text(&dir.join("config.toml"), &canonical.to_toml()?)?;
    names.push("config.toml");
    io::write_scene(&dir.join("scene.toml"), &out.scene)?;
    names.push("scene.toml");
    io::grid_to_tensor(&out.grid)?.write(&dir.join("grid.ucdv"))?;
    names.push("grid.ucdv");
    let (w, h, img) = bev_image(&out.bev);
    io::write_pgm(&dir.join("bev.pgm"), w, h, &img)?;
    names.push("bev.pgm");
    io::write_records(&dir.join("detections.csv"), &out.detections)?;
    names.push("detections.csv");
    let fms: Vec<FmsRecord> = out
        .fms
        .per_object
        .iter()
        .map(|s| FmsRecord {
            object_id: s.object_id,
            fms: s.fms,
        })
        .collect();
    io::write_records(&dir.join("fms.csv"), &fms)?;
    names.push("fms.csv");
    let stats: Vec<StatsRecord> = out
        .splat_stats
        .iter()
        .enumerate()
        .map(|(agent, s)| StatsRecord {
            agent,
            valid_pixels: s.valid_pixels,
            added: s.added,
            dropped: s.dropped,
            object_added: s.object_added,
        })
        .collect();
    io::write_records(&dir.join("splat_stats.csv"), &stats)?;
    names.push("splat_stats.csv");
    let metrics = Metrics {
        mfms: out.fms.mfms,
        map_mean: out.detection.map_mean,
        mate: out.detection.mate,
        range_exceeded: out.range_exceeded,
        detection: out.detection.clone(),
        hpl: out.hpl.as_ref().map(|h| h.report.clone()),
    };
    io::write_toml(&dir.join("metrics.toml"), &metrics)?;
    names.push("metrics.toml");
    if let Some(h) = &out.hpl {
        let pairs: Vec<PairRecord> = h.batch.pairs.iter().map(PairRecord::from).collect();
        io::write_records(&dir.join("pairs.csv"), &pairs)?;
        names.push("pairs.csv");
        let trace: Vec<TraceRecord> = h
            .trace
            .iter()
            .enumerate()
            .map(|(step, &loss)| TraceRecord { step, loss })
            .collect();
        io::write_records(&dir.join("trace.csv"), &trace)?;
        names.push("trace.csv");
    }
    let artifacts = names
        .into_iter()
        .map(|name| {
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(ArtifactDigest {
                name: name.to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_sha256: cfg.digest()?,
        artifacts,
    };
    io::write_toml(&dir.join("manifest.toml"), &manifest)?;
    Ok(manifest)
}
