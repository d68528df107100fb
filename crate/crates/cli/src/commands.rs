use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use groundlift_core::depth::convert_to_p_a;
use groundlift_core::eval::{depth_hist, gt_centers, match_detections, mfms, Histogram, DETECTION_THRESHOLDS};
use groundlift_core::homologous::{consistency_loss, extract_batch, extraction_mask, PairBatch, PairRecord, TraceRecord};
use groundlift_core::io;
use groundlift_core::mapping::Detection;
use groundlift_core::pipeline::{
    estimate_depths, estimate_native, prepare_scene, refine_batch, run_pipeline, run_prepared, write_artifacts, Prepared, RunConfig,
};
use groundlift_core::scene::{generate_scene, render_rig};
use groundlift_core::sweep::{default_seeds, prepare_suite, run_sweep_prepared, SweepKind, SweepReport};

use crate::config::ConfigArgs;
use crate::EXIT_SWEEP;

#[derive(Debug, Parser)]
#[command(name = "groundlift", version, about = "Ground-prior feature lifting for collaborating UAV cameras")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate or render synthetic scenes.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// Ground depth maps and per-pixel depth distributions.
    #[command(subcommand)]
    Depth(DepthCmd),
    /// Lift, splat, fuse and detect.
    #[command(subcommand)]
    Map(MapCmd),
    /// Homologous pairs and the multi-view consistency loss.
    #[command(subcommand)]
    Hpl(HplCmd),
    /// Score grids and detections.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run a seed-suite sweep with its direction checks.
    Sweep(SweepArgs),
    /// Run the full pipeline and write artifacts with a manifest.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SceneInput {
    /// Scene file written by `scene gen`.
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Subcommand)]
enum SceneCmd {
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    Render {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum DepthCmd {
    Gdm {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        out: PathBuf,
    },
    Estimate {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        out: PathBuf,
    },
    Convert {
        /// Residual-depth distribution tensor.
        #[arg(long)]
        dist: PathBuf,
        /// Matching ground depth map tensor.
        #[arg(long)]
        gdm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Hist {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long, default_value_t = 0.25)]
        bin_width: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum MapCmd {
    Run {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum HplCmd {
    Extract {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        out: PathBuf,
    },
    Loss {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        pairs: PathBuf,
    },
    Refine {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    Fms {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Detect {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// bins, uavs, lba-range, pairs, hpl, depth-hist or all.
    name: String,
    /// Seeds as `a-b` or a comma list.
    #[arg(long, default_value = "1-10")]
    seeds: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// `output_dir`
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Scene(c) => scene_cmd(c)?,
        Cmd::Depth(c) => depth_cmd(c)?,
        Cmd::Map(c) => map_cmd(c)?,
        Cmd::Hpl(c) => hpl_cmd(c)?,
        Cmd::Eval(c) => eval_cmd(c)?,
        Cmd::Sweep(a) => return sweep_cmd(a),
        Cmd::Pipeline(a) => pipeline_cmd(a)?,
    }
    Ok(0)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

impl SceneInput {
    fn load(&self) -> Result<(RunConfig, Prepared)> {
        let cfg = self.cfg.load()?;
        let scene = io::read_scene(&self.scene)?;
        Ok((cfg, prepare_scene(scene)?))
    }
}

fn scene_cmd(cmd: SceneCmd) -> Result<()> {
    match cmd {
        SceneCmd::Gen { out, cfg } => {
            let cfg = cfg.load()?;
            let scene = generate_scene(cfg.seed, &cfg.scene)?;
            io::write_scene(&out, &scene)?;
            println!("scene seed {}: {} cameras, {} objects -> {}", scene.seed, scene.rig.len(), scene.objects.len(), out.display());
        }
        SceneCmd::Render { input, out } => {
            let scene = io::read_scene(&input.scene)?;
            create_dir(&out)?;
            let views = render_rig(&scene)?;
            for v in &views {
                io::view_to_tensor(v)?.write(&out.join(format!("view_{}.ucdv", v.cam_index)))?;
                let mask: Vec<f64> = v.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                io::write_pgm(&out.join(format!("mask_{}.pgm", v.cam_index)), v.width(), v.height(), &mask)?;
            }
            println!("rendered {} views -> {}", views.len(), out.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct HistRow {
    lower: f64,
    count: u64,
}

fn hist_rows(h: &Histogram) -> Vec<HistRow> {
    h.counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistRow {
            lower: h.origin + i as f64 * h.bin_width,
            count,
        })
        .collect()
}

fn depth_cmd(cmd: DepthCmd) -> Result<()> {
    match cmd {
        DepthCmd::Gdm { input, out } => {
            let (_, prep) = input.load()?;
            create_dir(&out)?;
            for (k, g) in prep.gdms.iter().enumerate() {
                io::gdm_to_tensor(g)?.write(&out.join(format!("gdm_{k}.ucdv")))?;
            }
            println!("wrote {} ground depth maps -> {}", prep.gdms.len(), out.display());
        }
        DepthCmd::Estimate { input, out } => {
            let (cfg, prep) = input.load()?;
            create_dir(&out)?;
            let mut exceeded = 0;
            for k in 0..cfg.agent_count().min(prep.views.len()) {
                let dist = estimate_native(&cfg, &prep, k)?;
                exceeded += dist.range_exceeded;
                io::dist_to_tensor(&dist)?.write(&out.join(format!("dist_{k}.ucdv")))?;
            }
            println!("range_exceeded {exceeded}");
        }
        DepthCmd::Convert { dist, gdm, out } => {
            let p_ba = io::dist_from_tensor(&io::Tensor::read(&dist)?)?;
            let g = io::gdm_from_tensor(&io::Tensor::read(&gdm)?)?;
            io::dist_to_tensor(&convert_to_p_a(&p_ba, &g)?)?.write(&out)?;
            println!("converted -> {}", out.display());
        }
        DepthCmd::Hist { input, bin_width, out } => {
            let (_, prep) = input.load()?;
            let h = depth_hist(&prep.views, &prep.gdms, bin_width)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                io::write_records(&dir.join("l_a.csv"), &hist_rows(&h.l_a))?;
                io::write_records(&dir.join("l_ba.csv"), &hist_rows(&h.l_ba))?;
            }
            println!("l_a support {:.4} m, l_ba support {:.4} m", h.l_a.support_width(), h.l_ba.support_width());
        }
    }
    Ok(())
}

fn map_cmd(cmd: MapCmd) -> Result<()> {
    let MapCmd::Run { input, out } = cmd;
    let (cfg, prep) = input.load()?;
    let output = run_prepared(&cfg, &prep)?;
    write_artifacts(&cfg, &output, &out)?;
    println!(
        "{} detections, mfms {:.4}, map {:.4} -> {}",
        output.detections.len(),
        output.fms.mfms,
        output.detection.map_mean,
        out.display()
    );
    Ok(())
}

fn read_pairs(path: &Path) -> Result<PairBatch> {
    let rows: Vec<PairRecord> = io::read_records(path)?;
    Ok(PairBatch {
        pairs: rows.iter().map(Into::into).collect(),
    })
}

fn hpl_cmd(cmd: HplCmd) -> Result<()> {
    match cmd {
        HplCmd::Extract { input, out } => {
            let (cfg, prep) = input.load()?;
            let views = &prep.views[..cfg.agent_count().min(prep.views.len())];
            let masks: Vec<Vec<bool>> = views.iter().map(|v| extraction_mask(v, cfg.hpl.mask)).collect();
            let batch = extract_batch(views, &masks, cfg.hpl.tau, cfg.hpl.n_max)?;
            let rows: Vec<PairRecord> = batch.pairs.iter().map(PairRecord::from).collect();
            io::write_records(&out, &rows)?;
            println!("{} pairs -> {}", rows.len(), out.display());
        }
        HplCmd::Loss { input, pairs } => {
            let (cfg, prep) = input.load()?;
            let batch = read_pairs(&pairs)?;
            let (dists, _) = estimate_depths(&cfg, &prep, prep.views.len())?;
            let loss = consistency_loss(&batch, &dists, &prep.cameras())?;
            println!("loss {loss:.9} over {} pairs", batch.n());
        }
        HplCmd::Refine { input, pairs, out } => {
            let (cfg, prep) = input.load()?;
            let result = refine_batch(&cfg, &prep, read_pairs(&pairs)?)?;
            create_dir(&out)?;
            let trace: Vec<TraceRecord> = result
                .trace
                .iter()
                .enumerate()
                .map(|(step, &loss)| TraceRecord { step, loss })
                .collect();
            io::write_records(&out.join("trace.csv"), &trace)?;
            io::write_toml(&out.join("report.toml"), &result.report)?;
            let r = &result.report;
            println!(
                "loss {:.6} -> {:.6}, depth error {:.4} -> {:.4} m",
                r.initial_loss, r.final_loss, r.initial_depth_error, r.final_depth_error
            );
        }
    }
    Ok(())
}

fn eval_cmd(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Fms { grid, scene, out } => {
            let grid = io::grid_from_tensor(&io::Tensor::read(&grid)?)?;
            let scene = io::read_scene(&scene)?;
            let report = mfms(&grid, &scene)?;
            if let Some(path) = out {
                io::write_records(&path, &report.per_object)?;
            }
            println!("mfms {:.6} over {} objects", report.mfms, report.per_object.len());
        }
        EvalCmd::Detect { detections, scene, out } => {
            let pred: Vec<Detection> = io::read_records(&detections)?;
            let scene = io::read_scene(&scene)?;
            let report = match_detections(&pred, &gt_centers(&scene), &DETECTION_THRESHOLDS);
            if let Some(path) = out {
                io::write_toml(&path, &report)?;
            }
            for t in &report.ap_at {
                println!("ap@{} {:.4} recall {:.4}", t.threshold, t.ap, t.recall);
            }
            println!("map {:.4} mate {}", report.map_mean, report.mate.map_or("n/a".into(), |m| format!("{m:.4}")));
        }
    }
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || groundlift_core::Error::Config(format!("bad seed list '{s}'"));
    let seeds = if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<Vec<u64>, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad().into());
    }
    Ok(seeds)
}

fn print_report(rep: &SweepReport) {
    for c in &rep.checks {
        println!("[{}] {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, rep.kind, c.name, c.detail);
    }
}

fn sweep_cmd(args: SweepArgs) -> Result<u8> {
    let kinds: Vec<SweepKind> = if args.name == "all" {
        SweepKind::ALL.to_vec()
    } else {
        vec![args.name.parse()?]
    };
    let cfg = args.cfg.load()?;
    let seeds = if args.seeds == "default" { default_seeds() } else { parse_seeds(&args.seeds)? };
    let preps = prepare_suite(&cfg, &seeds)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
    }
    let mut passed = true;
    for kind in kinds {
        let rep = run_sweep_prepared(kind, &cfg, &seeds, &preps)?;
        print_report(&rep);
        if let Some(dir) = &args.out {
            io::write_records(&dir.join(format!("{kind}.csv")), &rep.rows)?;
            io::write_records(&dir.join(format!("{kind}_checks.csv")), &rep.checks)?;
        }
        passed &= rep.passed();
    }
    Ok(if passed { 0 } else { EXIT_SWEEP })
}

fn pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let cfg = args.cfg.load_with_output(args.out.as_deref())?;
    let (out, manifest) = run_pipeline(&cfg)?;
    println!(
        "seed {}: {} detections, mfms {:.4}, map {:.4}, range_exceeded {}",
        cfg.seed,
        out.detections.len(),
        out.fms.mfms,
        out.detection.map_mean,
        out.range_exceeded
    );
    if let Some(h) = &out.hpl {
        println!(
            "hpl: {} pairs, depth error {:.4} -> {:.4} m",
            h.report.pairs, h.report.initial_depth_error, h.report.final_depth_error
        );
    }
    if let (Some(m), Some(dir)) = (manifest, &cfg.output_dir) {
        println!("config {} -> {}", m.config_sha256, dir.display());
    }
    Ok(())
}
