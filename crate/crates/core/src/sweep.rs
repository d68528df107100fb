//! Seed-suite sweeps with executable direction checks.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{depth_hist, MATE_THRESHOLD};
use crate::pipeline::{prepare, run_hpl, run_prepared, BinsMode, Prepared, RunConfig};

pub const LBA_RANGES: [f64; 5] = [0.0, 5.0, 10.0, 20.0, 40.0];
pub const PAIR_COUNTS: [usize; 4] = [50, 100, 200, 400];
pub const HIST_BIN_WIDTH: f64 = 0.25;
/// Required mean reduction of the expected-depth error after refinement.
pub const HPL_MIN_REDUCTION: f64 = 0.5;
/// Required seed-averaged ratio of final to initial consistency loss.
pub const HPL_MAX_LOSS_RATIO: f64 = 0.25;

pub fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Bins,
    Uavs,
    LbaRange,
    Pairs,
    Hpl,
    DepthHist,
}

impl SweepKind {
    pub const ALL: [SweepKind; 6] = [
        SweepKind::Bins,
        SweepKind::Uavs,
        SweepKind::LbaRange,
        SweepKind::Pairs,
        SweepKind::Hpl,
        SweepKind::DepthHist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Bins => "bins",
            SweepKind::Uavs => "uavs",
            SweepKind::LbaRange => "lba-range",
            SweepKind::Pairs => "pairs",
            SweepKind::Hpl => "hpl",
            SweepKind::DepthHist => "depth-hist",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep '{s}'")))
    }
}

/// One measured value; `seed` is `None` for suite means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub seed: Option<u64>,
    pub setting: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    pub checks: Vec<Check>,
}

impl SweepReport {
    fn new(kind: SweepKind) -> Self {
        SweepReport {
            kind,
            rows: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn row(&mut self, seed: Option<u64>, setting: impl Into<String>, metric: &str, value: f64) {
        self.rows.push(SweepRow {
            sweep: self.kind.as_str().into(),
            seed,
            setting: setting.into(),
            metric: metric.into(),
            value,
        });
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Scenes for a seed suite, prepared in parallel.
pub fn prepare_suite(base: &RunConfig, seeds: &[u64]) -> Result<Vec<Prepared>> {
    seeds.par_iter().map(|&s| prepare(s, &base.scene)).collect()
}

fn seeded(base: &RunConfig, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        output_dir: None,
        ..base.clone()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

pub fn run_sweep(kind: SweepKind, base: &RunConfig, seeds: &[u64]) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    base.validate()?;
    let preps = prepare_suite(base, seeds)?;
    run_sweep_prepared(kind, base, seeds, &preps)
}

/// Same as [`run_sweep`] over scenes already prepared for `seeds`.
pub fn run_sweep_prepared(kind: SweepKind, base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    if preps.len() != seeds.len() {
        return Err(Error::Config("one prepared scene per seed is required".into()));
    }
    match kind {
        SweepKind::Bins => sweep_bins(base, seeds, preps),
        SweepKind::Uavs => sweep_uavs(base, seeds, preps),
        SweepKind::LbaRange => sweep_lba_range(base, seeds, preps),
        SweepKind::Pairs => sweep_pairs(base, seeds, preps),
        SweepKind::Hpl => sweep_hpl(base, seeds, preps),
        SweepKind::DepthHist => sweep_depth_hist(seeds, preps),
    }
}

fn sweep_bins(base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    let mut rep = SweepReport::new(SweepKind::Bins);
    let scores: Vec<(f64, f64)> = seeds
        .par_iter()
        .zip(preps)
        .map(|(&s, prep)| {
            let mut ground = seeded(base, s);
            ground.depth.bins = BinsMode::Ground;
            let mut uniform = ground.clone();
            uniform.depth.bins = BinsMode::Uniform;
            Ok((
                run_prepared(&ground, prep)?.fms.mfms,
                run_prepared(&uniform, prep)?.fms.mfms,
            ))
        })
        .collect::<Result<_>>()?;
    let mut failing = Vec::new();
    for (&s, &(g, u)) in seeds.iter().zip(&scores) {
        rep.row(Some(s), "ground", "mfms", g);
        rep.row(Some(s), "uniform", "mfms", u);
        if g <= u {
            failing.push(s);
        }
    }
    let (g, u): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
    rep.row(None, "ground", "mfms", mean(&g));
    rep.row(None, "uniform", "mfms", mean(&u));
    rep.check(
        "ground-anchored mfms exceeds uniform baseline on every seed",
        failing.is_empty(),
        format!("mean {:.3} vs {:.3}, failing seeds {failing:?}", mean(&g), mean(&u)),
    );
    Ok(rep)
}

fn sweep_uavs(base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    let mut rep = SweepReport::new(SweepKind::Uavs);
    let counts: Vec<usize> = (1..=base.scene.n_uavs).collect();
    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .zip(preps)
        .map(|(&s, prep)| {
            counts
                .iter()
                .map(|&n| {
                    let cfg = RunConfig {
                        n_uavs: Some(n),
                        ..seeded(base, s)
                    };
                    let out = run_prepared(&cfg, prep)?;
                    let recall = out.detection.at(MATE_THRESHOLD).map_or(0.0, |t| t.recall);
                    Ok((recall, out.fms.mfms))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut recall_fail = Vec::new();
    let mut fms_fail = Vec::new();
    let half = base.scene.n_uavs / 2;
    for (&s, series) in seeds.iter().zip(&per_seed) {
        for (&n, &(r, f)) in counts.iter().zip(series) {
            rep.row(Some(s), n.to_string(), "recall@2m", r);
            rep.row(Some(s), n.to_string(), "mfms", f);
        }
        if series.windows(2).any(|w| w[1].0 < w[0].0) {
            recall_fail.push(s);
        }
        if half >= 1 && series[series.len() - 1].1 < series[half - 1].1 {
            fms_fail.push(s);
        }
    }
    for (i, &n) in counts.iter().enumerate() {
        let r: Vec<f64> = per_seed.iter().map(|v| v[i].0).collect();
        let f: Vec<f64> = per_seed.iter().map(|v| v[i].1).collect();
        rep.row(None, n.to_string(), "recall@2m", mean(&r));
        rep.row(None, n.to_string(), "mfms", mean(&f));
    }
    rep.check(
        format!("recall at 2 m non-decreasing from 1 to {} UAVs", base.scene.n_uavs),
        recall_fail.is_empty(),
        format!("failing seeds {recall_fail:?}"),
    );
    if half >= 1 {
        rep.check(
            format!("mfms non-decreasing from {half} to {} UAVs", base.scene.n_uavs),
            fms_fail.is_empty(),
            format!("failing seeds {fms_fail:?}"),
        );
    }
    Ok(rep)
}

fn sweep_lba_range(base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    let mut rep = SweepReport::new(SweepKind::LbaRange);
    let mut means = Vec::new();
    for &range in &LBA_RANGES {
        let mut cfg = base.clone();
        cfg.depth = base.depth.with_range(range)?;
        let scores: Vec<f64> = seeds
            .par_iter()
            .zip(preps)
            .map(|(&s, prep)| Ok(run_prepared(&seeded(&cfg, s), prep)?.detection.map_mean))
            .collect::<Result<_>>()?;
        for (&s, &v) in seeds.iter().zip(&scores) {
            rep.row(Some(s), format!("{range}"), "map", v);
        }
        let m = mean(&scores);
        rep.row(None, format!("{range}"), "map", m);
        means.push(m);
    }
    let best = (0..means.len()).fold(0, |b, i| if means[i] > means[b] { i } else { b });
    let at = |r: f64| means[LBA_RANGES.iter().position(|&x| x == r).unwrap_or(0)];
    let summary = LBA_RANGES
        .iter()
        .zip(&means)
        .map(|(r, m)| format!("{r}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    rep.check(
        "detection score peaks at an interior range",
        best != 0 && best != means.len() - 1,
        summary.clone(),
    );
    rep.check("range 10 m scores above range 0", at(10.0) > at(0.0), summary);
    Ok(rep)
}

fn hpl_suite(base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<Vec<(f64, f64, bool)>> {
    seeds
        .par_iter()
        .zip(preps)
        .map(|(&s, prep)| {
            let cfg = seeded(base, s);
            let out = run_hpl(&cfg, prep, cfg.agent_count().min(prep.views.len()))?;
            let r = out.report;
            let monotone = out.trace.windows(2).all(|w| w[1] <= w[0]);
            Ok((
                1.0 - r.final_depth_error / r.initial_depth_error,
                r.final_loss / r.initial_loss,
                monotone,
            ))
        })
        .collect()
}

fn sweep_pairs(base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    let mut rep = SweepReport::new(SweepKind::Pairs);
    let mut non_monotone = Vec::new();
    for &n_max in &PAIR_COUNTS {
        let mut cfg = base.clone();
        cfg.hpl.n_max = n_max;
        let res = hpl_suite(&cfg, seeds, preps)?;
        for (&s, &(red, ratio, mono)) in seeds.iter().zip(&res) {
            rep.row(Some(s), n_max.to_string(), "depth_error_reduction", red);
            rep.row(Some(s), n_max.to_string(), "loss_ratio", ratio);
            if !mono {
                non_monotone.push((n_max, s));
            }
        }
        let red: Vec<f64> = res.iter().map(|r| r.0).collect();
        let ratio: Vec<f64> = res.iter().map(|r| r.1).collect();
        rep.row(None, n_max.to_string(), "depth_error_reduction", mean(&red));
        rep.row(None, n_max.to_string(), "loss_ratio", mean(&ratio));
    }
    rep.check(
        "every refinement trace is non-increasing",
        non_monotone.is_empty(),
        format!("failing (pairs, seed) {non_monotone:?}"),
    );
    Ok(rep)
}

fn sweep_hpl(base: &RunConfig, seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    let mut rep = SweepReport::new(SweepKind::Hpl);
    let res = hpl_suite(base, seeds, preps)?;
    let setting = format!("sigma={}", base.hpl.sigma);
    for (&s, &(red, ratio, _)) in seeds.iter().zip(&res) {
        rep.row(Some(s), setting.clone(), "depth_error_reduction", red);
        rep.row(Some(s), setting.clone(), "loss_ratio", ratio);
    }
    let red = mean(&res.iter().map(|r| r.0).collect::<Vec<_>>());
    let ratio = mean(&res.iter().map(|r| r.1).collect::<Vec<_>>());
    rep.row(None, setting.clone(), "depth_error_reduction", red);
    rep.row(None, setting, "loss_ratio", ratio);
    rep.check(
        format!("mean depth error reduction at least {HPL_MIN_REDUCTION}"),
        red >= HPL_MIN_REDUCTION,
        format!("{red:.4}"),
    );
    rep.check(
        format!("mean loss ratio at most {HPL_MAX_LOSS_RATIO}"),
        ratio <= HPL_MAX_LOSS_RATIO,
        format!("{ratio:.4}"),
    );
    Ok(rep)
}

fn sweep_depth_hist(seeds: &[u64], preps: &[Prepared]) -> Result<SweepReport> {
    let mut rep = SweepReport::new(SweepKind::DepthHist);
    let mut failing = Vec::new();
    for (&s, prep) in seeds.iter().zip(preps) {
        let h = depth_hist(&prep.views, &prep.gdms, HIST_BIN_WIDTH)?;
        let (a, ba) = (h.l_a.support_width(), h.l_ba.support_width());
        rep.row(Some(s), "l_a", "support_width", a);
        rep.row(Some(s), "l_ba", "support_width", ba);
        if h.l_a.total() == 0 || ba >= a {
            failing.push(s);
        }
    }
    rep.check(
        "l_ba support narrower than l_a support on every seed",
        failing.is_empty(),
        format!("failing seeds {failing:?}"),
    );
    Ok(rep)
}
