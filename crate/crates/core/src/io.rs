//! File formats: the `UCDV1` tensor container, portable graymaps and
//! CSV records.
//!
//! A `UCDV1` file is one ASCII header line followed by little-endian `f32`
//! values in row-major order:
//!
//! ```text
//! UCDV1 shape=256,480,22 channels=f0,f1,...,depth key=value ...\n
//! ```
//!
//! Header tokens are space separated; keys and values contain neither
//! spaces nor `=`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::depth::{DepthBins, DepthDistribution, DepthFrame, GroundDepthMap};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::mapping::{GridSpec, WorldGrid};
use crate::scene::{FeatureImage, RenderedView, Scene};

pub const MAGIC: &str = "UCDV1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub channels: Vec<String>,
    pub meta: BTreeMap<String, String>,
    pub data: Vec<f32>,
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '=' || c == ',') {
        return Err(Error::Format(format!("invalid header token {s:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, channels: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let t = Tensor {
            shape,
            channels,
            meta: BTreeMap::new(),
            data,
        };
        t.check()?;
        Ok(t)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn check(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if self.shape.is_empty() || n != self.data.len() {
            return Err(Error::Format(format!(
                "shape {:?} does not match {} values",
                self.shape,
                self.data.len()
            )));
        }
        if self.channels.len() != *self.shape.last().unwrap() {
            return Err(Error::Format("channel names must match the last dimension".into()));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing header field {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad header field {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        for c in &self.channels {
            check_token(c)?;
        }
        let mut header = format!(
            "{MAGIC} shape={} channels={}",
            join(self.shape.iter()),
            self.channels.join(",")
        );
        for (k, v) in &self.meta {
            check_token(k)?;
            if v.contains(char::is_whitespace) || v.is_empty() {
                return Err(Error::Format(format!("invalid value for {k}")));
            }
            header.push_str(&format!(" {k}={v}"));
        }
        header.push('\n');
        let mut out = Vec::with_capacity(header.len() + 4 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut tokens = header.split(' ');
        if tokens.next() != Some(MAGIC) {
            return Err(Error::Format("bad magic".into()));
        }
        let mut shape = None;
        let mut channels = None;
        let mut meta = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header token {tok:?}")))?;
            match k {
                "shape" => {
                    shape = Some(
                        v.split(',')
                            .map(|x| x.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::Format("bad shape".into()))?,
                    )
                }
                "channels" => channels = Some(v.split(',').map(str::to_string).collect()),
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let shape: Vec<usize> = shape.ok_or_else(|| Error::Format("missing shape".into()))?;
        let payload = &bytes[nl + 1..];
        let n: usize = shape.iter().product();
        if payload.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor {
            shape,
            channels: channels.ok_or_else(|| Error::Format("missing channels".into()))?,
            meta,
            data,
        };
        t.check()?;
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Tensor::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn join<T: ToString>(it: impl Iterator<Item = T>) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const VIEW_ORACLE_CHANNELS: [&str; 6] = ["depth", "mask", "hit_x", "hit_y", "hit_z", "object_id"];

/// Rendered view as `height × width × (c + 6)`: descriptors then oracle
/// channels. The camera is carried as a `camera_index` header field.
pub fn view_to_tensor(view: &RenderedView) -> Result<Tensor> {
    let c = view.features.channels;
    let n = view.features.len();
    let mut data = Vec::with_capacity(n * (c + 6));
    for idx in 0..n {
        data.extend_from_slice(view.features.pixel(idx));
        let h = view.hit_points[idx];
        data.extend_from_slice(&[
            view.depth_oracle[idx] as f32,
            if view.mask[idx] { 1.0 } else { 0.0 },
            h.x as f32,
            h.y as f32,
            h.z as f32,
            view.object_ids[idx] as f32,
        ]);
    }
    let mut channels: Vec<String> = (0..c).map(|i| format!("f{i}")).collect();
    channels.extend(VIEW_ORACLE_CHANNELS.iter().map(|s| s.to_string()));
    Ok(Tensor::new(vec![view.height(), view.width(), c + 6], channels, data)?
        .with_meta("kind", "view")
        .with_meta("camera_index", view.cam_index)
        .with_meta("scene_seed", view.scene_seed)
        .with_meta("descriptor_quant", view.descriptor_quant))
}

/// Rebuilds a view from its tensor; oracle channels come back at 32-bit
/// precision.
pub fn view_from_tensor(t: &Tensor, camera: Camera) -> Result<RenderedView> {
    if t.shape.len() != 3 || t.shape[2] < 6 {
        return Err(Error::Format("view tensor must be h × w × (c + 6)".into()));
    }
    let (height, width, stride) = (t.shape[0], t.shape[1], t.shape[2]);
    let c = stride - 6;
    let n = width * height;
    let mut features = FeatureImage::zeros(width, height, c);
    let mut depth_oracle = vec![0.0; n];
    let mut mask = vec![false; n];
    let mut hit_points = vec![Vector3::zeros(); n];
    let mut object_ids = vec![-1; n];
    for idx in 0..n {
        let px = &t.data[idx * stride..(idx + 1) * stride];
        features.data[idx * c..(idx + 1) * c].copy_from_slice(&px[..c]);
        depth_oracle[idx] = px[c] as f64;
        mask[idx] = px[c + 1] > 0.5;
        hit_points[idx] = Vector3::new(px[c + 2] as f64, px[c + 3] as f64, px[c + 4] as f64);
        object_ids[idx] = px[c + 5] as i32;
    }
    Ok(RenderedView {
        cam_index: t.meta_parse("camera_index")?,
        camera,
        features,
        depth_oracle,
        mask,
        hit_points,
        object_ids,
        scene_seed: t.meta_parse("scene_seed")?,
        descriptor_quant: t.meta_parse("descriptor_quant")?,
    })
}

pub fn gdm_to_tensor(gdm: &GroundDepthMap) -> Result<Tensor> {
    let mut data = Vec::with_capacity(gdm.values.len() * 2);
    for (v, ok) in gdm.values.iter().zip(&gdm.valid) {
        data.push(*v as f32);
        data.push(if *ok { 1.0 } else { 0.0 });
    }
    Ok(Tensor::new(
        vec![gdm.height, gdm.width, 2],
        vec!["l_b".into(), "valid".into()],
        data,
    )?
    .with_meta("kind", "ground_depth")
    .with_meta("z_w", gdm.ground_z))
}

pub fn gdm_from_tensor(t: &Tensor) -> Result<GroundDepthMap> {
    if t.shape.len() != 3 || t.shape[2] != 2 {
        return Err(Error::Format("ground depth tensor must be h × w × 2".into()));
    }
    Ok(GroundDepthMap {
        width: t.shape[1],
        height: t.shape[0],
        values: t.data.chunks_exact(2).map(|c| c[0] as f64).collect(),
        valid: t.data.chunks_exact(2).map(|c| c[1] > 0.5).collect(),
        ground_z: t.meta_parse("z_w")?,
    })
}

/// Depth distribution as `height × width × (M + 2)`: bin probabilities,
/// validity and the per-pixel ground depth (0 when not carried).
pub fn dist_to_tensor(dist: &DepthDistribution) -> Result<Tensor> {
    let m = dist.m();
    let n = dist.width * dist.height;
    let mut data = Vec::with_capacity(n * (m + 2));
    for idx in 0..n {
        data.extend(dist.pixel(idx).iter().map(|&p| p as f32));
        data.push(if dist.valid[idx] { 1.0 } else { 0.0 });
        data.push(dist.ground.as_ref().map_or(0.0, |g| g[idx] as f32));
    }
    let mut channels: Vec<String> = (1..=m).map(|k| format!("p{k}")).collect();
    channels.push("valid".into());
    channels.push("l_b".into());
    let mut t = Tensor::new(vec![dist.height, dist.width, m + 2], channels, data)?
        .with_meta("kind", "depth_distribution")
        .with_meta("frame", dist.frame.as_str())
        .with_meta("M", m)
        .with_meta("range_exceeded", dist.range_exceeded);
    match &dist.bins {
        DepthBins::GroundAnchored { d, .. } => {
            t = t.with_meta("mode", "ground_anchored").with_meta("d", d);
        }
        DepthBins::Uniform { min, max, .. } => {
            t = t
                .with_meta("mode", "uniform_baseline")
                .with_meta("depth_min", min)
                .with_meta("depth_max", max)
                .with_meta("d", (max - min) / m as f64);
        }
    }
    Ok(t)
}

pub fn dist_from_tensor(t: &Tensor) -> Result<DepthDistribution> {
    if t.shape.len() != 3 || t.shape[2] < 3 {
        return Err(Error::Format("distribution tensor must be h × w × (M + 2)".into()));
    }
    let (height, width, stride) = (t.shape[0], t.shape[1], t.shape[2]);
    let m = stride - 2;
    let bins = match t.meta("mode")? {
        "ground_anchored" => DepthBins::ground_anchored(m, t.meta_parse("d")?)?,
        "uniform_baseline" => crate::depth::uniform_baseline_bins(
            t.meta_parse("depth_min")?,
            t.meta_parse("depth_max")?,
            m,
        )?,
        other => return Err(Error::Format(format!("unknown bin mode {other}"))),
    };
    let frame = DepthFrame::parse(t.meta("frame")?)?;
    let n = width * height;
    let mut probs = Vec::with_capacity(n * m);
    let mut valid = Vec::with_capacity(n);
    let mut ground = Vec::with_capacity(n);
    for px in t.data.chunks_exact(stride) {
        probs.extend(px[..m].iter().map(|&p| p as f64));
        valid.push(px[m] > 0.5);
        ground.push(px[m + 1] as f64);
    }
    let carries_ground = frame == DepthFrame::A && matches!(bins, DepthBins::GroundAnchored { .. });
    Ok(DepthDistribution {
        width,
        height,
        probs,
        valid,
        bins,
        frame,
        ground: carries_ground.then_some(ground),
        range_exceeded: t.meta_parse("range_exceeded")?,
    })
}

/// World grid as `X × Y × Z × (c + 2)`: mass, object mass, features.
pub fn grid_to_tensor(grid: &WorldGrid) -> Result<Tensor> {
    let (nx, ny, nz) = grid.dims();
    let c = grid.channels;
    let mut data = Vec::with_capacity(nx * ny * nz * (c + 2));
    for v in 0..nx * ny * nz {
        data.push(grid.mass[v] as f32);
        data.push(grid.object_mass[v] as f32);
        data.extend(grid.feat[v * c..(v + 1) * c].iter().map(|&x| x as f32));
    }
    let mut channels = vec!["mass".to_string(), "object_mass".to_string()];
    channels.extend((0..c).map(|i| format!("f{i}")));
    let s = &grid.spec;
    Ok(Tensor::new(vec![nx, ny, nz, c + 2], channels, data)?
        .with_meta("kind", "world_grid")
        .with_meta("x_range", format!("{}:{}", s.x_range[0], s.x_range[1]))
        .with_meta("y_range", format!("{}:{}", s.y_range[0], s.y_range[1]))
        .with_meta("z_range", format!("{}:{}", s.z_range[0], s.z_range[1]))
        .with_meta("resolution", s.resolution)
        .with_meta(
            "origin",
            format!("{}:{}:{}", s.origin.x, s.origin.y, s.origin.z),
        ))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(':')
        .map(|x| x.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format(format!("bad number list {s:?}")))
}

pub fn grid_from_tensor(t: &Tensor) -> Result<WorldGrid> {
    if t.shape.len() != 4 || t.shape[3] < 2 {
        return Err(Error::Format("grid tensor must be X × Y × Z × (c + 2)".into()));
    }
    let range = |k: &str| -> Result<[f64; 2]> {
        let v = parse_floats(t.meta(k)?)?;
        v.try_into()
            .map_err(|_| Error::Format(format!("{k} needs two values")))
    };
    let origin = parse_floats(t.meta("origin")?)?;
    if origin.len() != 3 {
        return Err(Error::Format("origin needs three values".into()));
    }
    let spec = GridSpec {
        x_range: range("x_range")?,
        y_range: range("y_range")?,
        z_range: range("z_range")?,
        resolution: t.meta_parse("resolution")?,
        origin: Vector3::new(origin[0], origin[1], origin[2]),
    };
    let c = t.shape[3] - 2;
    let mut grid = WorldGrid::new(spec, c)?;
    if grid.dims() != (t.shape[0], t.shape[1], t.shape[2]) {
        return Err(Error::Format("grid shape disagrees with spec".into()));
    }
    for (v, px) in t.data.chunks_exact(c + 2).enumerate() {
        grid.mass[v] = px[0] as f64;
        grid.object_mass[v] = px[1] as f64;
        for (dst, src) in grid.feat[v * c..(v + 1) * c].iter_mut().zip(&px[2..]) {
            *dst = *src as f64;
        }
    }
    Ok(grid)
}

/// Binary (P5) graymap, linearly scaled so the maximum maps to 255.
/// `values` is row-major `height × width`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &text)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scene::from_toml(&text)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_text(path, &scene.to_toml()?)
}
