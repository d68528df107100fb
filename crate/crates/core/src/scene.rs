//! Seeded synthetic multi-UAV world and its ray-cast renderer.
//!
//! Every rendered pixel carries oracle channels (depth, hit point, object id)
//! next to a position-keyed descriptor. Two pixels that see the same surface
//! cell of the same object get identical descriptors, so homologous points
//! are known exactly.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    intersect_ray_box, intersect_ray_plane, pixel_ray, Camera, Intrinsics, OrientedBox, Pixel,
};

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_uavs: usize,
    pub n_objects: usize,
    /// Flight height above the ground plane, meters.
    pub flight_height: f64,
    pub pitch_deg: f64,
    /// Horizontal distance of each UAV from the scene center.
    pub ring_radius: f64,
    /// Angle of the first UAV on the ring.
    pub ring_phase_deg: f64,
    /// Side of the square, centered on the origin, where objects are placed.
    pub area_side: f64,
    /// Free space kept between object footprints.
    pub min_gap: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub descriptor_dim: usize,
    /// Edge of the cubic cell descriptors are keyed on.
    pub descriptor_quant: f64,
    pub ground_z: f64,
    pub ego_index: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_uavs: 6,
            n_objects: 12,
            flight_height: 50.0,
            pitch_deg: -45.0,
            ring_radius: 30.0,
            ring_phase_deg: 0.0,
            area_side: 40.0,
            min_gap: 2.0,
            fov_deg: 70.0,
            width: 480,
            height: 256,
            descriptor_dim: 16,
            descriptor_quant: 0.025,
            ground_z: 0.0,
            ego_index: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_uavs == 0 {
            return fail("n_uavs must be at least 1");
        }
        if !(self.area_side > 0.0) {
            return fail("area_side must be positive");
        }
        if self.ego_index >= self.n_uavs {
            return fail("ego_index must index the rig");
        }
        if self.descriptor_dim < 4 {
            return fail("descriptor_dim must be at least 4");
        }
        if !(self.descriptor_quant > 0.0) {
            return fail("descriptor_quant must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return fail("resolution must be non-zero");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return fail("fov_deg must be in (0, 180)");
        }
        if !(self.flight_height > self.ground_z) {
            return fail("UAVs must fly above the ground");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Car,
    Van,
    Truck,
    Pedestrian,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Car,
        Category::Van,
        Category::Truck,
        Category::Pedestrian,
    ];

    /// Nominal (length, width, height) in meters. Scaled heights, plus half
    /// a residual-depth bin of quantization, stay below the 3 m top of the
    /// default voxel grid.
    pub fn nominal_size(self) -> Vector3<f64> {
        match self {
            Category::Car => Vector3::new(4.5, 1.9, 1.6),
            Category::Van => Vector3::new(5.2, 2.1, 2.2),
            Category::Truck => Vector3::new(6.5, 2.5, 2.35),
            Category::Pedestrian => Vector3::new(0.8, 0.8, 1.8),
        }
    }

    fn weight(self) -> f64 {
        match self {
            Category::Car => 0.5,
            Category::Van => 0.2,
            Category::Truck => 0.15,
            Category::Pedestrian => 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub object_id: i32,
    pub category: Category,
    pub center: Vector3<f64>,
    /// (length, width, height)
    pub size: Vector3<f64>,
    pub yaw: f64,
}

impl ObjectBox {
    pub fn oriented(&self) -> OrientedBox {
        OrientedBox {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub ground_z: f64,
    pub ego_index: usize,
    pub rig: Vec<Camera>,
    pub objects: Vec<ObjectBox>,
}

impl Scene {
    pub fn ego_camera(&self) -> &Camera {
        &self.rig[self.ego_index]
    }

    /// Ground point directly below the ego UAV.
    pub fn ego_nadir(&self) -> Vector3<f64> {
        let c = crate::geometry::camera_center_world(self.ego_camera());
        Vector3::new(c.x, c.y, self.ground_z)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Scene = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if scene.rig.is_empty() || scene.ego_index >= scene.rig.len() {
            return Err(Error::Format("scene rig is empty or ego_index out of range".into()));
        }
        Ok(scene)
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x5851_F42D_4C95_7F2D, |acc, &w| mix64(acc ^ w))
}

fn ring_camera(cfg: &SceneConfig, index: usize) -> Result<Camera> {
    let angle = cfg.ring_phase_deg.to_radians() + 2.0 * PI * index as f64 / cfg.n_uavs as f64;
    let position = Vector3::new(
        cfg.ring_radius * angle.cos(),
        cfg.ring_radius * angle.sin(),
        cfg.flight_height,
    );
    // inward-facing; a zero-radius ring keeps the phase as heading
    let yaw = if cfg.ring_radius > 0.0 { angle + PI } else { angle };
    let intr = Intrinsics::from_fov(cfg.fov_deg.to_radians(), cfg.width, cfg.height);
    Camera::from_pose(
        intr,
        position,
        yaw,
        cfg.pitch_deg.to_radians(),
        cfg.width,
        cfg.height,
    )
}

fn pick_category(rng: &mut ChaCha8Rng) -> Category {
    let total: f64 = Category::ALL.iter().map(|c| c.weight()).sum();
    let mut x = rng.random::<f64>() * total;
    for c in Category::ALL {
        x -= c.weight();
        if x < 0.0 {
            return c;
        }
    }
    Category::Car
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let rig = (0..config.n_uavs)
        .map(|i| ring_camera(config, i))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = config.area_side / 2.0;
    let mut objects: Vec<ObjectBox> = Vec::with_capacity(config.n_objects);
    for index in 0..config.n_objects {
        let category = pick_category(&mut rng);
        let scale = 0.9 + 0.2 * rng.random::<f64>();
        let size = category.nominal_size() * scale;
        let radius = 0.5 * size.x.hypot(size.y);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let clear = objects.iter().all(|o| {
                let other = 0.5 * o.size.x.hypot(o.size.y);
                (o.center.x - x).hypot(o.center.y - y) >= radius + other + config.min_gap
            });
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed.ok_or(Error::PlacementFailure {
            index,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let yaw = rng.random_range(-PI..PI);
        objects.push(ObjectBox {
            object_id: index as i32,
            category,
            center: Vector3::new(x, y, config.ground_z + size.z / 2.0),
            size,
            yaw,
        });
    }

    Ok(Scene {
        seed,
        config: config.clone(),
        ground_z: config.ground_z,
        ego_index: config.ego_index,
        rig,
        objects,
    })
}

/// Deterministic unit-norm descriptor of a surface cell.
///
/// The key combines the scene seed, the object id (−1 for ground) and the
/// hit point quantized to cubes of edge `quant`.
pub fn descriptor(
    hit_point: &Vector3<f64>,
    object_id: i32,
    scene_seed: u64,
    dim: usize,
    quant: f64,
) -> Vec<f32> {
    let key = cell_key(hit_point, object_id, scene_seed, quant);
    descriptor_for_key(key, dim)
}

pub(crate) fn cell_key(hit_point: &Vector3<f64>, object_id: i32, scene_seed: u64, quant: f64) -> u64 {
    // cells are centered on multiples of `quant`, so planes at round
    // coordinates (the ground at z = 0) sit mid-cell
    let q = |x: f64| (x / quant).round() as i64 as u64;
    hash_words(&[
        scene_seed,
        object_id as i64 as u64,
        q(hit_point.x),
        q(hit_point.y),
        q(hit_point.z),
    ])
}

fn descriptor_for_key(key: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| (x / norm) as f32).collect()
}

/// Row-major `height × width × channels` descriptor image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One camera's render with its oracle channels. All per-pixel vectors are
/// row-major with index `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub cam_index: usize,
    pub camera: Camera,
    pub features: FeatureImage,
    /// Optical-axis depth of the first hit; 0 for sky.
    pub depth_oracle: Vec<f64>,
    pub mask: Vec<bool>,
    pub hit_points: Vec<Vector3<f64>>,
    /// −1 for ground and sky.
    pub object_ids: Vec<i32>,
    pub scene_seed: u64,
    pub descriptor_quant: f64,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.features.width
    }

    pub fn height(&self) -> usize {
        self.features.height
    }

    pub fn pixel_of(&self, idx: usize) -> Pixel {
        Pixel::at(idx % self.width(), idx / self.width())
    }

    pub fn index_of(&self, px: Pixel) -> Option<usize> {
        let (c, r) = (px.u.round(), px.v.round());
        if c < 0.0 || r < 0.0 || c >= self.width() as f64 || r >= self.height() as f64 {
            return None;
        }
        Some(r as usize * self.width() + c as usize)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn cell_key(&self, idx: usize) -> u64 {
        cell_key(
            &self.hit_points[idx],
            self.object_ids[idx],
            self.scene_seed,
            self.descriptor_quant,
        )
    }
}

struct PixelSample {
    depth: f64,
    hit: Vector3<f64>,
    object_id: i32,
}

fn trace(scene: &Scene, boxes: &[(OrientedBox, f64)], cam: &Camera, px: Pixel) -> Option<PixelSample> {
    let ray = pixel_ray(px, cam);
    let mut best_t = f64::INFINITY;
    let mut best: Option<(Vector3<f64>, i32)> = None;
    if let Some((p, t)) = intersect_ray_plane(&ray, scene.ground_z) {
        best_t = t;
        best = Some((p, -1));
    }
    let (o, d) = (ray.origin(), ray.direction());
    for (obj, (bx, radius)) in scene.objects.iter().zip(boxes) {
        // bounding-sphere rejection
        let oc = bx.center - o;
        let along = oc.dot(&d);
        if along + radius < 0.0 || (oc - d * along).norm_squared() > radius * radius {
            continue;
        }
        if let Some(hit) = intersect_ray_box(&ray, bx) {
            if hit.t < best_t {
                best_t = hit.t;
                best = Some((hit.point, obj.object_id));
            }
        }
    }
    best.map(|(hit, object_id)| PixelSample {
        depth: cam.to_camera_frame(&hit).z,
        hit,
        object_id,
    })
}

/// Ray-casts camera `cam_index` at `resolution = (width, height)`.
pub fn render(scene: &Scene, cam_index: usize, resolution: (usize, usize)) -> Result<RenderedView> {
    let base = scene
        .rig
        .get(cam_index)
        .ok_or_else(|| Error::Config(format!("camera index {cam_index} out of range")))?;
    let (width, height) = resolution;
    let camera = if (base.width(), base.height()) == resolution {
        base.clone()
    } else {
        base.with_resolution(width, height)?
    };
    let dim = scene.config.descriptor_dim;
    let quant = scene.config.descriptor_quant;
    let boxes: Vec<(OrientedBox, f64)> = scene
        .objects
        .iter()
        .map(|o| (o.oriented(), 0.5 * o.size.norm()))
        .collect();

    let rows: Vec<Vec<(Option<PixelSample>, Vec<f32>)>> = (0..height)
        .into_par_iter()
        .map(|row| {
            (0..width)
                .map(|col| {
                    let sample = trace(scene, &boxes, &camera, Pixel::at(col, row));
                    let desc = match &sample {
                        Some(s) => descriptor(&s.hit, s.object_id, scene.seed, dim, quant),
                        None => vec![0.0; dim],
                    };
                    (sample, desc)
                })
                .collect()
        })
        .collect();

    let n = width * height;
    let mut features = FeatureImage::zeros(width, height, dim);
    let mut depth_oracle = vec![0.0; n];
    let mut mask = vec![false; n];
    let mut hit_points = vec![Vector3::zeros(); n];
    let mut object_ids = vec![-1; n];
    for (idx, (sample, desc)) in rows.into_iter().flatten().enumerate() {
        features.data[idx * dim..(idx + 1) * dim].copy_from_slice(&desc);
        if let Some(s) = sample {
            depth_oracle[idx] = s.depth;
            hit_points[idx] = s.hit;
            object_ids[idx] = s.object_id;
            mask[idx] = s.object_id >= 0;
        }
    }
    Ok(RenderedView {
        cam_index,
        camera,
        features,
        depth_oracle,
        mask,
        hit_points,
        object_ids,
        scene_seed: scene.seed,
        descriptor_quant: quant,
    })
}

/// Renders every camera of the rig at the configured resolution.
pub fn render_rig(scene: &Scene) -> Result<Vec<RenderedView>> {
    let res = (scene.config.width, scene.config.height);
    (0..scene.rig.len())
        .into_par_iter()
        .map(|k| render(scene, k, res))
        .collect()
}

/// Ground-truth homologous pixels between two views.
///
/// A candidate pair has both pixels masked, on the same object, in the same
/// descriptor cell, with hit points within `eps`. Pairs straddling a cell
/// boundary are excluded because their descriptors differ. Candidates are
/// matched one-to-one, nearest first, ties by lowest pixel indices.
pub fn oracle_homologous(
    view_i: &RenderedView,
    view_j: &RenderedView,
    eps: f64,
) -> Vec<(Pixel, Pixel)> {
    let mut cells: HashMap<u64, Vec<usize>> = HashMap::new();
    for b in (0..view_j.mask.len()).filter(|&b| view_j.mask[b]) {
        cells.entry(view_j.cell_key(b)).or_default().push(b);
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for a in (0..view_i.mask.len()).filter(|&a| view_i.mask[a]) {
        let Some(bs) = cells.get(&view_i.cell_key(a)) else {
            continue;
        };
        for &b in bs {
            if view_i.object_ids[a] != view_j.object_ids[b] {
                continue;
            }
            let dist = (view_i.hit_points[a] - view_j.hit_points[b]).norm();
            if dist <= eps {
                edges.push((dist, a, b));
            }
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_i = vec![false; view_i.mask.len()];
    let mut used_j = vec![false; view_j.mask.len()];
    let mut pairs = Vec::new();
    for (_, a, b) in edges {
        if !used_i[a] && !used_j[b] {
            used_i[a] = true;
            used_j[b] = true;
            pairs.push((a, b));
        }
    }
    pairs.sort_unstable();
    pairs
        .into_iter()
        .map(|(a, b)| (view_i.pixel_of(a), view_j.pixel_of(b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{backproject, project};
    use std::f64::consts::FRAC_PI_2;

    fn nadir_scene(objects: Vec<ObjectBox>) -> Scene {
        let cfg = SceneConfig {
            n_uavs: 1,
            n_objects: 0,
            ring_radius: 0.0,
            pitch_deg: -90.0,
            ..SceneConfig::default()
        };
        let mut scene = generate_scene(1, &cfg).unwrap();
        scene.objects = objects;
        scene
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
        assert_ne!(
            generate_scene(8, &cfg).unwrap().to_toml().unwrap(),
            a.to_toml().unwrap()
        );
    }

    #[test]
    fn scene_invariants() {
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        assert_eq!(scene.rig.len(), 6);
        for o in &scene.objects {
            assert!((o.center.z - (scene.ground_z + o.size.z / 2.0)).abs() < 1e-12);
            assert!(o.size.iter().all(|&s| s > 0.0));
            assert!(o.yaw >= -PI && o.yaw < PI);
        }
        for (i, a) in scene.objects.iter().enumerate() {
            for b in &scene.objects[i + 1..] {
                let d = (a.center - b.center).xy().norm();
                assert!(d >= a.oriented().footprint_radius() + b.oriented().footprint_radius());
            }
        }
    }

    #[test]
    fn empty_scene_has_valid_rig() {
        let cfg = SceneConfig {
            n_objects: 0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(1, &cfg).unwrap();
        assert!(scene.objects.is_empty());
        assert_eq!(scene.rig.len(), cfg.n_uavs);
    }

    #[test]
    fn dense_config_fails_placement() {
        let cfg = SceneConfig {
            n_objects: 200,
            area_side: 10.0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(1, &cfg),
            Err(Error::PlacementFailure { .. })
        ));
    }

    #[test]
    fn every_object_center_seen_by_two_cameras() {
        for seed in 0..5 {
            let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
            for o in &scene.objects {
                let seen = scene
                    .rig
                    .iter()
                    .filter(|cam| {
                        project(&o.center, cam).is_ok_and(|(px, _)| cam.contains(px))
                    })
                    .count();
                assert!(seen >= 2, "seed {seed} object {} seen by {seen}", o.object_id);
            }
        }
    }

    #[test]
    fn empty_nadir_render_matches_ray_plane() {
        let scene = nadir_scene(vec![]);
        let view = render(&scene, 0, (96, 64)).unwrap();
        let cam = &view.camera;
        let center = view.index_of(Pixel::new(48.0, 32.0)).unwrap();
        assert_eq!(view.depth_oracle[center], 50.0);
        for idx in 0..view.depth_oracle.len() {
            let px = view.pixel_of(idx);
            let ray = pixel_ray(px, cam);
            let (_, t) = intersect_ray_plane(&ray, 0.0).unwrap();
            let cos = ray.direction().dot(&cam.optical_axis());
            assert!((view.depth_oracle[idx] - t * cos).abs() <= 1e-9);
            assert!(!view.mask[idx]);
        }
    }

    #[test]
    fn box_under_nadir_camera() {
        let scene = nadir_scene(vec![ObjectBox {
            object_id: 0,
            category: Category::Truck,
            center: Vector3::new(0.0, 0.0, 5.0),
            size: Vector3::new(4.0, 4.0, 10.0),
            yaw: 0.2,
        }]);
        let view = render(&scene, 0, (480, 256)).unwrap();
        let idx = view.index_of(Pixel::new(240.0, 128.0)).unwrap();
        assert!((view.depth_oracle[idx] - 40.0).abs() < 1e-9);
        assert!(view.mask[idx]);
        assert_eq!(view.object_ids[idx], 0);
    }

    #[test]
    fn rendered_views_are_consistent() {
        let scene = generate_scene(11, &SceneConfig::default()).unwrap();
        let views = render_rig(&scene).unwrap();
        let mut masked = 0;
        for view in &views {
            for idx in 0..view.mask.len() {
                assert_eq!(view.mask[idx], view.object_ids[idx] >= 0);
                if !view.mask[idx] {
                    continue;
                }
                masked += 1;
                let (px, depth) = project(&view.hit_points[idx], &view.camera).unwrap();
                let expect = view.pixel_of(idx);
                assert!((px.u - expect.u).abs() <= 0.5 && (px.v - expect.v).abs() <= 0.5);
                assert!((depth - view.depth_oracle[idx]).abs() <= 1e-6);
            }
        }
        assert!(masked > 0);
    }

    #[test]
    fn descriptors_are_position_keyed() {
        let p = Vector3::new(1.234, -5.6, 0.8);
        let a = descriptor(&p, 3, 9, 16, 0.025);
        let b = descriptor(&p, 3, 9, 16, 0.025);
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_ne!(a, descriptor(&p, 4, 9, 16, 0.025));
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn descriptors_one_meter_apart_decorrelate() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 10_000;
        let mut low = 0;
        for _ in 0..trials {
            let seed: u64 = rng.random();
            let p = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(0.0..3.0),
            );
            let dir = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 0.0)
                .normalize();
            let q = p + dir;
            let c = cosine(&descriptor(&p, 1, seed, 16, 0.025), &descriptor(&q, 1, seed, 16, 0.025));
            if c < 0.99 {
                low += 1;
            }
        }
        assert!(low as f64 / trials as f64 >= 0.99);
    }

    #[test]
    fn oracle_pairs_identical_and_disjoint_views() {
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let v0 = render(&scene, 0, (240, 128)).unwrap();
        let pairs = oracle_homologous(&v0, &v0, 0.05);
        assert_eq!(pairs.len(), v0.masked_count());
        assert!(pairs.iter().all(|(p, q)| p == q));

        let mut far = scene.clone();
        far.objects = vec![ObjectBox {
            object_id: 0,
            category: Category::Car,
            center: Vector3::new(0.0, 0.0, 0.8),
            size: Vector3::new(4.5, 1.9, 1.6),
            yaw: 0.0,
        }];
        // two cameras looking away from each other over empty ground
        let intr = Intrinsics::from_fov(1.2, 240, 128);
        far.rig = vec![
            Camera::from_pose(intr, Vector3::new(0.0, 30.0, 50.0), FRAC_PI_2, -0.8, 240, 128)
                .unwrap(),
            Camera::from_pose(intr, Vector3::new(0.0, -30.0, 50.0), -FRAC_PI_2, -0.8, 240, 128)
                .unwrap(),
        ];
        let a = render(&far, 0, (240, 128)).unwrap();
        let b = render(&far, 1, (240, 128)).unwrap();
        assert!(oracle_homologous(&a, &b, 0.05).is_empty());
    }

    #[test]
    fn opposite_cameras_share_homologous_points() {
        let mut scene = nadir_scene(vec![ObjectBox {
            object_id: 0,
            category: Category::Truck,
            center: Vector3::new(0.0, 0.0, 1.5),
            size: Vector3::new(12.0, 6.0, 3.0),
            yaw: 0.4,
        }]);
        let intr = Intrinsics::from_fov(70f64.to_radians(), 480, 256);
        scene.rig = vec![
            Camera::from_pose(intr, Vector3::new(50.0, 0.0, 50.0), PI, -PI / 4.0, 480, 256)
                .unwrap(),
            Camera::from_pose(intr, Vector3::new(-50.0, 0.0, 50.0), 0.0, -PI / 4.0, 480, 256)
                .unwrap(),
        ];
        let a = render(&scene, 0, (480, 256)).unwrap();
        let b = render(&scene, 1, (480, 256)).unwrap();
        let pairs = oracle_homologous(&a, &b, 0.05);
        assert!(!pairs.is_empty());
        for (p, q) in pairs {
            let (ia, ib) = (a.index_of(p).unwrap(), b.index_of(q).unwrap());
            assert!((a.hit_points[ia] - b.hit_points[ib]).norm() <= 0.05);
            let pw = backproject(p, a.depth_oracle[ia], &a.camera).unwrap();
            let qw = backproject(q, b.depth_oracle[ib], &b.camera).unwrap();
            assert!((pw - qw).norm() <= 0.05 + 1e-6);
        }
    }
}
