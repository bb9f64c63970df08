//! Procedural dynamic scenes with exact ground truth, and their on-disk form.
//!
//! The world is a textured ground plane inside a textured cylindrical wall,
//! so every camera ray hits something, plus a handful of spheres and boxes.
//! Frames are ray cast per pixel, which yields exact z-depth, object ids and
//! surface points for free.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot_y, CameraParams, Mat3, Pose, Vec3};
use crate::grid::CameraSetting;
use crate::numerics::container::{read_single, write_tensors};
use crate::numerics::Tensor;

pub const DATASET_VERSION: u32 = 1;

const WALL_RADIUS: f64 = 8.0;
const GROUND_ID: usize = 0;
const WALL_ID: usize = 1;
const FIRST_OBJECT_ID: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub views: usize,
    pub times: usize,
    pub height: usize,
    pub width: usize,
    pub setting: CameraSetting,
    pub objects: usize,
    pub dynamic_objects: usize,
    /// Scales object translation and spin; 0 freezes every object.
    pub motion: f64,
    pub queries_per_view: usize,
    /// Seed for surface textures; defaults to the scene seed.
    pub texture_seed: Option<u64>,
    pub patch: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            views: 2,
            times: 8,
            height: 32,
            width: 32,
            setting: CameraSetting::MultiStatic,
            objects: 4,
            dynamic_objects: 2,
            motion: 1.0,
            queries_per_view: 16,
            texture_seed: None,
            patch: 8,
        }
    }
}

impl SceneConfig {
    /// Default configuration for a setting, with the view count it implies.
    pub fn for_setting(setting: CameraSetting) -> Self {
        Self {
            views: if setting.is_monocular() { 1 } else { 2 },
            setting,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.setting.is_monocular() && self.views != 1 {
            return Err(Error::Config(format!(
                "{} needs views = 1, got {}",
                self.setting.name(),
                self.views
            )));
        }
        if self.views == 0 || self.times == 0 {
            return Err(Error::Config("views and times must be >= 1".into()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.objects == 0 || self.dynamic_objects > self.objects {
            return Err(Error::Config("need >= 1 object and dynamic_objects <= objects".into()));
        }
        if !(self.motion.is_finite() && self.motion >= 0.0) {
            return Err(Error::Config(format!("motion must be >= 0, got {}", self.motion)));
        }
        if self.queries_per_view == 0 {
            return Err(Error::Config("queries_per_view must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rendering-side camera with world→camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pinhole {
    /// Camera at `eye` looking at `target` with world `+y` up (image `y` points down).
    pub fn look_at(eye: Vec3, target: Vec3, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&Vec3::y()).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera→world transform.
    pub fn pose(&self) -> Pose {
        Pose {
            rotation: self.rotation.transpose(),
            center: self.center(),
        }
    }

    /// World direction of the ray through `(u, v)`, scaled to unit camera `z`.
    fn ray(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * d
    }
}

/// Projects a world point to `(u, v, depth)`.
pub fn project_point(p_world: &Vec3, cam: &Pinhole) -> Result<(f64, f64, f64)> {
    let p = cam.rotation * p_world + cam.translation;
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy, p.z))
}

pub fn unproject_pixel(u: f64, v: f64, depth: f64, cam: &Pinhole) -> Vec3 {
    let p_cam = Vec3::new((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
    cam.rotation.transpose() * (p_cam - cam.translation)
}

/// Query points and their ground-truth trajectories.
///
/// Query `i` lives in view `query_view[i]`; row `t` of the track tensors holds
/// its position in that view at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub query_view: Vec<usize>,
    /// `[T, N, 2]` pixel coordinates.
    pub tracks_2d: Tensor,
    /// `[T, N, 3]` reference-camera coordinates.
    pub tracks_3d: Tensor,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.query_view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_view.is_empty()
    }

    pub fn times(&self) -> usize {
        self.tracks_2d.shape()[0]
    }

    pub fn point_2d(&self, t: usize, i: usize) -> [f64; 2] {
        let k = (t * self.len() + i) * 2;
        let d = self.tracks_2d.data();
        [d[k], d[k + 1]]
    }

    pub fn point_3d(&self, t: usize, i: usize) -> [f64; 3] {
        let k = (t * self.len() + i) * 3;
        let d = self.tracks_3d.data();
        [d[k], d[k + 1], d[k + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub config: SceneConfig,
    pub seed: u64,
    /// `[V, T, H, W, 3]`, values in `[0, 1]`.
    pub frames: Tensor,
    /// `[V, T, 9]` encodings relative to the camera of frame `(0, 0)`.
    pub cameras: Tensor,
    /// `[V, T, H, W]` camera z-depth.
    pub depth: Tensor,
    /// `[V, T, H, W]`, 1 on pixels of moving objects.
    pub mask: Tensor,
    /// `[V, T, H, W, 3]` reference-camera coordinates.
    pub points: Tensor,
    /// `[V, T, H, W]`, 1 where depth is defined.
    pub validity: Tensor,
    /// `[V, T, H, W]` rasterized object id per pixel.
    pub object_ids: Tensor,
    pub tracks: TrackSet,
}

impl SceneSequence {
    pub fn views(&self) -> usize {
        self.config.views
    }

    pub fn times(&self) -> usize {
        self.config.times
    }

    pub fn frame_count(&self) -> usize {
        self.config.views * self.config.times
    }

    pub fn camera(&self, v: usize, t: usize) -> CameraParams {
        let k = (v * self.times() + t) * 9;
        CameraParams::from_slice(&self.cameras.data()[k..k + 9]).expect("camera slice")
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Sphere { radius: f64 },
    Cuboid { half: Vec3 },
}

#[derive(Debug, Clone)]
struct Object {
    shape: Shape,
    base: [f64; 3],
    tex_seed: u64,
    center: Vec3,
    yaw: f64,
    dynamic: bool,
    amp: [f64; 2],
    phase: [f64; 2],
    freq: f64,
    spin: f64,
}

impl Object {
    /// Local→world rotation and center at time `t`.
    fn placement(&self, t: usize) -> (Mat3, Vec3) {
        if !self.dynamic {
            return (rot_y(self.yaw), self.center);
        }
        let s = t as f64 * self.freq;
        let offset = Vec3::new(
            self.amp[0] * ((s + self.phase[0]).sin() - self.phase[0].sin()),
            0.0,
            self.amp[1] * ((s + self.phase[1]).sin() - self.phase[1].sin()),
        );
        (rot_y(self.yaw + self.spin * t as f64), self.center + offset)
    }

    /// Ray parameter, local-frame hit point and local normal of the first hit.
    fn intersect(&self, t: usize, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3, Vec3)> {
        let (r, c) = self.placement(t);
        let lo = r.transpose() * (o - c);
        let ld = r.transpose() * d;
        match &self.shape {
            Shape::Sphere { radius } => {
                let a = ld.dot(&ld);
                let b = 2.0 * lo.dot(&ld);
                let cc = lo.dot(&lo) - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let s = (-b - disc.sqrt()) / (2.0 * a);
                (s > 1e-9).then(|| {
                    let p = lo + ld * s;
                    (s, p, p / *radius)
                })
            }
            Shape::Cuboid { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for k in 0..3 {
                    if ld[k].abs() < 1e-15 {
                        if lo[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - lo[k]) / ld[k];
                    let b = (half[k] - lo[k]) / ld[k];
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 1e-9 {
                    return None;
                }
                let p = lo + ld * t0;
                let mut n = Vec3::zeros();
                n[axis] = p[axis].signum();
                Some((t0, p, n))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct World {
    objects: Vec<Object>,
    ground_seed: u64,
    wall_seed: u64,
    light: Vec3,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    /// Ray parameter; equals camera z-depth for camera rays.
    s: f64,
    id: usize,
    /// Texture-space point: object-local for objects, world otherwise.
    local: Vec3,
    normal_world: Vec3,
}

impl World {
    fn trace(&self, t: usize, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if best.is_none_or(|b| h.s < b.s) {
                best = Some(h);
            }
        };
        if d.y < 0.0 && o.y > 0.0 {
            let s = -o.y / d.y;
            consider(Hit {
                s,
                id: GROUND_ID,
                local: o + d * s,
                normal_world: Vec3::y(),
            });
        }
        let a = d.x * d.x + d.z * d.z;
        if a > 1e-15 {
            let b = 2.0 * (o.x * d.x + o.z * d.z);
            let c = o.x * o.x + o.z * o.z - WALL_RADIUS * WALL_RADIUS;
            let s = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
            if s > 0.0 {
                let p = o + d * s;
                consider(Hit {
                    s,
                    id: WALL_ID,
                    local: p,
                    normal_world: Vec3::new(-p.x, 0.0, -p.z).normalize(),
                });
            }
        }
        for (k, obj) in self.objects.iter().enumerate() {
            if let Some((s, local, n)) = obj.intersect(t, o, d) {
                let (r, _) = obj.placement(t);
                consider(Hit {
                    s,
                    id: FIRST_OBJECT_ID + k,
                    local,
                    normal_world: r * n,
                });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let (base, seed, scale) = match hit.id {
            GROUND_ID => ([0.55, 0.5, 0.4], self.ground_seed, 3.0),
            WALL_ID => ([0.4, 0.5, 0.65], self.wall_seed, 1.5),
            k => {
                let o = &self.objects[k - FIRST_OBJECT_ID];
                (o.base, o.tex_seed, 5.0)
            }
        };
        let p = hit.local * scale;
        let n1 = fractal_noise(&p, seed);
        let lambert = 0.45 + 0.55 * hit.normal_world.dot(&self.light).max(0.0);
        let mut rgb = [0.0; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let n2 = value_noise(&(p * 2.0), seed.wrapping_add(101 + c as u64));
            *out = ((base[c] * (0.3 + 0.7 * n1) + 0.25 * n2) * lambert).clamp(0.0, 1.0);
        }
        rgb
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear lattice noise in `[0, 1]` with smoothstep interpolation.
fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let r = p - f;
    let w = r.map(|x| x * x * (3.0 - 2.0 * x));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = ((c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64);
        let wt = (if dx == 1 { w.x } else { 1.0 - w.x })
            * (if dy == 1 { w.y } else { 1.0 - w.y })
            * (if dz == 1 { w.z } else { 1.0 - w.z });
        acc += wt * hash3(ix + dx, iy + dy, iz + dz, seed);
    }
    acc
}

fn fractal_noise(p: &Vec3, seed: u64) -> f64 {
    (2.0 * value_noise(p, seed) + value_noise(&(p * 2.03), seed.wrapping_add(7))) / 3.0
}

struct Rig {
    cams: Vec<Pinhole>,
    focal: [f64; 2],
}

fn build_rig(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Rig {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let focal_scale = rng.random_range(0.9..1.1);
    let (fx, fy) = (focal_scale * w, focal_scale * w);
    let base_phi = rng.random_range(-PI..PI);
    let radius = rng.random_range(3.4..3.8);
    let height = rng.random_range(1.3..1.7);
    let target = Vec3::new(0.0, 0.45, 0.0);
    let span = (cfg.times.max(2) - 1) as f64;
    let mut cams = Vec::with_capacity(cfg.views * cfg.times);
    for v in 0..cfg.views {
        let phi_v = base_phi + 0.5 * v as f64;
        for t in 0..cfg.times {
            let s = t as f64 / span;
            let (phi, r, y) = match cfg.setting {
                CameraSetting::MonoStatic => (phi_v, radius, height),
                CameraSetting::MonoDynamic => (phi_v + 0.5 * s, radius - 0.3 * s, height + 0.3 * s),
                CameraSetting::MultiStatic => (phi_v + 0.2 * s, radius, height + 0.1 * s),
            };
            let eye = Vec3::new(r * phi.sin(), y, r * phi.cos());
            cams.push(Pinhole::look_at(
                eye,
                target,
                fx,
                fy,
                crate::geometry::principal_point(cfg.width),
                crate::geometry::principal_point(cfg.height),
            ));
        }
    }
    Rig {
        cams,
        focal: [fx / w, fy / h],
    }
}

fn build_world(cfg: &SceneConfig, rng: &mut ChaCha8Rng, tex_seed: u64) -> World {
    let k = cfg.objects;
    let offset = rng.random_range(0.0..2.0 * PI);
    let objects = (0..k)
        .map(|i| {
            let angle = offset + 2.0 * PI * i as f64 / k as f64 + rng.random_range(-0.3..0.3);
            let ring = if k == 1 { 0.0 } else { rng.random_range(0.5..1.1) };
            let shape = if i % 2 == 0 {
                Shape::Sphere {
                    radius: rng.random_range(0.45..0.6),
                }
            } else {
                Shape::Cuboid {
                    half: Vec3::new(
                        rng.random_range(0.35..0.5),
                        rng.random_range(0.35..0.5),
                        rng.random_range(0.35..0.5),
                    ),
                }
            };
            let lift = match &shape {
                Shape::Sphere { radius } => *radius,
                Shape::Cuboid { half } => half.y,
            };
            let dynamic = cfg.motion > 0.0 && i < cfg.dynamic_objects;
            Object {
                shape,
                base: [
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                ],
                tex_seed: tex_seed.wrapping_add(1000 + i as u64),
                center: Vec3::new(ring * angle.sin(), lift, ring * angle.cos()),
                yaw: rng.random_range(0.0..2.0 * PI),
                dynamic,
                amp: [
                    cfg.motion * rng.random_range(0.3..0.45),
                    cfg.motion * rng.random_range(0.3..0.45),
                ],
                phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
                freq: rng.random_range(0.3..0.45),
                spin: cfg.motion * rng.random_range(0.1..0.25),
            }
        })
        .collect();
    World {
        objects,
        ground_seed: tex_seed.wrapping_add(1),
        wall_seed: tex_seed.wrapping_add(2),
        light: Vec3::new(0.4, 0.8, 0.3).normalize(),
    }
}

/// Per-pixel render output for one frame.
struct Raster {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    ids: Vec<usize>,
}

fn render(world: &World, cam: &Pinhole, t: usize, h: usize, w: usize) -> Raster {
    let mut r = Raster {
        rgb: vec![0.0; h * w * 3],
        depth: vec![0.0; h * w],
        ids: vec![usize::MAX; h * w],
    };
    let o = cam.center();
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if let Some(hit) = world.trace(t, &o, &cam.ray(x as f64, y as f64)) {
                r.rgb[3 * k..3 * k + 3].copy_from_slice(&world.shade(&hit));
                r.depth[k] = hit.s;
                r.ids[k] = hit.id;
            }
        }
    }
    r
}

/// Renders a sequence with full ground truth. Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex_seed = config.texture_seed.unwrap_or(seed);
    let mut last_err = None;
    for _attempt in 0..16 {
        let rig = build_rig(config, &mut rng);
        let world = build_world(config, &mut rng, tex_seed);
        match assemble(config, seed, &rig, &world, &mut rng) {
            Ok(seq) => return Ok(seq),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Degenerate("scene generation failed".into())))
}

fn assemble(
    cfg: &SceneConfig,
    seed: u64,
    rig: &Rig,
    world: &World,
    rng: &mut ChaCha8Rng,
) -> Result<SceneSequence> {
    let (vn, tn, h, w) = (cfg.views, cfg.times, cfg.height, cfg.width);
    let hw = h * w;
    let reference = rig.cams[0].pose();
    let cams: Vec<CameraParams> = rig
        .cams
        .iter()
        .map(|c| CameraParams::from_pose(&c.pose().relative_to(&reference), rig.focal))
        .collect();

    let mut frames = Vec::with_capacity(vn * tn * hw * 3);
    let mut depth = Vec::with_capacity(vn * tn * hw);
    let mut mask = Vec::with_capacity(vn * tn * hw);
    let mut validity = Vec::with_capacity(vn * tn * hw);
    let mut ids = Vec::with_capacity(vn * tn * hw);
    let mut points = Vec::with_capacity(vn * tn * hw * 3);
    let mut first_frames = Vec::with_capacity(vn);
    for v in 0..vn {
        for t in 0..tn {
            let f = v * tn + t;
            let r = render(world, &rig.cams[f], t, h, w);
            for k in 0..hw {
                let valid = r.ids[k] != usize::MAX;
                frames.extend_from_slice(&r.rgb[3 * k..3 * k + 3]);
                depth.push(r.depth[k]);
                validity.push(if valid { 1.0 } else { 0.0 });
                ids.push(if valid { r.ids[k] as f64 } else { -1.0 });
                let moving = valid
                    && r.ids[k] >= FIRST_OBJECT_ID
                    && world.objects[r.ids[k] - FIRST_OBJECT_ID].dynamic;
                mask.push(if moving { 1.0 } else { 0.0 });
                if valid {
                    let p = cams[f].unproject((k % w) as f64, (k / w) as f64, r.depth[k], h, w);
                    points.extend_from_slice(p.as_slice());
                } else {
                    points.extend_from_slice(&[0.0; 3]);
                }
            }
            if t == 0 {
                first_frames.push(r);
            }
        }
    }
    if validity.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("no geometry in front of any camera".into()));
    }

    let tracks = sample_tracks(cfg, rig, world, &first_frames, rng)?;
    let to_ref = |p: &Vec3| reference.from_ref(p);
    let n = tracks.len();
    let mut t2 = vec![0.0; tn * n * 2];
    let mut t3 = vec![0.0; tn * n * 3];
    let mut query_view = Vec::with_capacity(n);
    for (i, q) in tracks.iter().enumerate() {
        query_view.push(q.view);
        for t in 0..tn {
            let (u, vv, p) = q.positions[t];
            t2[(t * n + i) * 2] = u;
            t2[(t * n + i) * 2 + 1] = vv;
            t3[(t * n + i) * 3..(t * n + i) * 3 + 3].copy_from_slice(to_ref(&p).as_slice());
        }
    }

    let cam_data = cams.iter().flat_map(|c| c.to_array()).collect();
    Ok(SceneSequence {
        config: cfg.clone(),
        seed,
        frames: Tensor::new(vec![vn, tn, h, w, 3], frames)?,
        cameras: Tensor::new(vec![vn, tn, 9], cam_data)?,
        depth: Tensor::new(vec![vn, tn, h, w], depth)?,
        mask: Tensor::new(vec![vn, tn, h, w], mask)?,
        points: Tensor::new(vec![vn, tn, h, w, 3], points)?,
        validity: Tensor::new(vec![vn, tn, h, w], validity)?,
        object_ids: Tensor::new(vec![vn, tn, h, w], ids)?,
        tracks: TrackSet {
            query_view,
            tracks_2d: Tensor::new(vec![tn, n, 2], t2)?,
            tracks_3d: Tensor::new(vec![tn, n, 3], t3)?,
        },
    })
}

struct Track {
    view: usize,
    /// Per time: pixel `u`, pixel `v`, world point.
    positions: Vec<(f64, f64, Vec3)>,
}

fn sample_tracks(
    cfg: &SceneConfig,
    rig: &Rig,
    world: &World,
    first: &[Raster],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Track>> {
    let (tn, h, w) = (cfg.times, cfg.height, cfg.width);
    let any_dynamic = world.objects.iter().any(|o| o.dynamic);
    let mut out = Vec::new();
    for (v, raster) in first.iter().enumerate() {
        let mut pixels: Vec<usize> = (0..h * w).filter(|&k| raster.ids[k] != usize::MAX).collect();
        pixels.shuffle(rng);
        let is_dyn = |k: usize| {
            raster.ids[k] >= FIRST_OBJECT_ID && world.objects[raster.ids[k] - FIRST_OBJECT_ID].dynamic
        };
        let need_dyn = if any_dynamic {
            cfg.queries_per_view.div_ceil(4)
        } else {
            0
        };
        let (dyn_px, other_px): (Vec<usize>, Vec<usize>) = pixels.into_iter().partition(|&k| is_dyn(k));
        let mut accepted = Vec::new();
        let mut n_dyn = 0;
        for &k in dyn_px.iter().chain(other_px.iter()) {
            if accepted.len() == cfg.queries_per_view {
                break;
            }
            let dynamic = is_dyn(k);
            if !dynamic && n_dyn < need_dyn {
                // Quota of moving queries not yet met: dynamic candidates are exhausted.
                return Err(Error::Degenerate(format!(
                    "view {v}: only {n_dyn} trackable points on moving objects"
                )));
            }
            let u = (k % w) as f64 + rng.random_range(-0.35..0.35);
            let vv = (k / w) as f64 + rng.random_range(-0.35..0.35);
            if let Some(track) = follow(world, rig, v, u, vv, tn, h, w) {
                n_dyn += usize::from(dynamic);
                accepted.push(track);
            }
        }
        if accepted.len() < cfg.queries_per_view || n_dyn < need_dyn {
            return Err(Error::Degenerate(format!(
                "view {v}: only {} trackable points",
                accepted.len()
            )));
        }
        out.extend(accepted);
    }
    Ok(out)
}

/// Follows the surface point seen at `(u, v)` in frame `(view, 0)` through time.
/// Returns `None` if it leaves the image or is hidden in any frame.
#[allow(clippy::too_many_arguments)]
fn follow(
    world: &World,
    rig: &Rig,
    view: usize,
    u: f64,
    v: f64,
    tn: usize,
    h: usize,
    w: usize,
) -> Option<Track> {
    let cam0 = &rig.cams[view * tn];
    let hit = world.trace(0, &cam0.center(), &cam0.ray(u, v))?;
    let world_at = |t: usize| -> Vec3 {
        if hit.id >= FIRST_OBJECT_ID {
            let (r, c) = world.objects[hit.id - FIRST_OBJECT_ID].placement(t);
            r * hit.local + c
        } else {
            hit.local
        }
    };
    let mut positions = Vec::with_capacity(tn);
    for t in 0..tn {
        let cam = &rig.cams[view * tn + t];
        let p = world_at(t);
        let (pu, pv, z) = project_point(&p, cam).ok()?;
        let margin = 0.5;
        if pu < margin || pv < margin || pu > w as f64 - 1.0 - margin || pv > h as f64 - 1.0 - margin {
            return None;
        }
        let check = world.trace(t, &cam.center(), &cam.ray(pu, pv))?;
        if check.id != hit.id || (check.s - z).abs() > 1e-6 * z {
            return None;
        }
        positions.push((pu, pv, p));
    }
    Some(Track { view, positions })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    seed: u64,
    config: SceneConfig,
    queries: usize,
}

const FIELDS: [&str; 7] = ["frames", "cameras", "depth", "mask", "points", "validity", "objects"];

fn field_tensor<'a>(seq: &'a SceneSequence, name: &str) -> &'a Tensor {
    match name {
        "frames" => &seq.frames,
        "cameras" => &seq.cameras,
        "depth" => &seq.depth,
        "mask" => &seq.mask,
        "points" => &seq.points,
        "validity" => &seq.validity,
        "objects" => &seq.object_ids,
        _ => unreachable!("unknown field {name}"),
    }
}

/// Writes `meta.json`, one container per field and `tracks.csv` into `dir`.
pub fn write_dataset(seq: &SceneSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        format_version: DATASET_VERSION,
        seed: seq.seed,
        config: seq.config.clone(),
        queries: seq.tracks.len(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    for name in FIELDS {
        write_tensors(&dir.join(format!("{name}.q4dg")), &[(name, field_tensor(seq, name))])?;
    }
    let csv_path = dir.join("tracks.csv");
    fs::write(&csv_path, tracks_csv(&seq.tracks)).map_err(|e| Error::io(&csv_path, e))
}

/// `frame,query,u,v,x,y,z` rows; `frame = view · T + t`.
pub fn tracks_csv(tracks: &TrackSet) -> String {
    let tn = tracks.times();
    let mut s = String::from("frame,query,u,v,x,y,z\n");
    for i in 0..tracks.len() {
        for t in 0..tn {
            let [u, v] = tracks.point_2d(t, i);
            let [x, y, z] = tracks.point_3d(t, i);
            let frame = tracks.query_view[i] * tn + t;
            let _ = writeln!(s, "{frame},{i},{u},{v},{x},{y},{z}");
        }
    }
    s
}

pub fn parse_tracks_csv(text: &str, times: usize, path: &Path) -> Result<TrackSet> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some("frame,query,u,v,x,y,z") {
        return Err(corrupt("missing tracks.csv header".into()));
    }
    let mut rows: BTreeMap<(usize, usize), ([f64; 2], [f64; 3], usize)> = BTreeMap::new();
    for (ln, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(corrupt(format!("line {}: expected 7 columns", ln + 2)));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| corrupt(format!("line {}: {e}", ln + 2)));
        let num = |s: &str| s.parse::<f64>().map_err(|e| corrupt(format!("line {}: {e}", ln + 2)));
        let (frame, query) = (int(cols[0])?, int(cols[1])?);
        let (view, t) = (frame / times, frame % times);
        rows.insert(
            (query, t),
            (
                [num(cols[2])?, num(cols[3])?],
                [num(cols[4])?, num(cols[5])?, num(cols[6])?],
                view,
            ),
        );
    }
    let n = rows.keys().map(|k| k.0 + 1).max().unwrap_or(0);
    if rows.len() != n * times {
        return Err(corrupt(format!("expected {} rows, found {}", n * times, rows.len())));
    }
    let mut t2 = vec![0.0; times * n * 2];
    let mut t3 = vec![0.0; times * n * 3];
    let mut query_view = vec![0; n];
    for (&(i, t), (uv, xyz, view)) in &rows {
        query_view[i] = *view;
        t2[(t * n + i) * 2..(t * n + i) * 2 + 2].copy_from_slice(uv);
        t3[(t * n + i) * 3..(t * n + i) * 3 + 3].copy_from_slice(xyz);
    }
    Ok(TrackSet {
        query_view,
        tracks_2d: Tensor::new(vec![times, n, 2], t2)?,
        tracks_3d: Tensor::new(vec![times, n, 3], t3)?,
    })
}

pub fn read_dataset(dir: &Path) -> Result<SceneSequence> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(Error::Version {
            found,
            expected: DATASET_VERSION,
        });
    }
    let meta: DatasetMeta = serde_json::from_value(raw)?;
    let cfg = meta.config;
    cfg.validate()?;
    let (vn, tn, h, w) = (cfg.views, cfg.times, cfg.height, cfg.width);
    let load = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let path = dir.join(format!("{name}.q4dg"));
        let t = read_single(&path, name)?;
        if t.shape() != shape {
            return Err(Error::Corrupt {
                path,
                reason: format!("shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t)
    };
    let csv_path = dir.join("tracks.csv");
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let tracks = parse_tracks_csv(&csv, tn, &csv_path)?;
    if tracks.len() != meta.queries {
        return Err(Error::Corrupt {
            path: csv_path,
            reason: format!("{} queries, meta says {}", tracks.len(), meta.queries),
        });
    }
    Ok(SceneSequence {
        frames: load("frames", &[vn, tn, h, w, 3])?,
        cameras: load("cameras", &[vn, tn, 9])?,
        depth: load("depth", &[vn, tn, h, w])?,
        mask: load("mask", &[vn, tn, h, w])?,
        points: load("points", &[vn, tn, h, w, 3])?,
        validity: load("validity", &[vn, tn, h, w])?,
        object_ids: load("objects", &[vn, tn, h, w])?,
        config: cfg,
        seed: meta.seed,
        tracks,
    })
}

/// Scene directories under `root`: `root` itself if it holds a dataset,
/// otherwise every immediate subdirectory that does, in name order.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("no scenes found under {}", root.display())));
    }
    Ok(dirs)
}

/// Stable per-scene seed derived from a run seed and a scene index.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}
