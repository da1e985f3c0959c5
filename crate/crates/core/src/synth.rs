//! Synthetic box-room scenes with ellipsoid objects: exact ray-cast ground
//! truth images, semantic labels, instance masks and sparse init points.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{PointRecord, SceneFile, Split, ViewRecord};
use crate::error::{Error, Result};
use crate::image_buf::{save_gray_u8, ImageBuffer};
use crate::linalg::Vec3;
use crate::masks::{save_masks, Mask, MaskSet};
use crate::mesh::LayoutMesh;

/// Semantic label of the first object; layout faces use `0..6` in the
/// group order of [`LayoutMesh::box_room`].
pub const OBJECT_LABEL_BASE: u8 = 10;
pub const MIN_VIEWS: usize = 8;

const AMBIENT: f64 = 0.45;

/// Axis-aligned ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vec3<f64>,
    pub radii: Vec3<f64>,
    pub color: [f64; 3],
}

impl Ellipsoid {
    /// Nearest positive ray parameter, if any.
    pub fn intersect(&self, o: Vec3<f64>, d: Vec3<f64>) -> Option<f64> {
        let r = self.radii;
        let oc = o - self.center;
        let a_v = Vec3::new(d.x / r.x, d.y / r.y, d.z / r.z);
        let b_v = Vec3::new(oc.x / r.x, oc.y / r.y, oc.z / r.z);
        let a = a_v.dot(a_v);
        let b = 2.0 * a_v.dot(b_v);
        let c = b_v.dot(b_v) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let t0 = (-b - s) / (2.0 * a);
        let t1 = (-b + s) / (2.0 * a);
        [t0, t1].into_iter().find(|&t| t > 1e-9)
    }

    pub fn normal(&self, p: Vec3<f64>) -> Vec3<f64> {
        let q = p - self.center;
        let r = self.radii;
        Vec3::new(q.x / (r.x * r.x), q.y / (r.y * r.y), q.z / (r.z * r.z)).normalized()
    }

    fn inside_box(&self, min: Vec3<f64>, max: Vec3<f64>, tol: f64) -> bool {
        let lo = self.center - self.radii;
        let hi = self.center + self.radii;
        lo.x >= min.x - tol && lo.y >= min.y - tol && lo.z >= min.z - tol && hi.x <= max.x + tol && hi.y <= max.y + tol && hi.z <= max.z + tol
    }
}

/// Parameters of a generated room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
    /// Base albedo per layout face (`wall_0..3`, floor, ceiling).
    pub face_colors: [[f64; 3]; 6],
    /// Plain faces instead of striped / checkered patterns.
    pub textureless: bool,
    pub num_objects: usize,
    pub seed: u64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            min: Vec3::new(-2.0, -2.0, 0.0),
            max: Vec3::new(2.0, 2.0, 2.5),
            face_colors: [
                [0.78, 0.74, 0.66],
                [0.62, 0.70, 0.78],
                [0.80, 0.72, 0.60],
                [0.66, 0.76, 0.64],
                [0.52, 0.42, 0.34],
                [0.90, 0.90, 0.88],
            ],
            textureless: false,
            num_objects: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub spec: RoomSpec,
    pub objects: Vec<Ellipsoid>,
    pub light: Vec3<f64>,
}

impl GroundTruthScene {
    pub fn center(&self) -> Vec3<f64> {
        (self.spec.min + self.spec.max) * 0.5
    }

    /// The ground-truth layout shell.
    pub fn layout(&self, tex_width: usize, tex_height: usize) -> LayoutMesh<f64> {
        LayoutMesh::box_room(self.spec.min, self.spec.max, tex_width, tex_height)
    }

    /// Checks that every object lies inside the room.
    pub fn validate(&self) -> Result<()> {
        for (k, o) in self.objects.iter().enumerate() {
            if !o.inside_box(self.spec.min, self.spec.max, 1e-9) {
                return Err(Error::Scene(format!("object {k} extends outside the room")));
            }
        }
        Ok(())
    }
}

/// Builds a deterministic scene: objects rest on the floor, the first one
/// touching a wall, all separated from each other.
pub fn make_box_scene(spec: &RoomSpec) -> Result<GroundTruthScene> {
    let (min, max) = (spec.min, spec.max);
    if !(max.x - min.x > 1.0 && max.y - min.y > 1.0 && max.z - min.z > 1.0) {
        return Err(Error::Scene("room must be at least 1 m in every direction".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0b1e);
    let center = (min + max) * 0.5;
    let palette = [[0.85, 0.20, 0.15], [0.15, 0.55, 0.85], [0.20, 0.70, 0.25], [0.90, 0.75, 0.10], [0.60, 0.25, 0.70], [0.95, 0.50, 0.20]];
    let mut objects: Vec<Ellipsoid> = Vec::new();
    let keep_out = 0.25 * (max.x - min.x).min(max.y - min.y);
    let mut attempts = 0;
    while objects.len() < spec.num_objects {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Scene(format!("could not place {} objects", spec.num_objects)));
        }
        let radii = Vec3::new(rng.gen_range(0.22..0.38), rng.gen_range(0.22..0.38), rng.gen_range(0.25..0.45));
        let k = objects.len();
        let mut c = Vec3::new(
            rng.gen_range(min.x + radii.x..max.x - radii.x),
            rng.gen_range(min.y + radii.y..max.y - radii.y),
            min.z + radii.z,
        );
        if k == 0 {
            // Push the first object against a wall.
            match rng.gen_range(0..4) {
                0 => c.y = min.y + radii.y,
                1 => c.x = max.x - radii.x,
                2 => c.y = max.y - radii.y,
                _ => c.x = min.x + radii.x,
            }
        }
        // Keep the middle of the room free for the cameras.
        let planar = Vec3::new(c.x - center.x, c.y - center.y, 0.0).norm();
        if planar < keep_out + radii.x.max(radii.y) {
            continue;
        }
        let clear = objects.iter().all(|o| {
            let d = Vec3::new(o.center.x - c.x, o.center.y - c.y, 0.0).norm();
            d > o.radii.x.max(o.radii.y) + radii.x.max(radii.y) + 0.1
        });
        if clear {
            objects.push(Ellipsoid { center: c, radii, color: palette[k % palette.len()] });
        }
    }
    let scene = GroundTruthScene {
        spec: spec.clone(),
        objects,
        light: Vec3::new(center.x + 0.3, center.y - 0.2, max.z - 0.3),
    };
    scene.validate()?;
    Ok(scene)
}

/// Albedo pattern of a layout face at world point `p`.
fn face_albedo(scene: &GroundTruthScene, face: usize, p: Vec3<f64>) -> [f64; 3] {
    let base = scene.spec.face_colors[face];
    if scene.spec.textureless {
        return base;
    }
    let f = match face {
        // Vertical stripes on walls, 0.5 m period along the wall.
        0 | 2 => stripe(p.x, 0.5) * 0.7 + stripe(p.z, 1.25) * 0.3,
        1 | 3 => stripe(p.y, 0.5) * 0.7 + stripe(p.z, 1.25) * 0.3,
        // Checkerboard floor, plain ceiling panels.
        4 => stripe(p.x, 0.8) * stripe(p.y, 0.8),
        _ => stripe(p.x, 1.0) * 0.5,
    };
    base.map(|c| (c * (1.0 + 0.22 * f)).clamp(0.0, 1.0))
}

/// Smooth +-1 square wave with period `period`.
fn stripe(s: f64, period: f64) -> f64 {
    (std::f64::consts::TAU * s / period).sin().clamp(-0.35, 0.35) / 0.35
}

fn shade(scene: &GroundTruthScene, albedo: [f64; 3], p: Vec3<f64>, n: Vec3<f64>) -> [f64; 3] {
    let l = (scene.light - p).normalized();
    let k = AMBIENT + (1.0 - AMBIENT) * n.dot(l).max(0.0);
    albedo.map(|a| a * k)
}

/// Exit point of a ray leaving the box from inside: `(t, face)`.
fn box_exit(min: Vec3<f64>, max: Vec3<f64>, o: Vec3<f64>, d: Vec3<f64>) -> Option<(f64, usize)> {
    // Faces in box_room order: -y, +x, +y, -x, -z, +z.
    let cands = [
        (d.y < 0.0, (min.y - o.y) / d.y, 0),
        (d.x > 0.0, (max.x - o.x) / d.x, 1),
        (d.y > 0.0, (max.y - o.y) / d.y, 2),
        (d.x < 0.0, (min.x - o.x) / d.x, 3),
        (d.z < 0.0, (min.z - o.z) / d.z, 4),
        (d.z > 0.0, (max.z - o.z) / d.z, 5),
    ];
    cands
        .into_iter()
        .filter(|(ok, t, _)| *ok && *t > 0.0)
        .map(|(_, t, f)| (t, f))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn face_normal_inward(face: usize) -> Vec3<f64> {
    match face {
        0 => Vec3::new(0.0, 1.0, 0.0),
        1 => Vec3::new(-1.0, 0.0, 0.0),
        2 => Vec3::new(0.0, -1.0, 0.0),
        3 => Vec3::new(1.0, 0.0, 0.0),
        4 => Vec3::new(0.0, 0.0, 1.0),
        _ => Vec3::new(0.0, 0.0, -1.0),
    }
}

/// Color and semantic label seen along one ray.
pub fn trace(scene: &GroundTruthScene, o: Vec3<f64>, d: Vec3<f64>) -> ([f64; 3], u8) {
    let mut best: Option<(f64, usize)> = None;
    for (k, e) in scene.objects.iter().enumerate() {
        if let Some(t) = e.intersect(o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, k));
            }
        }
    }
    let wall = box_exit(scene.spec.min, scene.spec.max, o, d);
    match (best, wall) {
        (Some((t, k)), w) if w.is_none_or(|(tw, _)| t < tw) => {
            let e = &scene.objects[k];
            let p = o + d * t;
            (shade(scene, e.color, p, e.normal(p)), OBJECT_LABEL_BASE + k as u8)
        }
        (_, Some((t, f))) => {
            let p = o + d * t;
            (shade(scene, face_albedo(scene, f, p), p, face_normal_inward(f)), f as u8)
        }
        _ => ([0.0; 3], u8::MAX),
    }
}

/// Exact ray-cast render: RGB image and per-pixel semantic labels.
pub fn render_oracle(scene: &GroundTruthScene, camera: &Camera<f64>) -> (ImageBuffer<f64>, Vec<u8>) {
    let (w, h) = (camera.width, camera.height);
    let o = camera.center();
    let px: Vec<([f64; 3], u8)> = (0..w * h).into_par_iter().map(|p| trace(scene, o, camera.pixel_ray(p % w, p / w))).collect();
    let mut img = ImageBuffer::new(w, h, 3);
    let mut labels = Vec::with_capacity(w * h);
    for (p, (c, l)) in px.into_iter().enumerate() {
        img.pixel_mut(p).copy_from_slice(&c);
        labels.push(l);
    }
    (img, labels)
}

/// Options for dataset emission.
#[derive(Clone, Debug, PartialEq)]
pub struct EmitOptions {
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_x_deg: f64,
    /// Add nested part masks like an automatic segmenter does.
    pub sam_like: bool,
    pub num_points: usize,
    pub texture_width: usize,
    pub texture_height: usize,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            n_views: 90,
            width: 128,
            height: 128,
            fov_x_deg: 75.0,
            sam_like: true,
            num_points: 3000,
            texture_width: 192,
            texture_height: 32,
        }
    }
}

/// Every eighth view (index 0, 8, 16, ...) is held out for testing.
pub fn split_for(index: usize) -> Split {
    if index % 8 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Interior orbit looking outwards across the room, z up.
pub fn orbit_cameras(scene: &GroundTruthScene, opts: &EmitOptions) -> Vec<Camera<f64>> {
    let c = scene.center();
    let (min, max) = (scene.spec.min, scene.spec.max);
    let r = 0.18 * (max.x - min.x).min(max.y - min.y);
    let golden = 0.618_033_988_749_894_9;
    (0..opts.n_views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / opts.n_views as f64;
            let jitter = ((i as f64 * golden).fract() - 0.5) * 0.6;
            let eye = Vec3::new(c.x + r * a.cos(), c.y + r * a.sin(), min.z + 0.45 * (max.z - min.z) + 0.3 * jitter);
            // Look outwards past the opposite side, slightly downwards.
            let dir = Vec3::new(a.cos() + 0.25 * jitter, a.sin() - 0.25 * jitter, -0.28);
            let target = eye + dir;
            Camera::look_at(eye, target, Vec3::new(0.0, 0.0, 1.0), opts.fov_x_deg, opts.width, opts.height)
        })
        .collect()
}

/// Instance masks from the semantic labels: one per object and per layout
/// face. With `sam_like`, nested part masks are added (object halves and
/// wall panels), which overlap-removal is expected to discard.
pub fn instance_masks(labels: &[u8], width: usize, height: usize, image_id: &str, sam_like: bool) -> MaskSet {
    let mut set = MaskSet::new(image_id, width, height);
    let mut present: Vec<u8> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut next_id = 0u64;
    let mut push = |set: &mut MaskSet, bits: Vec<bool>| {
        let m = Mask::from_bits(next_id, &bits);
        next_id += 1;
        if m.area() > 0 {
            set.masks.push(m);
        }
    };
    for &l in &present {
        if l == u8::MAX {
            continue;
        }
        let bits: Vec<bool> = labels.iter().map(|&v| v == l).collect();
        push(&mut set, bits.clone());
        if sam_like {
            // Bounding box of the region; the part is its upper half
            // (objects) or its left third (layout faces).
            let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
            for (p, &b) in bits.iter().enumerate() {
                if b {
                    let (x, y) = (p % width, p / width);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
            let part: Vec<bool> = bits
                .iter()
                .enumerate()
                .map(|(p, &b)| {
                    let (x, y) = (p % width, p / width);
                    b && if l >= OBJECT_LABEL_BASE { y <= (y0 + y1) / 2 } else { x <= x0 + (x1 - x0) / 3 }
                })
                .collect();
            push(&mut set, part);
        }
    }
    set
}

/// Surface samples with colors, standing in for a sparse SfM cloud. A
/// fraction `object_share` of the points lies on objects.
pub fn sample_points(scene: &GroundTruthScene, n: usize, seed: u64) -> Vec<PointRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0901_e75a);
    let object_share = if scene.objects.is_empty() { 0.0 } else { 0.4 };
    let (min, max) = (scene.spec.min, scene.spec.max);
    let mut out = Vec::with_capacity(n);
    let noise = 0.01;
    for i in 0..n {
        let on_object = (i as f64 + 0.5) / n as f64 > 1.0 - object_share;
        let (p, color) = if on_object {
            let e = &scene.objects[rng.gen_range(0..scene.objects.len())];
            let dir = loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let nn = v.norm();
                if nn > 1e-3 && nn <= 1.0 {
                    break v * (1.0 / nn);
                }
            };
            let p = e.center + Vec3::new(dir.x * e.radii.x, dir.y * e.radii.y, dir.z * e.radii.z);
            (p, shade(scene, e.color, p, e.normal(p)))
        } else {
            // Area-weighted face choice.
            let ext = max - min;
            let areas = [ext.x * ext.z, ext.y * ext.z, ext.x * ext.z, ext.y * ext.z, ext.x * ext.y, ext.x * ext.y];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut f = 0;
            while pick > areas[f] && f < 5 {
                pick -= areas[f];
                f += 1;
            }
            let (u, v) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let p = match f {
                0 => Vec3::new(min.x + u * ext.x, min.y, min.z + v * ext.z),
                1 => Vec3::new(max.x, min.y + u * ext.y, min.z + v * ext.z),
                2 => Vec3::new(min.x + u * ext.x, max.y, min.z + v * ext.z),
                3 => Vec3::new(min.x, min.y + u * ext.y, min.z + v * ext.z),
                4 => Vec3::new(min.x + u * ext.x, min.y + v * ext.y, min.z),
                _ => Vec3::new(min.x + u * ext.x, min.y + v * ext.y, max.z),
            };
            (p, shade(scene, face_albedo(scene, f, p), p, face_normal_inward(f)))
        };
        let jitter = Vec3::new(rng.gen_range(-noise..noise), rng.gen_range(-noise..noise), rng.gen_range(-noise..noise));
        out.push(PointRecord { position: (p + jitter).to_array(), color });
    }
    out
}

/// Writes a complete dataset directory (see `dataset` module docs).
pub fn emit_dataset(scene: &GroundTruthScene, opts: &EmitOptions, out_dir: &Path) -> Result<SceneFile> {
    if opts.n_views < MIN_VIEWS {
        return Err(Error::Config(format!("at least {MIN_VIEWS} views are required (got {})", opts.n_views)));
    }
    if opts.width == 0 || opts.height == 0 {
        return Err(Error::Config("resolution must be non-zero".into()));
    }
    for sub in ["images", "masks", "semantic"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cams = orbit_cameras(scene, opts);
    let mut views = Vec::with_capacity(cams.len());
    for (i, cam) in cams.into_iter().enumerate() {
        let name = format!("view_{i:03}");
        let (img, labels) = render_oracle(scene, &cam);
        img.save_png(&out_dir.join("images").join(format!("{name}.png")))?;
        save_gray_u8(&out_dir.join("semantic").join(format!("{name}.png")), cam.width, cam.height, &labels)?;
        let masks = instance_masks(&labels, cam.width, cam.height, &name, opts.sam_like);
        save_masks(&masks, &out_dir.join("masks").join(format!("{name}.masks.json")))?;
        views.push(ViewRecord { name, split: split_for(i), camera: cam });
    }
    let layout = scene.layout(opts.texture_width, opts.texture_height);
    layout.save(&out_dir.join("layout.obj"), &out_dir.join("layout.groups.json"))?;
    let points = sample_points(scene, opts.num_points, scene.spec.seed);
    let pts_path = out_dir.join("points.json");
    std::fs::write(&pts_path, serde_json::to_string(&points)?).map_err(|e| Error::io(&pts_path, e))?;
    let file = SceneFile { background: [0.0; 3], views, ground_truth: Some(scene.clone()) };
    file.save(&out_dir.join("scene.toml"))?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_outside_room_rejected() {
        let mut s = make_box_scene(&RoomSpec::default()).unwrap();
        s.objects[0].center.x = 5.0;
        assert!(matches!(s.validate(), Err(Error::Scene(_))));
    }

    #[test]
    fn first_object_touches_a_wall() {
        for seed in 0..5 {
            let s = make_box_scene(&RoomSpec { seed, ..Default::default() }).unwrap();
            let o = &s.objects[0];
            let (lo, hi) = (o.center - o.radii, o.center + o.radii);
            let (min, max) = (s.spec.min, s.spec.max);
            let touch = [lo.x - min.x, max.x - hi.x, lo.y - min.y, max.y - hi.y].iter().any(|d| d.abs() < 1e-12);
            assert!(touch, "seed {seed}");
        }
    }

    #[test]
    fn uniform_wall_gives_constant_image() {
        let spec = RoomSpec { textureless: true, num_objects: 0, ..Default::default() };
        let mut s = make_box_scene(&spec).unwrap();
        // Light far behind the camera along the wall normal: uniform shading.
        s.light = Vec3::new(0.0, 1e9, 1.0);
        let cam = Camera::look_at(Vec3::new(0.0, 1.5, 1.25), Vec3::new(0.0, -2.0, 1.25), Vec3::new(0.0, 0.0, 1.0), 20.0, 16, 16);
        let (img, labels) = render_oracle(&s, &cam);
        assert!(labels.iter().all(|&l| l == 0));
        let first = img.pixel(0).to_vec();
        for p in 0..256 {
            for c in 0..3 {
                assert!((img.pixel(p)[c] - first[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_objects_all_layout() {
        let s = make_box_scene(&RoomSpec { num_objects: 0, ..Default::default() }).unwrap();
        let opts = EmitOptions { n_views: 8, width: 16, height: 16, ..Default::default() };
        for cam in orbit_cameras(&s, &opts) {
            let (_, labels) = render_oracle(&s, &cam);
            assert!(labels.iter().all(|&l| l < 6));
        }
    }
}
