use hybrid_splat::camera::Camera;
use hybrid_splat::compositor::{composite, composite_backward, cull_behind_mesh};
use hybrid_splat::config::TrainConfig;
use hybrid_splat::gaussian::{Gaussian3D, GaussianSet};
use hybrid_splat::gaussian_raster::render;
use hybrid_splat::image_buf::ImageBuffer;
use hybrid_splat::linalg::Vec3;
use hybrid_splat::mesh::LayoutMesh;
use hybrid_splat::mesh_raster::{rasterize_mesh, MeshRender};
use hybrid_splat::scalar::logit;
use hybrid_splat::trainer::{render_state, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(w: usize) -> Camera<f64> {
    Camera::look_at(Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, -1.0, 0.0), 60.0, w, w)
}

fn splats(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet<f64> {
    let mut set = GaussianSet::new(0);
    for _ in 0..n {
        let mu = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(1.5..2.5));
        let rgb = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        set.push(Gaussian3D::isotropic(mu, rng.gen_range(0.05..0.3), rgb, rng.gen_range(0.2..0.95), 0));
    }
    set
}

fn no_mesh(w: usize) -> MeshRender<f64> {
    rasterize_mesh(&camera(w), &LayoutMesh::<f64>::empty(4, 4))
}

#[test]
fn uncovered_pixels_match_direct_background_blending() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = camera(20);
    for _ in 0..10 {
        let set = splats(&mut rng, 6);
        let bg = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let g = render(&cam, &set, [0.0; 3], None);
        let direct = render(&cam, &set, bg, None);
        let out = composite(&g, &no_mesh(20), bg).unwrap();
        for (a, b) in out.data.iter().zip(&direct.color.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn covered_pixels_follow_the_blend_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cam = camera(24);
    let mut room = LayoutMesh::<f64>::box_room(Vec3::new(-3.0, -3.0, -1.0), Vec3::new(3.0, 3.0, 4.0), 24, 8);
    for v in room.texture.data.iter_mut() {
        *v = rng.gen_range(-0.5..1.5);
    }
    let m = rasterize_mesh(&cam, &room);
    let set = splats(&mut rng, 8);
    let g = render(&cam, &set, [0.0; 3], None);
    let out = composite(&g, &m, [0.3, 0.3, 0.3]).unwrap();
    for p in 0..24 * 24 {
        assert!(m.is_covered(p));
        let o = g.opacity.data[p];
        for c in 0..3 {
            let want = g.color.data[p * 3 + c] + (1.0 - o) * m.color.data[p * 3 + c];
            assert!((out.data[p * 3 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn opacity_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cam = camera(8);
    let room = LayoutMesh::<f64>::box_room(Vec3::new(-3.0, -3.0, -1.0), Vec3::new(3.0, 3.0, 4.0), 24, 8);
    let mut m = rasterize_mesh(&cam, &room);
    for v in m.color.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    // No Gaussians: O = 0 everywhere, the mesh shows through unchanged.
    let g0 = render(&cam, &GaussianSet::new(0), [0.0; 3], None);
    assert!(g0.opacity.data.iter().all(|&o| o == 0.0));
    assert_eq!(composite(&g0, &m, [0.0; 3]).unwrap().data, m.color.data);
    // A saturating opaque wall of splats: O ~ 1 hides the mesh.
    let mut set = GaussianSet::new(0);
    for i in 0..7 {
        for j in 0..7 {
            let mu = Vec3::new(-1.5 + 0.5 * i as f64, -1.5 + 0.5 * j as f64, 1.0);
            let mut g = Gaussian3D::isotropic(mu, 0.6, [0.2, 0.4, 0.6], 0.5, 0);
            g.logit_opacity = logit(0.99);
            set.push(g);
        }
    }
    let g1 = render(&cam, &set, [0.0; 3], None);
    let out = composite(&g1, &m, [0.0; 3]).unwrap();
    for p in 0..64 {
        let o = g1.opacity.data[p];
        assert!(o > 0.9999, "opacity {o}");
        for c in 0..3 {
            assert!((out.data[p * 3 + c] - g1.color.data[p * 3 + c]).abs() <= (1.0 - o) + 1e-12);
        }
    }
}

#[test]
fn composite_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cam = camera(6);
    let room = LayoutMesh::<f64>::box_room(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 12, 4);
    let mut m = rasterize_mesh(&cam, &room);
    for v in m.color.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    // Leave a few pixels uncovered so the background path is exercised.
    for p in [0usize, 7, 20] {
        m.coverage.data[p] = 0.0;
    }
    let set = splats(&mut rng, 4);
    let g = render(&cam, &set, [0.0; 3], None);
    let bg = [0.1, 0.5, 0.9];
    let w = ImageBuffer::from_fn(6, 6, 3, |x, y, c| ((x + 2 * y + 3 * c) % 5) as f64 - 2.0);
    let grads = composite_backward(&g, &m, bg, &w).unwrap();
    let f = |g: &hybrid_splat::gaussian_raster::RenderBundle<f64>, m: &MeshRender<f64>| -> f64 {
        composite(g, m, bg).unwrap().data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };
    let h = 1e-6;
    for p in 0..36 {
        let mut gp = g.clone();
        let mut gm = g.clone();
        gp.opacity.data[p] += h;
        gm.opacity.data[p] -= h;
        let fd = (f(&gp, &m) - f(&gm, &m)) / (2.0 * h);
        assert!((fd - grads.opacity.data[p]).abs() < 1e-6);
        for c in 0..3 {
            let i = p * 3 + c;
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp.color.data[i] += h;
            mm.color.data[i] -= h;
            let fd = (f(&g, &mp) - f(&g, &mm)) / (2.0 * h);
            assert!((fd - grads.mesh_color.data[i]).abs() < 1e-6);
            assert_eq!(grads.gauss_color.data[i], w.data[i]);
        }
    }
}

// Inside/outside oracle: parity of ray crossings along a fixed, generic direction.
fn ray_hits_triangle(o: [f64; 3], d: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> bool {
    let sub = |p: [f64; 3], q: [f64; 3]| [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    let cross = |p: [f64; 3], q: [f64; 3]| [p[1] * q[2] - p[2] * q[1], p[2] * q[0] - p[0] * q[2], p[0] * q[1] - p[1] * q[0]];
    let dot = |p: [f64; 3], q: [f64; 3]| p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
    let (e1, e2) = (sub(b, a), sub(c, a));
    let pv = cross(d, e2);
    let det = dot(e1, pv);
    if det.abs() < 1e-14 {
        return false;
    }
    let s = sub(o, a);
    let u = dot(s, pv) / det;
    let qv = cross(s, e1);
    let v = dot(d, qv) / det;
    let t = dot(e2, qv) / det;
    u >= 0.0 && v >= 0.0 && u + v <= 1.0 && t > 0.0
}

fn inside_by_parity(mesh: &LayoutMesh<f64>, p: Vec3<f64>) -> bool {
    let d = [0.5377, 0.3141, 0.7833];
    let crossings = mesh
        .faces
        .iter()
        .filter(|f| {
            let v = f.map(|i| [mesh.vertices[i].x, mesh.vertices[i].y, mesh.vertices[i].z]);
            ray_hits_triangle([p.x, p.y, p.z], d, v[0], v[1], v[2])
        })
        .count();
    crossings % 2 == 1
}

#[test]
fn culling_agrees_with_parity_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut room = LayoutMesh::<f64>::box_room(Vec3::new(-2.0, -1.5, 0.0), Vec3::new(2.0, 1.5, 2.5), 24, 8);
    // Jitter the corners so the shell is no longer an axis-aligned box.
    for v in room.vertices.iter_mut() {
        *v = *v + Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    }
    assert!(room.is_watertight());
    let mut set = GaussianSet::new(0);
    let mut expect_kept = Vec::new();
    // Stay away from the surface so the culling tolerance does not matter.
    let margin = |p: Vec3<f64>| -> f64 {
        room.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| room.vertices[i]);
                let n = (b - a).cross(c - a).normalized();
                // Plane distance lower-bounds the triangle distance.
                (p - a).dot(n).abs()
            })
            .fold(f64::INFINITY, f64::min)
    };
    while set.len() < 300 {
        let p = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-2.5..2.5), rng.gen_range(-1.0..3.5));
        if margin(p) < 0.05 {
            continue;
        }
        expect_kept.push(inside_by_parity(&room, p));
        set.push(Gaussian3D::isotropic(p, 0.05, [0.5; 3], 0.5, 0));
    }
    let before: Vec<Vec3<f64>> = set.gaussians.iter().map(|g| g.mu).collect();
    let removed = cull_behind_mesh(&mut set, &room, 0.01, &[]);
    let kept: Vec<Vec3<f64>> = before.iter().zip(&expect_kept).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
    assert_eq!(removed, before.len() - kept.len());
    assert_eq!(set.gaussians.iter().map(|g| g.mu).collect::<Vec<_>>(), kept);
    assert!(set.is_consistent());
    assert!(removed > 50 && kept.len() > 50);
}

#[test]
fn full_render_recomposes_from_its_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let room = LayoutMesh::<f32>::box_room(Vec3::new(-2.0, -2.0, -1.0), Vec3::new(2.0, 2.0, 3.0), 32, 8);
    let points: Vec<([f64; 3], [f64; 3])> = (0..40)
        .map(|_| {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..2.0)];
            (p, [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        })
        .collect();
    let mut state = TrainState::initialize(&points, room, &TrainConfig::default(), [0.2, 0.2, 0.2]);
    for v in state.mesh.texture.data.iter_mut() {
        *v = rng.gen_range(0.0..2.0);
    }
    let cam: Camera<f32> =
        Camera::look_at(Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, -1.0, 0.0), 70.0, 24, 24);
    let r = render_state(&state, &cam, None).unwrap();
    for p in 0..24 * 24 {
        let o = r.gaussians.opacity.data[p];
        for c in 0..3 {
            let want = r.gaussians.color.data[p * 3 + c] + (1.0 - o) * r.mesh.color.data[p * 3 + c];
            assert!((r.both.data[p * 3 + c] - want).abs() < 1e-4);
        }
    }
}
