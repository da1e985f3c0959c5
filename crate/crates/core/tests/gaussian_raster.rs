use hybrid_splat::camera::Camera;
use hybrid_splat::gaussian::{Gaussian3D, GaussianSet};
use hybrid_splat::gaussian_raster::{backward, project, rasterize, render, ScreenSplat, LOW_PASS, SUPPORT_SIGMA};
use hybrid_splat::image_buf::ImageBuffer;
use hybrid_splat::linalg::Vec3;
use hybrid_splat::scalar::logit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn camera(w: usize, h: usize) -> Camera<f64> {
    Camera::look_at(
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(0.0, -1.0, 0.0),
        60.0,
        w,
        h,
    )
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianSet<f64> {
    let mut set = GaussianSet::new(degree);
    for _ in 0..n {
        let mut g = Gaussian3D::zeros(degree);
        g.mu = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(1.8..3.0));
        g.log_scale = Vec3::new(
            rng.gen_range(0.06f64..0.25).ln(),
            rng.gen_range(0.06f64..0.25).ln(),
            rng.gen_range(0.06f64..0.25).ln(),
        );
        g.rot_quat = [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        for (k, v) in g.sh_color.iter_mut().enumerate() {
            *v = if k < 3 { rng.gen_range(1.0..3.0) } else { rng.gen_range(-0.15..0.15) };
        }
        g.logit_opacity = logit(rng.gen_range(0.2..0.85));
        set.push(g);
    }
    set
}

/// Exhaustive per-pixel front-to-back evaluation: every splat, no tiles, no
/// early exit.
fn brute_force(splats: &[ScreenSplat<f64>], w: usize, h: usize, bg: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
    let mut color = vec![0.0; w * h * 3];
    let mut opacity = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for s in splats {
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let [a, b, cc] = s.cov2d;
                let det = a * cc - b * b;
                let q = (cc * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                if q > SUPPORT_SIGMA * SUPPORT_SIGMA {
                    continue;
                }
                let alpha = s.alpha * (-0.5 * q).exp();
                for ch in 0..3 {
                    c[ch] += s.color[ch] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for ch in 0..3 {
                color[(y * w + x) * 3 + ch] = c[ch] + t * bg[ch];
            }
            opacity[y * w + x] = 1.0 - t;
        }
    }
    (color, opacity)
}

#[test]
fn rasterize_matches_exhaustive_blending() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = camera(32, 32);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let set = random_set(&mut rng, 5, 1);
        let splats = project(&cam, &set, None);
        let bg = [0.1, 0.2, 0.3];
        let (c, o) = brute_force(&splats, 32, 32, bg);
        let b = rasterize(splats, 32, 32, bg);
        for (a, e) in b.color.data.iter().zip(&c).chain(b.opacity.data.iter().zip(&o)) {
            worst = worst.max((a - e).abs());
        }
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn opacity_in_unit_interval_and_monotone_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cam = camera(24, 24);
    let set = random_set(&mut rng, 8, 0);
    let base = render(&cam, &set, [0.0; 3], None);
    assert!(base.opacity.data.iter().all(|&o| (0.0..=1.0).contains(&o)));
    for i in 0..set.len() {
        let mut s2 = set.clone();
        s2.gaussians[i].logit_opacity += 0.5;
        let r = render(&cam, &s2, [0.0; 3], None);
        for (a, b) in r.opacity.data.iter().zip(&base.opacity.data) {
            assert!(*a >= *b - 1e-12);
        }
    }
}

#[test]
fn transmittances_are_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cam = camera(16, 16);
    let set = random_set(&mut rng, 10, 0);
    let b = render(&cam, &set, [0.0; 3], None);
    let aux = b.aux.as_ref().unwrap();
    for p in 0..256 {
        let t = aux.transmittances(p);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn deterministic_for_fixed_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cam = camera(20, 20);
    let mut set = random_set(&mut rng, 6, 1);
    // Two Gaussians at identical depth: stable sort keeps insertion order.
    set.gaussians[1].mu.z = set.gaussians[0].mu.z;
    let a = render(&cam, &set, [0.0; 3], None);
    let b = render(&cam, &set, [0.0; 3], None);
    assert_eq!(a, b);
    let order: Vec<_> = project(&cam, &set, None).iter().map(|s| s.source).collect();
    let p0 = order.iter().position(|&i| i == 0).unwrap();
    let p1 = order.iter().position(|&i| i == 1).unwrap();
    assert!(p0 < p1);
}

#[test]
fn early_termination_close_to_exhaustive() {
    // Dense opaque stack so termination actually triggers.
    let cam = camera(8, 8);
    let mut set = GaussianSet::new(0);
    for k in 0..30 {
        set.push(Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 2.0 + 0.05 * k as f64), 2.0, [0.3 + 0.02 * k as f64; 3], 0.6, 0));
    }
    let splats = project(&cam, &set, None);
    let (c, _) = brute_force(&splats, 8, 8, [1.0; 3]);
    let b = rasterize(splats, 8, 8, [1.0; 3]);
    let n_contrib = b.aux.as_ref().unwrap().pixel(0).len();
    assert!(n_contrib < 30, "termination did not trigger");
    for (a, e) in b.color.data.iter().zip(&c) {
        assert!((a - e).abs() < 1e-4);
    }
}

#[test]
fn projected_covariance_matches_sample_projection() {
    let cam = camera(64, 64);
    let (s, z) = (0.05, 2.0);
    let g = Gaussian3D::isotropic(Vec3::new(0.0, 0.0, z), s, [0.5; 3], 0.5, 0);
    let set = GaussianSet::from_gaussians(0, [g]);
    let splat = &project(&cam, &set, None)[0];
    // Monte-Carlo oracle: project samples of the 3D Gaussian.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200_000;
    let (mut su, mut sv, mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let p = Vec3::new(s * n[0], s * n[1], z + s * n[2]);
        let (u, v, _) = cam.project(p);
        su += u;
        sv += v;
        suu += u * u;
        svv += v * v;
        suv += u * v;
    }
    let nf = n as f64;
    let (mu, mv) = (su / nf, sv / nf);
    let cuu = suu / nf - mu * mu;
    let cvv = svv / nf - mv * mv;
    let cuv = suv / nf - mu * mv;
    let expected = (cam.fx * s / z).powi(2);
    let a = splat.cov2d[0] - LOW_PASS;
    let c = splat.cov2d[2] - LOW_PASS;
    assert!((a - expected).abs() / expected < 1e-9);
    assert!((a - cuu).abs() / cuu < 0.01, "{a} vs MC {cuu}");
    assert!((c - cvv).abs() / cvv < 0.01, "{c} vs MC {cvv}");
    assert!(splat.cov2d[1].abs() < 1e-12 && cuv.abs() / cuu < 0.01);
}

fn weighted_loss(b: &hybrid_splat::gaussian_raster::RenderBundle<f64>, wc: &ImageBuffer<f64>, wo: &ImageBuffer<f64>) -> f64 {
    let lc: f64 = b.color.data.iter().zip(&wc.data).map(|(a, w)| a * w).sum();
    let lo: f64 = b.opacity.data.iter().zip(&wo.data).map(|(a, w)| a * w).sum();
    lc + lo
}

fn fd_check(set: &GaussianSet<f64>, cam: &Camera<f64>, bg: [f64; 3], tol: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (w, h) = (cam.width, cam.height);
    let mut wc = ImageBuffer::new(w, h, 3);
    wc.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let wo = ImageBuffer::from_fn(w, h, 1, |_, _, _| 0.5);
    let b = render(cam, set, bg, None);
    let bw = backward(&b, cam, set, &wc, &wo).unwrap();
    let mut worst: f64 = 0.0;
    let hstep = 1e-6;
    for i in 0..set.len() {
        let base = set.gaussians[i].params();
        let analytic = bw.grads[i].params();
        for k in 0..base.len() {
            let eval = |delta: f64| {
                let mut s2 = set.clone();
                let mut p = base.clone();
                p[k] += delta;
                s2.gaussians[i].set_params(&p);
                weighted_loss(&render(cam, &s2, bg, None), &wc, &wo)
            };
            let fd = (eval(hstep) - eval(-hstep)) / (2.0 * hstep);
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-4);
            assert!(rel < tol, "gaussian {i} param {k}: fd {fd} analytic {}", analytic[k]);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn zero_cotangent_gives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cam = camera(16, 16);
    let set = random_set(&mut rng, 4, 3);
    let b = render(&cam, &set, [0.2; 3], None);
    let bw = backward(&b, &cam, &set, &ImageBuffer::new(16, 16, 3), &ImageBuffer::new(16, 16, 1)).unwrap();
    assert!(bw.grads.iter().all(|g| g.params().iter().all(|&v| v == 0.0)));
}

#[test]
fn single_splat_opacity_gradient() {
    let cam = camera(8, 8);
    let set = GaussianSet::from_gaussians(0, [Gaussian3D::isotropic(Vec3::new(0.0, 0.0, 2.0), 0.3, [0.7, 0.4, 0.2], 0.6, 0)]);
    let worst = fd_check(&set, &cam, [0.1, 0.1, 0.1], 1e-4);
    assert!(worst < 1e-4);
}

#[test]
fn five_splat_scene_all_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cam = camera(32, 32);
    let set = random_set(&mut rng, 5, 3);
    let worst = fd_check(&set, &cam, [0.3, 0.2, 0.1], 1e-3);
    println!("max relative error {worst:e}");
}

#[test]
fn off_frustum_splat_gradients_and_bounded_footprint() {
    // Centers beyond the frustum guard (|x/z| > 1.3 tan 30deg) whose tails
    // still reach the image.
    let cam = camera(24, 24);
    let mut a = Gaussian3D::isotropic(Vec3::new(1.9, 0.1, 2.0), 0.45, [0.6, 0.3, 0.8], 0.7, 1);
    a.log_scale.y = 0.3f64.ln();
    a.rot_quat = [0.9, 0.1, -0.2, 0.3];
    let mut b = Gaussian3D::isotropic(Vec3::new(-0.2, -1.7, 1.8), 0.4, [0.2, 0.9, 0.4], 0.5, 1);
    b.log_scale.x = 0.25f64.ln();
    let set = GaussianSet::from_gaussians(1, [a, b]);
    let splats = project(&cam, &set, None);
    assert_eq!(splats.len(), 2);
    fd_check(&set, &cam, [0.1, 0.2, 0.3], 1e-3);

    // A tiny Gaussian just past the near plane and far off-axis stays small.
    let near = GaussianSet::from_gaussians(0, [Gaussian3D::isotropic(Vec3::new(-8.0, 0.0, 0.21), 0.01, [1.0; 3], 0.9, 0)]);
    assert!(project(&cam, &near, None).is_empty());
}
