//! Differentiable CPU rasterizer for 3D Gaussians.
//!
//! Forward: project, sort by depth, and alpha-blend front to back per pixel
//! while also producing the accumulated opacity map `O = 1 - T_final`.
//! Backward: exact reverse-mode gradients of color and opacity maps with
//! respect to every Gaussian parameter.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianGrads, GaussianSet};
use crate::image_buf::ImageBuffer;
use crate::linalg::{quat_norm, quat_normalize, quat_to_mat, quat_to_mat_vjp, sym2_eigenvalues, Mat3, Vec3};
use crate::scalar::Real;
use crate::sh;

/// Added to the diagonal of every projected covariance (pixels^2).
pub const LOW_PASS: f64 = 0.3;
/// Splat support: Mahalanobis distance at most 3.
pub const SUPPORT_SIGMA: f64 = 3.0;
/// Blending stops once transmittance falls below this value.
pub const T_MIN: f64 = 1e-4;
/// Gaussians closer than this to the image plane are skipped (meters).
pub const NEAR_PLANE: f64 = 0.2;
/// The projection Jacobian is evaluated no further off-axis than this
/// multiple of the half field of view, so near off-screen Gaussians do not
/// blow up into huge footprints.
pub const FRUSTUM_GUARD: f64 = 1.3;

const TILE: usize = 16;
const ROW_CHUNKS: usize = 8;

/// A Gaussian after projection to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ScreenSplat<T> {
    /// Index into the source [`GaussianSet`] (or caller-defined id).
    pub source: usize,
    pub mean2d: [T; 2],
    /// Symmetric 2x2 covariance `[a, b, c]` = `[[a, b], [b, c]]`, low-pass included.
    pub cov2d: [T; 3],
    /// Inverse of `cov2d`, same packing.
    pub conic: [T; 3],
    pub depth: T,
    pub color: [T; 3],
    pub alpha: T,
    /// Support radius in pixels.
    pub radius: T,
}

impl<T: Real> ScreenSplat<T> {
    /// Builds a splat from a 2D covariance, deriving conic and radius.
    pub fn new(source: usize, mean2d: [T; 2], cov2d: [T; 3], depth: T, color: [T; 3], alpha: T) -> Self {
        let [a, b, c] = cov2d;
        let det = a * c - b * b;
        let conic = [c / det, -b / det, a / det];
        let (lmax, _) = sym2_eigenvalues(a, b, c);
        let radius = (T::lit(SUPPORT_SIGMA) * lmax.sqrt()).ceil();
        Self { source, mean2d, cov2d, conic, depth, color, alpha, radius }
    }

    /// Gaussian falloff `exp(-q/2)` at a pixel center, or `None` outside the support.
    #[inline]
    pub fn falloff(&self, px: T, py: T) -> Option<(T, T, T)> {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [ca, cb, cc] = self.conic;
        let q = ca * dx * dx + T::lit(2.0) * cb * dx * dy + cc * dy * dy;
        if q > T::lit(SUPPORT_SIGMA * SUPPORT_SIGMA) {
            return None;
        }
        Some(((T::lit(-0.5) * q).exp(), dx, dy))
    }
}

/// Mesh depth used to drop Gaussians hidden behind the layout.
pub struct DepthClip<'a, T> {
    pub depth: &'a ImageBuffer<T>,
    pub eps: T,
}

/// One splat's effective alpha at a pixel, in blending order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution<T> {
    pub splat: u32,
    pub alpha: T,
}

/// Per-pixel blending record kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterAux<T> {
    pub splats: Vec<ScreenSplat<T>>,
    /// `offsets[p]..offsets[p + 1]` indexes `contributions` for pixel `p`.
    pub offsets: Vec<usize>,
    pub contributions: Vec<Contribution<T>>,
}

impl<T: Real> RasterAux<T> {
    pub fn pixel(&self, p: usize) -> &[Contribution<T>] {
        &self.contributions[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Transmittance before each contribution of pixel `p`, plus the final value.
    pub fn transmittances(&self, p: usize) -> Vec<T> {
        let mut t = T::one();
        let mut out = vec![t];
        for c in self.pixel(p) {
            t *= T::one() - c.alpha;
            out.push(t);
        }
        out
    }
}

/// Output of [`rasterize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBundle<T> {
    pub color: ImageBuffer<T>,
    pub opacity: ImageBuffer<T>,
    /// Depth of the front-most contributor; +inf where nothing contributes.
    pub depth: ImageBuffer<T>,
    pub background: [T; 3],
    pub aux: Option<RasterAux<T>>,
}

impl<T: Real> RenderBundle<T> {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Drops the backward-pass data.
    pub fn without_aux(mut self) -> Self {
        self.aux = None;
        self
    }
}

/// SH color of a Gaussian seen from `cam_center`, before clamping.
fn sh_color_raw<T: Real>(g: &Gaussian3D<T>, degree: usize, cam_center: Vec3<T>, basis: &mut [T]) -> [T; 3] {
    let dir = (g.mu - cam_center).normalized();
    sh::eval_into(dir, degree, basis, None);
    let mut c = [T::zero(); 3];
    for (k, y) in basis.iter().enumerate() {
        for (ch, cv) in c.iter_mut().enumerate() {
            *cv += g.sh_color[k * 3 + ch] * *y;
        }
    }
    c
}

/// Projects every Gaussian, drops those behind the near plane (or behind the
/// mesh when `clip` is given) and returns the survivors stably sorted by depth.
pub fn project<T: Real>(camera: &Camera<T>, set: &GaussianSet<T>, clip: Option<&DepthClip<'_, T>>) -> Vec<ScreenSplat<T>> {
    let center = camera.center();
    let w = camera.rotation;
    let ncoef = sh::num_coeffs(set.sh_degree);
    let mut basis = vec![T::zero(); ncoef];
    let mut out = Vec::with_capacity(set.len());
    let (wf, hf) = (T::from_usize_lossy(camera.width), T::from_usize_lossy(camera.height));
    for (i, g) in set.gaussians.iter().enumerate() {
        let pc = camera.to_camera(g.mu);
        if pc.z <= T::lit(NEAR_PLANE) {
            continue;
        }
        let (u, v) = (camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy);
        if let Some(clip) = clip {
            if u >= T::zero() && v >= T::zero() && u < wf && v < hf {
                let md = clip.depth.get(u.to_usize().unwrap_or(0), v.to_usize().unwrap_or(0), 0);
                if pc.z > md + clip.eps {
                    continue;
                }
            }
        }
        let cov3 = g.covariance();
        let jt = jacobian(camera, pc).mul_mat(&w);
        let c2 = project_cov(&jt, &cov3);
        let low = T::lit(LOW_PASS);
        let cov2d = [c2[0] + low, c2[1], c2[2] + low];
        let raw = sh_color_raw(g, set.sh_degree, center, &mut basis);
        let color = raw.map(|c| c.max(T::zero()));
        let splat = ScreenSplat::new(i, [u, v], cov2d, pc.z, color, g.alpha());
        // Off-screen footprint contributes nothing.
        let r = splat.radius;
        if u + r < T::zero() || v + r < T::zero() || u - r > wf || v - r > hf {
            continue;
        }
        out.push(splat);
    }
    out.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal));
    out
}

/// Point at which the projection Jacobian is evaluated: `pc` with its
/// lateral offsets clamped to the guarded frustum. Also reports which axes
/// were clamped.
fn jacobian_point<T: Real>(camera: &Camera<T>, pc: Vec3<T>) -> (Vec3<T>, [bool; 2]) {
    let guard = T::lit(FRUSTUM_GUARD);
    let lx = guard * T::lit(0.5) * T::from_usize_lossy(camera.width) / camera.fx;
    let ly = guard * T::lit(0.5) * T::from_usize_lossy(camera.height) / camera.fy;
    let (rx, ry) = (pc.x / pc.z, pc.y / pc.z);
    let cx = rx.max(-lx).min(lx);
    let cy = ry.max(-ly).min(ly);
    (Vec3::new(cx * pc.z, cy * pc.z, pc.z), [cx != rx, cy != ry])
}

/// Jacobian of the perspective projection at camera-space point `pc`
/// (after [`jacobian_point`] clamping), as a 3x3 matrix whose last row is zero.
fn jacobian<T: Real>(camera: &Camera<T>, pc: Vec3<T>) -> Mat3<T> {
    let (pc, _) = jacobian_point(camera, pc);
    let z = T::zero();
    let iz = T::one() / pc.z;
    let iz2 = iz * iz;
    Mat3::from_rows([
        [camera.fx * iz, z, -camera.fx * pc.x * iz2],
        [z, camera.fy * iz, -camera.fy * pc.y * iz2],
        [z, z, z],
    ])
}

/// Upper-left 2x2 of `T Σ T^T`, packed.
fn project_cov<T: Real>(t: &Mat3<T>, cov3: &Mat3<T>) -> [T; 3] {
    let r0 = t.row(0);
    let r1 = t.row(1);
    let s0 = cov3.mul_vec(r0);
    let s1 = cov3.mul_vec(r1);
    [r0.dot(s0), r0.dot(s1), r1.dot(s1)]
}

struct ChunkOut<T> {
    color: Vec<T>,
    opacity: Vec<T>,
    depth: Vec<T>,
    counts: Vec<usize>,
    contributions: Vec<Contribution<T>>,
}

fn bin_tiles<T: Real>(splats: &[ScreenSplat<T>], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let r = s.radius.as_f64();
        let (mx, my) = (s.mean2d[0].as_f64(), s.mean2d[1].as_f64());
        if !(mx.is_finite() && my.is_finite() && r.is_finite()) {
            continue;
        }
        let x0 = ((mx - r) / TILE as f64).floor().max(0.0) as usize;
        let y0 = ((my - r) / TILE as f64).floor().max(0.0) as usize;
        let x1 = (((mx + r) / TILE as f64).floor() as i64).min(tiles_x as i64 - 1);
        let y1 = (((my + r) / TILE as f64).floor() as i64).min(tiles_y as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for ty in y0..=(y1 as usize) {
            for tx in x0..=(x1 as usize) {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    (tiles_x, bins)
}

/// Front-to-back alpha blending of depth-sorted splats.
pub fn rasterize<T: Real>(splats: Vec<ScreenSplat<T>>, width: usize, height: usize, background: [T; 3]) -> RenderBundle<T> {
    let (tiles_x, bins) = bin_tiles(&splats, width, height);
    let rows_per_chunk = height.div_ceil(ROW_CHUNKS).max(1);
    let chunks: Vec<ChunkOut<T>> = (0..height.div_ceil(rows_per_chunk))
        .into_par_iter()
        .map(|ci| {
            let y_start = ci * rows_per_chunk;
            let y_end = (y_start + rows_per_chunk).min(height);
            let n = (y_end - y_start) * width;
            let mut out = ChunkOut {
                color: Vec::with_capacity(n * 3),
                opacity: Vec::with_capacity(n),
                depth: Vec::with_capacity(n),
                counts: Vec::with_capacity(n),
                contributions: Vec::new(),
            };
            for y in y_start..y_end {
                for x in 0..width {
                    let bin = &bins[(y / TILE) * tiles_x + x / TILE];
                    blend_pixel(&splats, bin, x, y, background, &mut out);
                }
            }
            out
        })
        .collect();

    let mut color = ImageBuffer::new(width, height, 3);
    let mut opacity = ImageBuffer::new(width, height, 1);
    let mut depth = ImageBuffer::new(width, height, 1);
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut contributions = Vec::new();
    offsets.push(0);
    let (mut pc, mut po) = (0, 0);
    for ch in chunks {
        color.data[pc..pc + ch.color.len()].copy_from_slice(&ch.color);
        opacity.data[po..po + ch.opacity.len()].copy_from_slice(&ch.opacity);
        depth.data[po..po + ch.depth.len()].copy_from_slice(&ch.depth);
        pc += ch.color.len();
        po += ch.opacity.len();
        let base = contributions.len();
        let mut acc = base;
        for cnt in ch.counts {
            acc += cnt;
            offsets.push(acc);
        }
        contributions.extend(ch.contributions);
    }
    RenderBundle {
        color,
        opacity,
        depth,
        background,
        aux: Some(RasterAux { splats, offsets, contributions }),
    }
}

#[inline]
fn blend_pixel<T: Real>(splats: &[ScreenSplat<T>], bin: &[u32], x: usize, y: usize, bg: [T; 3], out: &mut ChunkOut<T>) {
    let half = T::lit(0.5);
    let (px, py) = (T::from_usize_lossy(x) + half, T::from_usize_lossy(y) + half);
    let mut t = T::one();
    let mut c = [T::zero(); 3];
    let mut front = T::infinity();
    let mut count = 0;
    for &si in bin {
        let s = &splats[si as usize];
        let Some((g, _, _)) = s.falloff(px, py) else { continue };
        let a = s.alpha * g;
        if front.is_infinite() {
            front = s.depth;
        }
        for ch in 0..3 {
            c[ch] += s.color[ch] * a * t;
        }
        t *= T::one() - a;
        out.contributions.push(Contribution { splat: si, alpha: a });
        count += 1;
        if t < T::lit(T_MIN) {
            break;
        }
    }
    for ch in 0..3 {
        out.color.push(c[ch] + t * bg[ch]);
    }
    out.opacity.push(T::one() - t);
    out.depth.push(front);
    out.counts.push(count);
}

/// Gradients produced by [`backward`].
#[derive(Clone, Debug)]
pub struct GaussianBackward<T> {
    pub grads: GaussianGrads<T>,
    /// Per-Gaussian gradient of the loss w.r.t. its 2D mean, in NDC units.
    pub screen_grad: Vec<[T; 2]>,
    /// Per-Gaussian projected radius in pixels; zero when not rendered.
    pub radii: Vec<T>,
}

impl<T: Real> GaussianBackward<T> {
    /// Adds this view's screen-space gradient norms to the densification
    /// statistics of `set` (only for Gaussians rendered in this view).
    pub fn accumulate_into(&self, set: &mut GaussianSet<T>) {
        for i in 0..set.len().min(self.radii.len()) {
            if self.radii[i] > T::zero() {
                let [gx, gy] = self.screen_grad[i];
                set.grad_accum[i] += (gx * gx + gy * gy).sqrt();
                set.grad_count[i] += 1;
                set.max_radii[i] = set.max_radii[i].max(self.radii[i]);
            }
        }
    }
}

/// 2D gradient of one splat: mean (2), conic (3, off-diagonal counted once),
/// color (3), alpha (1).
#[derive(Clone, Copy, Default)]
struct SplatGrad<T> {
    mean: [T; 2],
    conic: [T; 3],
    color: [T; 3],
    alpha: T,
}

impl<T: Real> SplatGrad<T> {
    fn zero() -> Self {
        Self { mean: [T::zero(); 2], conic: [T::zero(); 3], color: [T::zero(); 3], alpha: T::zero() }
    }

    fn add(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.alpha += o.alpha;
    }
}

/// Reverse pass through blending for the splat-level quantities.
fn splat_backward<T: Real>(
    bundle: &RenderBundle<T>,
    aux: &RasterAux<T>,
    grad_color: &ImageBuffer<T>,
    grad_opacity: &ImageBuffer<T>,
) -> Vec<SplatGrad<T>> {
    let (width, height) = (bundle.width(), bundle.height());
    let n = aux.splats.len();
    let rows_per_chunk = height.div_ceil(ROW_CHUNKS).max(1);
    let partials: Vec<Vec<SplatGrad<T>>> = (0..height.div_ceil(rows_per_chunk))
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![SplatGrad::zero(); n];
            let y_start = ci * rows_per_chunk;
            let y_end = (y_start + rows_per_chunk).min(height);
            let mut trans = Vec::new();
            let half = T::lit(0.5);
            let two = T::lit(2.0);
            for y in y_start..y_end {
                for x in 0..width {
                    let p = y * width + x;
                    let contribs = aux.pixel(p);
                    if contribs.is_empty() {
                        continue;
                    }
                    let gc = grad_color.pixel(p);
                    let go = grad_opacity.data[p];
                    trans.clear();
                    let mut t = T::one();
                    for c in contribs {
                        trans.push(t);
                        t *= T::one() - c.alpha;
                    }
                    // Color behind the current splat, and transmittance past it.
                    let mut behind = bundle.background;
                    let mut past = T::one();
                    let (px, py) = (T::from_usize_lossy(x) + half, T::from_usize_lossy(y) + half);
                    for (k, c) in contribs.iter().enumerate().rev() {
                        let s = &aux.splats[c.splat as usize];
                        let t_prev = trans[k];
                        let a = c.alpha;
                        let mut g_a = go * t_prev * past;
                        let g = &mut acc[c.splat as usize];
                        for ch in 0..3 {
                            g_a += gc[ch] * t_prev * (s.color[ch] - behind[ch]);
                            g.color[ch] += gc[ch] * a * t_prev;
                            behind[ch] = s.color[ch] * a + (T::one() - a) * behind[ch];
                        }
                        past *= T::one() - a;
                        // a = alpha * exp(-q/2)
                        let dx = px - s.mean2d[0];
                        let dy = py - s.mean2d[1];
                        let [ca, cb, cc] = s.conic;
                        let falloff = s.falloff(px, py).map_or(T::zero(), |f| f.0);
                        g.alpha += g_a * falloff;
                        let g_q = T::lit(-0.5) * falloff * s.alpha * g_a;
                        g.conic[0] += g_q * dx * dx;
                        g.conic[1] += g_q * two * dx * dy;
                        g.conic[2] += g_q * dy * dy;
                        g.mean[0] += g_q * -(two * ca * dx + two * cb * dy);
                        g.mean[1] += g_q * -(two * cb * dx + two * cc * dy);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![SplatGrad::zero(); n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }
    total
}

/// Exact gradients of the loss w.r.t. all Gaussian parameters, given the
/// cotangents of the color and opacity maps.
pub fn backward<T: Real>(
    bundle: &RenderBundle<T>,
    camera: &Camera<T>,
    set: &GaussianSet<T>,
    grad_color: &ImageBuffer<T>,
    grad_opacity: &ImageBuffer<T>,
) -> Result<GaussianBackward<T>> {
    let aux = bundle.aux.as_ref().ok_or(Error::MissingAux)?;
    bundle.color.same_shape(grad_color)?;
    bundle.opacity.same_shape(grad_opacity)?;
    let splat_grads = splat_backward(bundle, aux, grad_color, grad_opacity);

    let mut grads = set.zero_grads();
    let mut screen_grad = vec![[T::zero(); 2]; set.len()];
    let mut radii = vec![T::zero(); set.len()];
    let center = camera.center();
    let w = camera.rotation;
    let ncoef = sh::num_coeffs(set.sh_degree);
    let mut basis = vec![T::zero(); ncoef];
    let mut dbasis = vec![Vec3::zero(); ncoef];
    let two = T::lit(2.0);
    let half_w = T::from_usize_lossy(bundle.width()) * T::lit(0.5);
    let half_h = T::from_usize_lossy(bundle.height()) * T::lit(0.5);

    for (s, sg) in aux.splats.iter().zip(&splat_grads) {
        let i = s.source;
        let g = &set.gaussians[i];
        let out = &mut grads[i];
        radii[i] = s.radius;
        screen_grad[i] = [sg.mean[0] * half_w, sg.mean[1] * half_h];

        // Opacity.
        let alpha = g.alpha();
        out.logit_opacity += sg.alpha * alpha * (T::one() - alpha);

        // Color via SH along the view direction.
        let view = g.mu - center;
        let dir = view.normalized();
        sh::eval_into(dir, set.sh_degree, &mut basis, Some(&mut dbasis));
        let mut g_dir = Vec3::zero();
        for ch in 0..3 {
            let mut raw = T::zero();
            for k in 0..ncoef {
                raw += g.sh_color[k * 3 + ch] * basis[k];
            }
            if raw < T::zero() {
                continue;
            }
            let gc = sg.color[ch];
            for k in 0..ncoef {
                out.sh_color[k * 3 + ch] += gc * basis[k];
                g_dir += dbasis[k] * (gc * g.sh_color[k * 3 + ch]);
            }
        }
        let mut g_mu = sh::normalize_vjp(view, g_dir);

        // Conic -> 2D covariance: dK = -K dΣ K.
        let [ka, kb, kc] = s.conic;
        let gk = [[sg.conic[0], sg.conic[1] * T::lit(0.5)], [sg.conic[1] * T::lit(0.5), sg.conic[2]]];
        let k = [[ka, kb], [kb, kc]];
        let mut g_s2 = [[T::zero(); 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                let mut v = T::zero();
                for p in 0..2 {
                    for q in 0..2 {
                        v += k[r][p] * gk[p][q] * k[q][c];
                    }
                }
                g_s2[r][c] = -v;
            }
        }

        // Σ2 = T Σ3 T^T with T = J W (rows 0..2).
        let pc = camera.to_camera(g.mu);
        let jac = jacobian(camera, pc);
        let tm = jac.mul_mat(&w);
        let q = quat_normalize(g.rot_quat);
        let rot = quat_to_mat(q);
        let scale = g.scale();
        let m = rot.mul_mat(&Mat3::diag(scale));
        let cov3 = m.mul_mat(&m.transpose());
        // G_Σ3 = T^T G_Σ2 T.
        let mut g_cov3 = Mat3::zero();
        for a in 0..3 {
            for b in 0..3 {
                let mut v = T::zero();
                for r in 0..2 {
                    for c in 0..2 {
                        v += tm.m[r][a] * g_s2[r][c] * tm.m[c][b];
                    }
                }
                g_cov3.m[a][b] = v;
            }
        }
        // G_T = 2 G_Σ2 T Σ3, then G_J = G_T W^T.
        let mut g_t = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut v = T::zero();
                for p in 0..2 {
                    for q2 in 0..3 {
                        v += g_s2[r][p] * tm.m[p][q2] * cov3.m[q2][c];
                    }
                }
                g_t[r][c] = two * v;
            }
        }
        let mut g_j = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                g_j[r][c] = g_t[r][0] * w.m[c][0] + g_t[r][1] * w.m[c][1] + g_t[r][2] * w.m[c][2];
            }
        }
        let (fx, fy) = (camera.fx, camera.fy);
        let iz = T::one() / pc.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        // A clamped lateral offset is a fixed ratio times z: J02 = -fx*r/z
        // no longer depends on x, and its z-derivative halves.
        let (jp, clamped) = jacobian_point(camera, pc);
        let kx = if clamped[0] { T::one() } else { two };
        let ky = if clamped[1] { T::one() } else { two };
        let mut g_pc = Vec3::zero();
        if !clamped[0] {
            g_pc.x += g_j[0][2] * (-fx * iz2);
        }
        if !clamped[1] {
            g_pc.y += g_j[1][2] * (-fy * iz2);
        }
        g_pc.z += g_j[0][0] * (-fx * iz2)
            + g_j[0][2] * (kx * fx * jp.x * iz3)
            + g_j[1][1] * (-fy * iz2)
            + g_j[1][2] * (ky * fy * jp.y * iz3);
        // Mean projection.
        g_pc.x += sg.mean[0] * fx * iz;
        g_pc.y += sg.mean[1] * fy * iz;
        g_pc.z += -sg.mean[0] * fx * pc.x * iz2 - sg.mean[1] * fy * pc.y * iz2;
        g_mu += w.transpose().mul_vec(g_pc);
        out.mu += g_mu;

        // Σ3 = M M^T, M = R diag(s).
        let mut g_m = g_cov3.mul_mat(&m).scale(two);
        // Symmetrize in case of round-off asymmetry in g_cov3.
        let g_cov3_t = g_cov3.transpose().mul_mat(&m).scale(two);
        for a in 0..3 {
            for b in 0..3 {
                g_m.m[a][b] = (g_m.m[a][b] + g_cov3_t.m[a][b]) * T::lit(0.5);
            }
        }
        let mut g_rot = Mat3::zero();
        for kx in 0..3 {
            let mut gs = T::zero();
            for r in 0..3 {
                gs += g_m.m[r][kx] * rot.m[r][kx];
                g_rot.m[r][kx] = g_m.m[r][kx] * scale[kx];
            }
            out.log_scale[kx] += gs * scale[kx];
        }
        let g_qhat = quat_to_mat_vjp(q, &g_rot);
        let qn = quat_norm(g.rot_quat);
        let dot = q[0] * g_qhat[0] + q[1] * g_qhat[1] + q[2] * g_qhat[2] + q[3] * g_qhat[3];
        for c in 0..4 {
            out.rot_quat[c] += (g_qhat[c] - q[c] * dot) / qn;
        }
    }
    Ok(GaussianBackward { grads, screen_grad, radii })
}

/// Renders a Gaussian set over a constant background.
pub fn render<T: Real>(camera: &Camera<T>, set: &GaussianSet<T>, background: [T; 3], clip: Option<&DepthClip<'_, T>>) -> RenderBundle<T> {
    let splats = project(camera, set, clip);
    rasterize(splats, camera.width, camera.height, background)
}
