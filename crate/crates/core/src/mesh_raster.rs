//! Differentiable rendering of the SH-textured layout mesh.
//!
//! Each pixel casts its camera ray against the triangles and keeps the
//! nearest hit (equivalent to a z-buffer). The hit's atlas UV selects four
//! texels; their SH coefficients are bilinearly blended and evaluated along
//! the ray direction.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::linalg::{Mat3, Vec3};
use crate::mesh::LayoutMesh;
use crate::scalar::Real;
use crate::sh::{self, SH_C0};

const ROW_CHUNKS: usize = 8;

/// Nearest ray/triangle hit of one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshHit<T> {
    pub face: u32,
    /// Barycentric weights of vertices 1 and 2 (vertex 0 gets `1 - b1 - b2`).
    pub b1: T,
    pub b2: T,
    /// Ray parameter (distance along the unit ray).
    pub t: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshRender<T> {
    pub color: ImageBuffer<T>,
    /// Camera-space depth; +inf where uncovered.
    pub depth: ImageBuffer<T>,
    /// 1 where a face is hit, else 0.
    pub coverage: ImageBuffer<T>,
    pub aux: Option<Vec<Option<MeshHit<T>>>>,
}

impl<T: Real> MeshRender<T> {
    pub fn is_covered(&self, p: usize) -> bool {
        self.coverage.data[p] > T::zero()
    }

    pub fn without_aux(mut self) -> Self {
        self.aux = None;
        self
    }
}

/// Moeller-Trumbore intersection; returns `(t, b1, b2)` for hits in front of
/// the origin.
#[inline]
pub fn ray_triangle<T: Real>(o: Vec3<T>, d: Vec3<T>, v0: Vec3<T>, v1: Vec3<T>, v2: Vec3<T>) -> Option<(T, T, T)> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = d.cross(e2);
    let det = e1.dot(p);
    if det.abs() < T::lit(1e-14) {
        return None;
    }
    let inv = T::one() / det;
    let s = o - v0;
    let b1 = s.dot(p) * inv;
    if b1 < T::zero() || b1 > T::one() {
        return None;
    }
    let q = s.cross(e1);
    let b2 = d.dot(q) * inv;
    if b2 < T::zero() || b1 + b2 > T::one() {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t > T::lit(1e-9)).then_some((t, b1, b2))
}

/// Nearest hit along a ray, or `None`.
pub fn cast_ray<T: Real>(mesh: &LayoutMesh<T>, o: Vec3<T>, d: Vec3<T>) -> Option<MeshHit<T>> {
    let mut best: Option<MeshHit<T>> = None;
    for (fi, f) in mesh.faces.iter().enumerate() {
        let (v0, v1, v2) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        if let Some((t, b1, b2)) = ray_triangle(o, d, v0, v1, v2) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(MeshHit { face: fi as u32, b1, b2, t });
            }
        }
    }
    best
}

/// Bilinear footprint of an atlas UV within one strip: four texel indices,
/// their weights, and the fractional offsets.
#[derive(Clone, Copy, Debug)]
pub struct Footprint<T> {
    pub x: [usize; 2],
    pub y: [usize; 2],
    pub tx: T,
    pub ty: T,
}

impl<T: Real> Footprint<T> {
    pub fn new(mesh: &LayoutMesh<T>, strip: usize, u: T, v: T) -> Self {
        let (sx0, sx1) = mesh.strip_texels(strip);
        let h = mesh.texture.height;
        let half = T::lit(0.5);
        let fx = u * T::from_usize_lossy(mesh.texture.width) - half;
        let fy = v * T::from_usize_lossy(h) - half;
        let x0f = fx.floor();
        let y0f = fy.floor();
        let clampx = |i: i64| i.clamp(sx0 as i64, sx1 as i64 - 1) as usize;
        let clampy = |i: i64| i.clamp(0, h as i64 - 1) as usize;
        let xi = x0f.to_i64().unwrap_or(0);
        let yi = y0f.to_i64().unwrap_or(0);
        Self { x: [clampx(xi), clampx(xi + 1)], y: [clampy(yi), clampy(yi + 1)], tx: fx - x0f, ty: fy - y0f }
    }

    /// `(texel x, texel y, weight)` for the four taps.
    #[inline]
    pub fn taps(&self) -> [(usize, usize, T); 4] {
        let one = T::one();
        [
            (self.x[0], self.y[0], (one - self.tx) * (one - self.ty)),
            (self.x[1], self.y[0], self.tx * (one - self.ty)),
            (self.x[0], self.y[1], (one - self.tx) * self.ty),
            (self.x[1], self.y[1], self.tx * self.ty),
        ]
    }
}

/// Atlas UV at a hit.
#[inline]
pub fn hit_uv<T: Real>(mesh: &LayoutMesh<T>, hit: &MeshHit<T>) -> (T, T) {
    let uv = &mesh.face_uvs[hit.face as usize];
    let b0 = T::one() - hit.b1 - hit.b2;
    (
        b0 * uv[0][0] + hit.b1 * uv[1][0] + hit.b2 * uv[2][0],
        b0 * uv[0][1] + hit.b1 * uv[1][1] + hit.b2 * uv[2][1],
    )
}

/// Interpolated SH coefficients (`num_coeffs * 3`) at a footprint.
fn blend_coeffs<T: Real>(mesh: &LayoutMesh<T>, fp: &Footprint<T>, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for (x, y, w) in fp.taps() {
        for (o, t) in out.iter_mut().zip(mesh.texture.texel(x, y)) {
            *o += w * *t;
        }
    }
}

fn shade<T: Real>(coeffs: &[T], basis: &[T]) -> [T; 3] {
    let mut c = [T::zero(); 3];
    for (k, y) in basis.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += coeffs[k * 3 + ch] * *y;
        }
    }
    c
}

/// Renders color, depth and coverage of the layout mesh.
pub fn rasterize_mesh<T: Real>(camera: &Camera<T>, mesh: &LayoutMesh<T>) -> MeshRender<T> {
    let (w, h) = (camera.width, camera.height);
    let origin = camera.center();
    let fwd = camera.forward();
    let ncoef = sh::num_coeffs(mesh.texture.degree);
    let rows_per_chunk = h.div_ceil(ROW_CHUNKS).max(1);
    let chunks: Vec<Vec<(Option<MeshHit<T>>, [T; 3], T)>> = (0..h.div_ceil(rows_per_chunk))
        .into_par_iter()
        .map(|ci| {
            let mut basis = vec![T::zero(); ncoef];
            let mut coeffs = vec![T::zero(); ncoef * 3];
            let mut out = Vec::with_capacity(rows_per_chunk * w);
            for y in ci * rows_per_chunk..((ci + 1) * rows_per_chunk).min(h) {
                for x in 0..w {
                    let d = camera.pixel_ray(x, y);
                    match cast_ray(mesh, origin, d) {
                        Some(hit) => {
                            let (u, v) = hit_uv(mesh, &hit);
                            let strip = mesh.groups[mesh.face_group[hit.face as usize]].strip;
                            let fp = Footprint::new(mesh, strip, u, v);
                            blend_coeffs(mesh, &fp, &mut coeffs);
                            sh::eval_into(d, mesh.texture.degree, &mut basis, None);
                            let c = shade(&coeffs, &basis).map(|c| c.max(T::zero()));
                            out.push((Some(hit), c, hit.t * d.dot(fwd)));
                        }
                        None => out.push((None, [T::zero(); 3], T::infinity())),
                    }
                }
            }
            out
        })
        .collect();
    let mut color = ImageBuffer::new(w, h, 3);
    let mut depth = ImageBuffer::new(w, h, 1);
    let mut coverage = ImageBuffer::new(w, h, 1);
    let mut aux = Vec::with_capacity(w * h);
    for (p, (hit, c, z)) in chunks.into_iter().flatten().enumerate() {
        color.pixel_mut(p).copy_from_slice(&c);
        depth.data[p] = z;
        coverage.data[p] = if hit.is_some() { T::one() } else { T::zero() };
        aux.push(hit);
    }
    MeshRender { color, depth, coverage, aux: Some(aux) }
}

/// Gradients of the loss w.r.t. the mesh parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshGrads<T> {
    /// Same layout as `ShTexture::data`.
    pub texture: Vec<T>,
    pub vertices: Vec<Vec3<T>>,
}

impl<T: Real> MeshGrads<T> {
    pub fn zeros(mesh: &LayoutMesh<T>) -> Self {
        Self { texture: vec![T::zero(); mesh.texture.data.len()], vertices: vec![Vec3::zero(); mesh.vertices.len()] }
    }

    pub fn add(&mut self, o: &Self) {
        for (a, b) in self.texture.iter_mut().zip(&o.texture) {
            *a += *b;
        }
        for (a, b) in self.vertices.iter_mut().zip(&o.vertices) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.texture.iter_mut().for_each(|v| *v *= s);
        self.vertices.iter_mut().for_each(|v| *v = *v * s);
    }
}

/// Backpropagates a color cotangent into texel coefficients (exact) and
/// vertex positions (interior barycentric terms; silhouettes are ignored).
pub fn mesh_backward<T: Real>(
    render: &MeshRender<T>,
    camera: &Camera<T>,
    mesh: &LayoutMesh<T>,
    grad_color: &ImageBuffer<T>,
) -> Result<MeshGrads<T>> {
    let mut grads = MeshGrads::zeros(mesh);
    mesh_backward_into(render, camera, mesh, grad_color, &mut grads)?;
    Ok(grads)
}

/// Like [`mesh_backward`] but accumulates into existing buffers.
pub fn mesh_backward_into<T: Real>(
    render: &MeshRender<T>,
    camera: &Camera<T>,
    mesh: &LayoutMesh<T>,
    grad_color: &ImageBuffer<T>,
    grads: &mut MeshGrads<T>,
) -> Result<()> {
    let aux = render.aux.as_ref().ok_or(Error::MissingAux)?;
    render.color.same_shape(grad_color)?;
    let w = camera.width;
    let degree = mesh.texture.degree;
    let ncoef = sh::num_coeffs(degree);
    let tl = mesh.texture.texel_len();
    let mut basis = vec![T::zero(); ncoef];
    let mut coeffs = vec![T::zero(); tl];
    let (tw, th) = (T::from_usize_lossy(mesh.texture.width), T::from_usize_lossy(mesh.texture.height));
    let one = T::one();
    for (p, hit) in aux.iter().enumerate() {
        let Some(hit) = hit else { continue };
        let gc = grad_color.pixel(p);
        if gc.iter().all(|&g| g == T::zero()) {
            continue;
        }
        let (x, y) = (p % w, p / w);
        let d = camera.pixel_ray(x, y);
        let face = hit.face as usize;
        let (u, v) = hit_uv(mesh, hit);
        let strip = mesh.groups[mesh.face_group[face]].strip;
        let fp = Footprint::new(mesh, strip, u, v);
        blend_coeffs(mesh, &fp, &mut coeffs);
        sh::eval_into(d, degree, &mut basis, None);
        let raw = shade(&coeffs, &basis);
        // Channels clamped at zero pass no gradient.
        let g = [0, 1, 2].map(|ch| if raw[ch] < T::zero() { T::zero() } else { gc[ch] });

        for (tx, ty, wt) in fp.taps() {
            let off = mesh.texture.texel_offset(tx, ty);
            for k in 0..ncoef {
                for ch in 0..3 {
                    grads.texture[off + k * 3 + ch] += wt * basis[k] * g[ch];
                }
            }
        }

        // d color / d (texel x, texel y) through the bilinear weights.
        let shade_texel = |tx: usize, ty: usize| -> T {
            let t = mesh.texture.texel(tx, ty);
            let mut s = T::zero();
            for k in 0..ncoef {
                for ch in 0..3 {
                    s += t[k * 3 + ch] * basis[k] * g[ch];
                }
            }
            s
        };
        let s00 = shade_texel(fp.x[0], fp.y[0]);
        let s10 = shade_texel(fp.x[1], fp.y[0]);
        let s01 = shade_texel(fp.x[0], fp.y[1]);
        let s11 = shade_texel(fp.x[1], fp.y[1]);
        let g_fx = (one - fp.ty) * (s10 - s00) + fp.ty * (s11 - s01);
        let g_fy = (one - fp.tx) * (s01 - s00) + fp.tx * (s11 - s10);
        let g_u = g_fx * tw;
        let g_v = g_fy * th;
        let uv = &mesh.face_uvs[face];
        let g_b = [0, 1, 2].map(|k| g_u * uv[k][0] + g_v * uv[k][1]);
        if g_b.iter().all(|&v| v == T::zero()) {
            continue;
        }
        // Hit point X = V0 + b1 e1 + b2 e2 = o + t d. For a perturbation of
        // vertex j: [e1 e2 -d] [db1 db2 dt]^T = -b_j dV_j.
        let f = mesh.faces[face];
        let (v0, v1, v2) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        let m = Mat3::from_cols(v1 - v0, v2 - v0, -d);
        let Some(minv) = m.inverse() else { continue };
        let rhs = Vec3::new(g_b[1] - g_b[0], g_b[2] - g_b[0], T::zero());
        let s = minv.transpose().mul_vec(rhs);
        let b0 = one - hit.b1 - hit.b2;
        for (j, bj) in [b0, hit.b1, hit.b2].into_iter().enumerate() {
            grads.vertices[f[j]] += s * (-bj);
        }
    }
    Ok(())
}

/// Replaces the selected group's texels with a view-independent color
/// resampled from `image`: DC coefficients set, higher orders zeroed.
pub fn bake_texture<T: Real>(mesh: &LayoutMesh<T>, group: &str, image: &ImageBuffer<T>) -> Result<LayoutMesh<T>> {
    let gi = mesh.group_index(group)?;
    if image.channels != 3 || image.width == 0 || image.height == 0 {
        return Err(Error::Config("bake source must be a non-empty RGB image".into()));
    }
    let mut out = mesh.clone();
    let strip = mesh.groups[gi].strip;
    let (x0, x1) = mesh.strip_texels(strip);
    let sw = (x1 - x0) as f64;
    let th = mesh.texture.height as f64;
    let c0 = T::lit(SH_C0);
    for ty in 0..mesh.texture.height {
        for tx in x0..x1 {
            let s = (tx - x0) as f64 + 0.5;
            let t = ty as f64 + 0.5;
            let sx = s / sw * image.width as f64;
            let sy = t / th * image.height as f64;
            let texel = out.texture.texel_mut(tx, ty);
            texel.iter_mut().for_each(|v| *v = T::zero());
            for ch in 0..3 {
                texel[ch] = image.sample_bilinear(sx, sy, ch) / c0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> LayoutMesh<f64> {
        LayoutMesh::box_room(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 2.5), 96, 16)
    }

    fn inside_camera(w: usize) -> Camera<f64> {
        Camera::look_at(Vec3::new(0.3, -0.2, 1.2), Vec3::new(2.0, 1.0, 1.0), Vec3::new(0.0, 0.0, 1.0), 80.0, w, w)
    }

    #[test]
    fn closed_room_fully_covered() {
        let r = rasterize_mesh(&inside_camera(24), &room());
        assert!(r.coverage.data.iter().all(|&c| c == 1.0));
        assert!(r.depth.data.iter().all(|d| d.is_finite() && *d > 0.0));
    }

    #[test]
    fn dc_texture_is_view_independent() {
        let mut m = room();
        let k = 2.0;
        for t in m.texture.data.chunks_mut(48) {
            t[0] = k;
            t[1] = k;
            t[2] = k;
        }
        for cam in [
            inside_camera(16),
            Camera::look_at(Vec3::new(-1.0, 1.0, 2.0), Vec3::new(1.0, -1.0, 0.0), Vec3::new(0.0, 0.0, 1.0), 70.0, 16, 16),
        ] {
            let r = rasterize_mesh(&cam, &m);
            for v in &r.color.data {
                assert!((v - SH_C0 * k).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_mesh_renders_uncovered() {
        let m = LayoutMesh::<f64>::empty(8, 8);
        let r = rasterize_mesh(&inside_camera(8), &m);
        assert!(r.coverage.data.iter().all(|&c| c == 0.0));
        assert!(r.depth.data.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let m = room();
        let cam = inside_camera(8);
        let r = rasterize_mesh(&cam, &m);
        let g = mesh_backward(&r, &cam, &m, &ImageBuffer::new(8, 8, 3)).unwrap();
        assert!(g.texture.iter().all(|&v| v == 0.0));
        assert!(g.vertices.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn missing_aux_is_an_error() {
        let m = room();
        let cam = inside_camera(4);
        let r = rasterize_mesh(&cam, &m).without_aux();
        assert!(matches!(mesh_backward(&r, &cam, &m, &ImageBuffer::new(4, 4, 3)), Err(Error::MissingAux)));
    }

    #[test]
    fn bake_unknown_group_fails() {
        let img = ImageBuffer::filled(4, 4, 3, 1.0);
        assert!(matches!(bake_texture(&room(), "window", &img), Err(Error::UnknownFaceGroup { .. })));
    }

    #[test]
    fn bake_isolates_other_groups() {
        let mut m = room();
        for (i, v) in m.texture.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 * 0.1;
        }
        let img = ImageBuffer::filled(4, 4, 3, 1.0);
        let baked = bake_texture(&m, "floor", &img).unwrap();
        let fl = m.groups[m.group_index("floor").unwrap()].strip;
        let (x0, x1) = m.strip_texels(fl);
        for y in 0..m.texture.height {
            for x in 0..m.texture.width {
                if x < x0 || x >= x1 {
                    assert_eq!(m.texture.texel(x, y), baked.texture.texel(x, y));
                }
            }
        }
    }
}
