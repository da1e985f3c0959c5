//! Blending of the Gaussian and mesh renders, and removal of Gaussians that
//! ended up outside the layout shell.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::gaussian_raster::RenderBundle;
use crate::image_buf::ImageBuffer;
use crate::linalg::Vec3;
use crate::mesh::LayoutMesh;
use crate::mesh_raster::{cast_ray, MeshRender};
use crate::scalar::Real;

/// Default tolerance (m) for behind-mesh culling.
pub const CULL_EPS: f64 = 0.01;

fn check_shapes<T: Real>(g: &RenderBundle<T>, m: &MeshRender<T>) -> Result<()> {
    if g.width() != m.color.width || g.height() != m.color.height {
        return Err(Error::ResolutionMismatch(g.width(), g.height(), m.color.width, m.color.height));
    }
    Ok(())
}

/// `I = C_g + (1 - O) * B` where `B` is the mesh color on covered pixels and
/// `background` elsewhere. `g` must have been rendered over a black
/// background so that `C_g` holds only the Gaussian contribution.
pub fn composite<T: Real>(g: &RenderBundle<T>, m: &MeshRender<T>, background: [T; 3]) -> Result<ImageBuffer<T>> {
    check_shapes(g, m)?;
    let mut out = g.color.clone();
    for p in 0..out.num_pixels() {
        let t = T::one() - g.opacity.data[p];
        let under: [T; 3] = if m.is_covered(p) {
            [0, 1, 2].map(|c| m.color.data[p * 3 + c])
        } else {
            background
        };
        for (o, b) in out.pixel_mut(p).iter_mut().zip(under) {
            *o += t * b;
        }
    }
    Ok(out)
}

/// Cotangents of the composite's inputs.
#[derive(Clone, Debug)]
pub struct CompositeGrads<T> {
    pub gauss_color: ImageBuffer<T>,
    pub opacity: ImageBuffer<T>,
    pub mesh_color: ImageBuffer<T>,
}

pub fn composite_backward<T: Real>(
    g: &RenderBundle<T>,
    m: &MeshRender<T>,
    background: [T; 3],
    grad: &ImageBuffer<T>,
) -> Result<CompositeGrads<T>> {
    check_shapes(g, m)?;
    g.color.same_shape(grad)?;
    let (w, h) = (g.width(), g.height());
    let mut opacity = ImageBuffer::new(w, h, 1);
    let mut mesh_color = ImageBuffer::new(w, h, 3);
    for p in 0..w * h {
        let gp = grad.pixel(p);
        let t = T::one() - g.opacity.data[p];
        let covered = m.is_covered(p);
        let mut go = T::zero();
        for c in 0..3 {
            let b = if covered { m.color.data[p * 3 + c] } else { background[c] };
            go -= gp[c] * b;
            if covered {
                mesh_color.data[p * 3 + c] = gp[c] * t;
            }
        }
        opacity.data[p] = go;
    }
    Ok(CompositeGrads { gauss_color: grad.clone(), opacity, mesh_color })
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle<T: Real>(p: Vec3<T>, a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Vec3<T> {
    let z = T::zero();
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= z && d2 <= z {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= z && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= z && d1 >= z && d3 <= z {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= z && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= z && d2 >= z && d6 <= z {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= z && (d4 - d3) >= z && (d5 - d6) >= z {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = T::one() / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Unsigned distance from `p` to the mesh surface.
pub fn distance_to_mesh<T: Real>(mesh: &LayoutMesh<T>, p: Vec3<T>) -> T {
    mesh.faces
        .iter()
        .map(|f| {
            let q = closest_point_on_triangle(p, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            (q - p).norm()
        })
        .fold(T::infinity(), T::min)
}

/// Generalized winding number of a closed mesh around `p` (magnitude ~1
/// inside, ~0 outside; the sign follows the face orientation), from the signed solid angles of the triangles.
pub fn winding_number<T: Real>(mesh: &LayoutMesh<T>, p: Vec3<T>) -> T {
    let mut total = T::zero();
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]] - p;
        let b = mesh.vertices[f[1]] - p;
        let c = mesh.vertices[f[2]] - p;
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(b.cross(c));
        let den = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
        total += T::lit(2.0) * num.atan2(den);
    }
    total / (T::lit(4.0) * T::PI())
}

/// True if `p` is outside the closed shell by more than `eps`.
pub fn outside_shell<T: Real>(mesh: &LayoutMesh<T>, p: Vec3<T>, eps: T) -> bool {
    winding_number(mesh, p).abs() < T::lit(0.5) && distance_to_mesh(mesh, p) > eps
}

/// True if, in every camera that sees `p`, `p` lies more than `eps` behind
/// the mesh surface along its pixel ray.
fn behind_in_all_views<T: Real>(mesh: &LayoutMesh<T>, p: Vec3<T>, eps: T, cameras: &[Camera<T>]) -> bool {
    let mut seen = false;
    for cam in cameras {
        let (u, v, z) = cam.project(p);
        let (w, h) = (T::from_usize_lossy(cam.width), T::from_usize_lossy(cam.height));
        if z <= T::zero() || u < T::zero() || v < T::zero() || u >= w || v >= h {
            continue;
        }
        seen = true;
        let o = cam.center();
        let d = (p - o).normalized();
        match cast_ray(mesh, o, d) {
            Some(hit) if (p - o).norm() > hit.t + eps => {}
            _ => return false,
        }
    }
    seen
}

/// Removes Gaussians whose center lies outside the layout shell by more
/// than `eps`; returns how many were removed. A non-watertight mesh falls
/// back to a depth test against every camera in `cameras`.
pub fn cull_behind_mesh<T: Real>(set: &mut GaussianSet<T>, mesh: &LayoutMesh<T>, eps: T, cameras: &[Camera<T>]) -> usize {
    if set.is_empty() || mesh.faces.is_empty() {
        return 0;
    }
    let watertight = mesh.is_watertight();
    let keep: Vec<bool> = set
        .gaussians
        .par_iter()
        .map(|g| {
            if watertight {
                !outside_shell(mesh, g.mu, eps)
            } else {
                !behind_in_all_views(mesh, g.mu, eps, cameras)
            }
        })
        .collect();
    if keep.iter().all(|&k| k) {
        return 0;
    }
    set.retain_mask(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian3D;

    fn room() -> LayoutMesh<f64> {
        LayoutMesh::box_room(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 2.5), 96, 16)
    }

    #[test]
    fn winding_number_inside_and_outside() {
        let m = room();
        assert!((winding_number(&m, Vec3::new(0.0, 0.0, 1.0)).abs() - 1.0).abs() < 1e-9);
        assert!(winding_number(&m, Vec3::new(5.0, 0.0, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn culls_only_far_outside() {
        let m = room();
        let mut set = GaussianSet::new(0);
        for p in [Vec3::new(0.0, 0.0, 1.0), Vec3::new(3.0, 0.0, 1.0), Vec3::new(2.005, 0.0, 1.0), Vec3::new(1.99, 0.0, 1.0)] {
            set.push(Gaussian3D::isotropic(p, 0.1, [0.5; 3], 0.5, 0));
        }
        assert_eq!(cull_behind_mesh(&mut set, &m, CULL_EPS, &[]), 1);
        assert_eq!(set.len(), 3);
        assert!(set.gaussians.iter().all(|g| g.mu.x < 2.5));
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let q = closest_point_on_triangle(Vec3::new(0.2, 0.2, 1.0), a, b, c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-12);
        assert_eq!(closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c), a);
        assert_eq!(closest_point_on_triangle(Vec3::new(0.5, -1.0, 0.0), a, b, c), Vec3::new(0.5, 0.0, 0.0));
        let q = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
    }
}
