//! Real spherical harmonics up to degree 3.
//!
//! Constants and sign conventions follow the ones used by Gaussian splatting
//! renderers, so coefficients are interchangeable with those tools.

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;

/// Number of basis functions for `degree`.
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates the basis at a unit direction.
pub fn sh_basis<T: Real>(dir: Vec3<T>, degree: usize) -> Result<Vec<T>> {
    if degree > MAX_DEGREE {
        return Err(Error::UnsupportedDegree(degree));
    }
    let n = dir.norm().as_f64();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitDirection(n));
    }
    let mut out = vec![T::zero(); num_coeffs(degree)];
    eval_into(dir, degree, &mut out, None);
    Ok(out)
}

/// Unchecked evaluation for hot loops. `out` must hold `num_coeffs(degree)`
/// entries. When `grad` is given it receives d Y_k / d(x, y, z), treating the
/// basis as a polynomial in the direction components.
pub fn eval_into<T: Real>(dir: Vec3<T>, degree: usize, out: &mut [T], grad: Option<&mut [Vec3<T>]>) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let c = T::lit;
    out[0] = c(SH_C0);
    let mut gbuf = grad;
    if let Some(g) = gbuf.as_deref_mut() {
        g[0] = Vec3::zero();
    }
    if degree == 0 {
        return;
    }
    let c1 = c(SH_C1);
    out[1] = -c1 * y;
    out[2] = c1 * z;
    out[3] = -c1 * x;
    if let Some(g) = gbuf.as_deref_mut() {
        let zero = T::zero();
        g[1] = Vec3::new(zero, -c1, zero);
        g[2] = Vec3::new(zero, zero, c1);
        g[3] = Vec3::new(-c1, zero, zero);
    }
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let two = c(2.0);
    let k = SH_C2.map(c);
    out[4] = k[0] * xy;
    out[5] = k[1] * yz;
    out[6] = k[2] * (two * zz - xx - yy);
    out[7] = k[3] * xz;
    out[8] = k[4] * (xx - yy);
    if let Some(g) = gbuf.as_deref_mut() {
        let zero = T::zero();
        g[4] = Vec3::new(k[0] * y, k[0] * x, zero);
        g[5] = Vec3::new(zero, k[1] * z, k[1] * y);
        g[6] = Vec3::new(-two * k[2] * x, -two * k[2] * y, c(4.0) * k[2] * z);
        g[7] = Vec3::new(k[3] * z, zero, k[3] * x);
        g[8] = Vec3::new(two * k[4] * x, -two * k[4] * y, zero);
    }
    if degree == 2 {
        return;
    }
    let k = SH_C3.map(c);
    let three = c(3.0);
    let four = c(4.0);
    out[9] = k[0] * y * (three * xx - yy);
    out[10] = k[1] * xy * z;
    out[11] = k[2] * y * (four * zz - xx - yy);
    out[12] = k[3] * z * (two * zz - three * xx - three * yy);
    out[13] = k[4] * x * (four * zz - xx - yy);
    out[14] = k[5] * z * (xx - yy);
    out[15] = k[6] * x * (xx - three * yy);
    if let Some(g) = gbuf.as_deref_mut() {
        let six = c(6.0);
        let eight = c(8.0);
        g[9] = Vec3::new(k[0] * six * xy, k[0] * (three * xx - three * yy), T::zero());
        g[10] = Vec3::new(k[1] * yz, k[1] * xz, k[1] * xy);
        g[11] = Vec3::new(
            -two * k[2] * xy,
            k[2] * (four * zz - xx - three * yy),
            eight * k[2] * yz,
        );
        g[12] = Vec3::new(
            -six * k[3] * xz,
            -six * k[3] * yz,
            k[3] * (six * zz - three * xx - three * yy),
        );
        g[13] = Vec3::new(
            k[4] * (four * zz - three * xx - yy),
            -two * k[4] * xy,
            eight * k[4] * xz,
        );
        g[14] = Vec3::new(two * k[5] * xz, -two * k[5] * yz, k[5] * (xx - yy));
        g[15] = Vec3::new(k[6] * (three * xx - three * yy), -six * k[6] * xy, T::zero());
    }
}

/// Backpropagates a gradient on a (possibly unnormalized) vector `v` through
/// `dir = v / |v|`.
pub fn normalize_vjp<T: Real>(v: Vec3<T>, g_dir: Vec3<T>) -> Vec3<T> {
    let n = v.norm();
    let d = v * (T::one() / n);
    (g_dir - d * d.dot(g_dir)) * (T::one() / n)
}
