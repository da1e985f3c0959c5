//! 3D Gaussian primitives and the growable set the trainer owns.

use crate::linalg::{quat_normalize, quat_to_mat, Mat3, Vec3};
use crate::scalar::{logit, sigmoid, Real};
use crate::sh::{self, SH_C0};

/// One anisotropic 3D Gaussian. Scales and opacity are stored in log /
/// logit space so their constraints hold by construction.
///
/// `sh_color` is coefficient-major: entry `k * 3 + c` is coefficient `k` of
/// channel `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D<T> {
    pub mu: Vec3<T>,
    pub log_scale: Vec3<T>,
    /// `(w, x, y, z)`.
    pub rot_quat: [T; 4],
    pub sh_color: Vec<T>,
    pub logit_opacity: T,
}

impl<T: Real> Gaussian3D<T> {
    /// All-zero parameter block, used for gradients and optimizer moments.
    pub fn zeros(sh_degree: usize) -> Self {
        Self {
            mu: Vec3::zero(),
            log_scale: Vec3::zero(),
            rot_quat: [T::zero(); 4],
            sh_color: vec![T::zero(); 3 * sh::num_coeffs(sh_degree)],
            logit_opacity: T::zero(),
        }
    }

    /// Isotropic Gaussian with a view-independent color.
    pub fn isotropic(mu: Vec3<T>, scale: T, rgb: [T; 3], alpha: T, sh_degree: usize) -> Self {
        let mut g = Self::zeros(sh_degree);
        g.mu = mu;
        g.log_scale = Vec3::new(scale.ln(), scale.ln(), scale.ln());
        g.rot_quat = [T::one(), T::zero(), T::zero(), T::zero()];
        g.set_dc_rgb(rgb);
        g.logit_opacity = logit(alpha);
        g
    }

    pub fn set_dc_rgb(&mut self, rgb: [T; 3]) {
        let c0 = T::lit(SH_C0);
        for (c, v) in rgb.iter().enumerate() {
            self.sh_color[c] = *v / c0;
        }
    }

    #[inline]
    pub fn alpha(&self) -> T {
        sigmoid(self.logit_opacity)
    }

    #[inline]
    pub fn scale(&self) -> Vec3<T> {
        self.log_scale.map(|v| v.exp())
    }

    pub fn rotation(&self) -> Mat3<T> {
        quat_to_mat(quat_normalize(self.rot_quat))
    }

    /// `R S S^T R^T`.
    pub fn covariance(&self) -> Mat3<T> {
        let m = self.rotation().mul_mat(&Mat3::diag(self.scale()));
        m.mul_mat(&m.transpose())
    }

    pub fn num_params(&self) -> usize {
        3 + 3 + 4 + self.sh_color.len() + 1
    }

    /// Visits each scalar parameter together with the matching scalar of
    /// `other` (same layout).
    pub fn zip_params_mut<'a>(&'a mut self, other: &'a Self) -> impl Iterator<Item = (&'a mut T, &'a T)> {
        let Gaussian3D { mu, log_scale, rot_quat, sh_color, logit_opacity } = self;
        let a = [&mut mu.x, &mut mu.y, &mut mu.z, &mut log_scale.x, &mut log_scale.y, &mut log_scale.z];
        let b = [&other.mu.x, &other.mu.y, &other.mu.z, &other.log_scale.x, &other.log_scale.y, &other.log_scale.z];
        a.into_iter()
            .zip(b)
            .chain(rot_quat.iter_mut().zip(other.rot_quat.iter()))
            .chain(sh_color.iter_mut().zip(other.sh_color.iter()))
            .chain(std::iter::once((logit_opacity, &other.logit_opacity)))
    }

    pub fn params(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.mu.to_array());
        v.extend_from_slice(&self.log_scale.to_array());
        v.extend_from_slice(&self.rot_quat);
        v.extend_from_slice(&self.sh_color);
        v.push(self.logit_opacity);
        v
    }

    pub fn set_params(&mut self, p: &[T]) {
        self.mu = Vec3::new(p[0], p[1], p[2]);
        self.log_scale = Vec3::new(p[3], p[4], p[5]);
        self.rot_quat.copy_from_slice(&p[6..10]);
        let n = self.sh_color.len();
        self.sh_color.copy_from_slice(&p[10..10 + n]);
        self.logit_opacity = p[10 + n];
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) {
        let o = other.clone();
        for (a, b) in self.zip_params_mut(&o) {
            *a += *b * s;
        }
    }

    pub fn cast<U: Real>(&self) -> Gaussian3D<U> {
        let c = |v: T| U::lit(v.as_f64());
        Gaussian3D {
            mu: self.mu.cast(),
            log_scale: self.log_scale.cast(),
            rot_quat: self.rot_quat.map(c),
            sh_color: self.sh_color.iter().map(|&v| c(v)).collect(),
            logit_opacity: c(self.logit_opacity),
        }
    }
}

/// Gradient with respect to every Gaussian parameter; same layout as the set.
pub type GaussianGrads<T> = Vec<Gaussian3D<T>>;

/// Adam moments for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Gaussian3D<T>,
    pub v: Gaussian3D<T>,
}

/// The trainable Gaussian population plus per-Gaussian optimizer state and
/// densification statistics. All per-Gaussian arrays share one length.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T> {
    pub sh_degree: usize,
    pub gaussians: Vec<Gaussian3D<T>>,
    pub moments: Vec<AdamMoments<T>>,
    /// Accumulated screen-space positional gradient norms (NDC units).
    pub grad_accum: Vec<T>,
    /// Number of views contributing to `grad_accum`.
    pub grad_count: Vec<u32>,
    /// Largest screen-space radius (pixels) seen since the last densification.
    pub max_radii: Vec<T>,
}

impl<T: Real> GaussianSet<T> {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            gaussians: Vec::new(),
            moments: Vec::new(),
            grad_accum: Vec::new(),
            grad_count: Vec::new(),
            max_radii: Vec::new(),
        }
    }

    pub fn from_gaussians(sh_degree: usize, gs: impl IntoIterator<Item = Gaussian3D<T>>) -> Self {
        let mut s = Self::new(sh_degree);
        for g in gs {
            s.push(g);
        }
        s
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Appends a Gaussian with fresh optimizer state.
    pub fn push(&mut self, g: Gaussian3D<T>) {
        debug_assert_eq!(g.sh_color.len(), 3 * sh::num_coeffs(self.sh_degree));
        self.gaussians.push(g);
        let z = Gaussian3D::zeros(self.sh_degree);
        self.moments.push(AdamMoments { m: z.clone(), v: z });
        self.grad_accum.push(T::zero());
        self.grad_count.push(0);
        self.max_radii.push(T::zero());
    }

    /// Keeps the Gaussians whose flag is `true`; returns how many were removed.
    pub fn retain_mask(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.len());
        let before = self.len();
        fn filter<V>(v: &mut Vec<V>, keep: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        }
        filter(&mut self.gaussians, keep);
        filter(&mut self.moments, keep);
        filter(&mut self.grad_accum, keep);
        filter(&mut self.grad_count, keep);
        filter(&mut self.max_radii, keep);
        before - self.len()
    }

    pub fn reset_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = T::zero());
        self.grad_count.iter_mut().for_each(|v| *v = 0);
        self.max_radii.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn zero_grads(&self) -> GaussianGrads<T> {
        vec![Gaussian3D::zeros(self.sh_degree); self.len()]
    }

    pub fn max_alpha(&self) -> T {
        self.gaussians.iter().map(|g| g.alpha()).fold(T::zero(), T::max)
    }

    /// Verifies the shared-length invariant of the per-Gaussian arrays.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        self.moments.len() == n && self.grad_accum.len() == n && self.grad_count.len() == n && self.max_radii.len() == n
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        GaussianSet {
            sh_degree: self.sh_degree,
            gaussians: self.gaussians.iter().map(|g| g.cast()).collect(),
            moments: self.moments.iter().map(|m| AdamMoments { m: m.m.cast(), v: m.v.cast() }).collect(),
            grad_accum: self.grad_accum.iter().map(|&v| U::lit(v.as_f64())).collect(),
            grad_count: self.grad_count.clone(),
            max_radii: self.max_radii.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn covariance_is_positive_definite(
            q in prop::array::uniform4(-1.0f64..1.0),
            ls in prop::array::uniform3(-4.0f64..1.0),
        ) {
            prop_assume!(crate::linalg::quat_norm(q) > 1e-3);
            let mut g = Gaussian3D::<f64>::zeros(0);
            g.rot_quat = q;
            g.log_scale = Vec3::from_array(ls);
            let cov = g.covariance();
            // Symmetric.
            for i in 0..3 { for j in 0..3 {
                prop_assert!((cov.m[i][j] - cov.m[j][i]).abs() < 1e-12);
            }}
            // Leading principal minors positive (Sylvester).
            let m1 = cov.m[0][0];
            let m2 = cov.m[0][0] * cov.m[1][1] - cov.m[0][1] * cov.m[1][0];
            let m3 = cov.det();
            prop_assert!(m1 > 0.0 && m2 > 0.0 && m3 > 0.0);
        }
    }

    #[test]
    fn retain_keeps_arrays_aligned() {
        let mut s = GaussianSet::<f32>::new(1);
        for i in 0..5 {
            s.push(Gaussian3D::isotropic(Vec3::new(i as f32, 0.0, 0.0), 0.1, [0.5; 3], 0.5, 1));
        }
        s.grad_accum[3] = 2.0;
        let removed = s.retain_mask(&[true, false, true, true, false]);
        assert_eq!(removed, 2);
        assert!(s.is_consistent());
        assert_eq!(s.gaussians[2].mu.x, 3.0);
        assert_eq!(s.grad_accum[2], 2.0);
    }

    #[test]
    fn params_round_trip() {
        let g = Gaussian3D::isotropic(Vec3::new(1.0f64, 2.0, 3.0), 0.2, [0.1, 0.2, 0.3], 0.7, 2);
        let mut h = Gaussian3D::zeros(2);
        h.set_params(&g.params());
        assert_eq!(g, h);
        assert_eq!(g.params().len(), g.num_params());
    }
}
