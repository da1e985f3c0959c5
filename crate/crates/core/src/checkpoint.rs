//! Binary checkpoints.
//!
//! ```text
//! "HSP1" | version u32 | scalar width u8 | sections...
//! section = tag [u8; 4] | length u64 | payload
//! ```
//!
//! Sections: `SCHD` (config and counters as TOML), `GAUS` (Gaussians with
//! optimizer moments and densification statistics), `MESH` (layout geometry,
//! SH texture and its moments). Integers and scalars are little-endian; the
//! scalar width is fixed per file, so loading an `f64` checkpoint as `f32`
//! (or vice versa) is a [`Error::ScalarWidth`] rather than a silent cast.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::{AdamMoments, Gaussian3D, GaussianSet};
use crate::linalg::Vec3;
use crate::mesh::{FaceGroup, LayoutMesh, ShTexture};
use crate::scalar::Real;
use crate::trainer::{MeshMoments, TrainState};

pub const MAGIC: &[u8; 4] = b"HSP1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Schedule {
    iteration: usize,
    pretrain_done: usize,
    gaussian_steps: u64,
    mesh_steps: u64,
    background: [f64; 3],
    config: TrainConfig,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn real<T: Real>(&mut self, v: T) {
        v.write_le(&mut self.buf);
    }
    fn reals<T: Real>(&mut self, v: &[T]) {
        for &x in v {
            x.write_le(&mut self.buf);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.buf.extend_from_slice(b);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.buf.extend_from_slice(tag);
        self.bytes(&body.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format(format!("truncated {} ({} bytes short)", self.what, n - self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// A length that must fit in the remaining bytes at `min_elem` bytes each.
    fn len(&mut self, min_elem: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(min_elem as u64) > self.buf.len() as u64 {
            return Err(Error::Format(format!("{}: length {n} exceeds remaining data", self.what)));
        }
        Ok(n as usize)
    }
    fn real<T: Real>(&mut self) -> Result<T> {
        Ok(T::read_le(self.take(T::BYTES)?))
    }
    fn reals<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn vec3<T: Real>(&mut self) -> Result<Vec3<T>> {
        Ok(Vec3::new(self.real()?, self.real()?, self.real()?))
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} has {} trailing bytes", self.what, self.buf.len())))
        }
    }
}

fn write_gaussians<T: Real>(set: &GaussianSet<T>) -> Writer {
    let mut w = Writer { buf: Vec::new() };
    w.u32(set.sh_degree as u32);
    w.len(set.len());
    for i in 0..set.len() {
        w.reals(&set.gaussians[i].params());
        w.reals(&set.moments[i].m.params());
        w.reals(&set.moments[i].v.params());
        w.real(set.grad_accum[i]);
        w.u32(set.grad_count[i]);
        w.real(set.max_radii[i]);
    }
    w
}

fn read_gaussians<T: Real>(r: &mut Reader) -> Result<GaussianSet<T>> {
    let degree = r.u32()? as usize;
    if degree > crate::sh::MAX_DEGREE {
        return Err(Error::UnsupportedDegree(degree));
    }
    let np = Gaussian3D::<T>::zeros(degree).num_params();
    let n = r.len(np * 3 * T::BYTES)?;
    let mut set = GaussianSet::new(degree);
    let block = |r: &mut Reader| -> Result<Gaussian3D<T>> {
        let mut g = Gaussian3D::zeros(degree);
        g.set_params(&r.reals(np)?);
        Ok(g)
    };
    for _ in 0..n {
        let g = block(r)?;
        let m = block(r)?;
        let v = block(r)?;
        set.gaussians.push(g);
        set.moments.push(AdamMoments { m, v });
        set.grad_accum.push(r.real()?);
        set.grad_count.push(r.u32()?);
        set.max_radii.push(r.real()?);
    }
    Ok(set)
}

fn write_mesh<T: Real>(mesh: &LayoutMesh<T>, mom: &MeshMoments<T>) -> Result<Writer> {
    let mut w = Writer { buf: Vec::new() };
    w.len(mesh.vertices.len());
    for v in &mesh.vertices {
        w.reals(&v.to_array());
    }
    w.len(mesh.faces.len());
    for f in 0..mesh.faces.len() {
        for &i in &mesh.faces[f] {
            w.u32(i as u32);
        }
        for uv in &mesh.face_uvs[f] {
            w.reals(uv);
        }
        w.u32(mesh.face_group[f] as u32);
    }
    w.bytes(serde_json::to_string(&mesh.groups)?.as_bytes());
    w.u32(mesh.num_strips as u32);
    let t = &mesh.texture;
    w.u32(t.width as u32);
    w.u32(t.height as u32);
    w.u32(t.degree as u32);
    w.reals(&t.data);
    w.reals(&mom.texture_m);
    w.reals(&mom.texture_v);
    for v in mom.vertices_m.iter().chain(&mom.vertices_v) {
        w.reals(&v.to_array());
    }
    Ok(w)
}

fn read_mesh<T: Real>(r: &mut Reader) -> Result<(LayoutMesh<T>, MeshMoments<T>)> {
    let nv = r.len(3 * T::BYTES)?;
    let vertices = (0..nv).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let nf = r.len(16 + 6 * T::BYTES)?;
    let (mut faces, mut face_uvs, mut face_group) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..nf {
        let f = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if f.iter().any(|&i| i >= nv) {
            return Err(Error::Format(format!("face index out of range ({f:?}, {nv} vertices)")));
        }
        faces.push(f);
        let mut uv = [[T::zero(); 2]; 3];
        for c in &mut uv {
            *c = [r.real()?, r.real()?];
        }
        face_uvs.push(uv);
        face_group.push(r.u32()? as usize);
    }
    let groups: Vec<FaceGroup> = serde_json::from_slice(r.bytes()?)?;
    if face_group.iter().any(|&g| g >= groups.len()) {
        return Err(Error::Format("face group index out of range".into()));
    }
    let num_strips = r.u32()? as usize;
    let (tw, th, degree) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if degree > crate::sh::MAX_DEGREE {
        return Err(Error::UnsupportedDegree(degree));
    }
    let tn = tw * th * crate::sh::num_coeffs(degree) * 3;
    let texture = ShTexture { width: tw, height: th, degree, data: r.reals(tn)? };
    let texture_m = r.reals(tn)?;
    let texture_v = r.reals(tn)?;
    let vertices_m = (0..nv).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let vertices_v = (0..nv).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let mesh = LayoutMesh { vertices, faces, face_uvs, face_group, groups, num_strips, texture };
    Ok((mesh, MeshMoments { texture_m, texture_v, vertices_m, vertices_v }))
}

/// Serializes a training state and its configuration.
pub fn to_bytes<T: Real>(state: &TrainState<T>, config: &TrainConfig) -> Result<Vec<u8>> {
    let mut w = Writer { buf: MAGIC.to_vec() };
    w.u32(VERSION);
    w.buf.push(T::BYTES as u8);
    let sched = Schedule {
        iteration: state.iteration,
        pretrain_done: state.pretrain_done,
        gaussian_steps: state.gaussian_steps,
        mesh_steps: state.mesh_steps,
        background: state.background.map(Real::as_f64),
        config: config.clone(),
    };
    let mut s = Writer { buf: Vec::new() };
    s.buf.extend_from_slice(toml::to_string(&sched)?.as_bytes());
    w.section(b"SCHD", s);
    w.section(b"GAUS", write_gaussians(&state.gaussians));
    w.section(b"MESH", write_mesh(&state.mesh, &state.mesh_moments)?);
    Ok(w.buf)
}

fn header(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let mut r = Reader { buf: bytes, what: "header" };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let width = r.take(1)?[0] as usize;
    Ok((width, r.buf))
}

/// Scalar width (4 or 8) recorded in a checkpoint.
pub fn peek_scalar_width(bytes: &[u8]) -> Result<usize> {
    Ok(header(bytes)?.0)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(TrainState<T>, TrainConfig)> {
    let (width, rest) = header(bytes)?;
    if width != T::BYTES {
        return Err(Error::ScalarWidth { found: width, expected: T::BYTES });
    }
    let mut r = Reader { buf: rest, what: "section table" };
    let (mut sched, mut gaus, mut mesh) = (None, None, None);
    while !r.buf.is_empty() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let body = r.bytes()?;
        match &tag {
            b"SCHD" => {
                let text = std::str::from_utf8(body).map_err(|e| Error::Format(format!("SCHD is not UTF-8: {e}")))?;
                sched = Some(toml::from_str::<Schedule>(text)?);
            }
            b"GAUS" => {
                let mut s = Reader { buf: body, what: "GAUS section" };
                gaus = Some(read_gaussians::<T>(&mut s)?);
                s.finish()?;
            }
            b"MESH" => {
                let mut s = Reader { buf: body, what: "MESH section" };
                mesh = Some(read_mesh::<T>(&mut s)?);
                s.finish()?;
            }
            other => log::warn!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(other)),
        }
    }
    let missing = |n: &str| Error::Format(format!("missing {n} section"));
    let sched = sched.ok_or_else(|| missing("SCHD"))?;
    let gaussians = gaus.ok_or_else(|| missing("GAUS"))?;
    let (mesh, mesh_moments) = mesh.ok_or_else(|| missing("MESH"))?;
    sched.config.validate()?;
    let state = TrainState {
        gaussians,
        mesh,
        mesh_moments,
        iteration: sched.iteration,
        pretrain_done: sched.pretrain_done,
        gaussian_steps: sched.gaussian_steps,
        mesh_steps: sched.mesh_steps,
        background: sched.background.map(T::lit),
    };
    Ok((state, sched.config))
}

pub fn save<T: Real>(path: &Path, state: &TrainState<T>, config: &TrainConfig) -> Result<()> {
    std::fs::write(path, to_bytes(state, config)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(TrainState<T>, TrainConfig)> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState<f32> {
        let pts = [([0.0, 0.0, 1.0], [0.2, 0.4, 0.6]), ([0.5, 0.1, 1.2], [0.9, 0.1, 0.3]), ([0.3, -0.2, 0.8], [0.5, 0.5, 0.5])];
        let mesh = LayoutMesh::box_room(Vec3::new(-2.0, -2.0, 0.0), Vec3::new(2.0, 2.0, 2.5), 24, 4);
        let mut s = TrainState::initialize(&pts, mesh, &TrainConfig::default(), [0.1, 0.2, 0.3]);
        s.gaussians.moments[1].v.mu.y = 1.0e-7;
        s.gaussians.grad_count[2] = 5;
        s.mesh.texture.data[17] = std::f32::consts::PI;
        s.mesh_moments.vertices_v[3].z = 3.25e-9;
        s.iteration = 42;
        s.gaussian_steps = 42;
        s.mesh_steps = 77;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let cfg = TrainConfig { seed: 9, ..Default::default() };
        let bytes = to_bytes(&s, &cfg).unwrap();
        let (back, c) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(c, cfg);
        assert_eq!(back, s);
        assert_eq!(to_bytes(&back, &c).unwrap(), bytes);
    }

    #[test]
    fn width_mismatch_and_truncation_are_errors() {
        let bytes = to_bytes(&state(), &TrainConfig::default()).unwrap();
        assert_eq!(peek_scalar_width(&bytes).unwrap(), 4);
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::ScalarWidth { found: 4, expected: 8 })));
        for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes::<f32>(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Version { found: 9, .. })));
    }
}
