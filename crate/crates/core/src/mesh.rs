//! Layout mesh: walls, floor and ceiling with spherical-harmonics textures
//! packed into a strip atlas (one horizontal strip per face group).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;
use crate::sh;

/// SH degree of layout textures.
pub const TEXTURE_SH_DEGREE: usize = 3;
/// Minimum triangle area (m^2) for a face to count as non-degenerate.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Texel grid of SH coefficients. Texel `(x, y)` holds `num_coeffs * 3`
/// values, coefficient-major (`k * 3 + channel`).
#[derive(Clone, Debug, PartialEq)]
pub struct ShTexture<T> {
    pub width: usize,
    pub height: usize,
    pub degree: usize,
    pub data: Vec<T>,
}

impl<T: Real> ShTexture<T> {
    pub fn zeros(width: usize, height: usize, degree: usize) -> Self {
        Self { width, height, degree, data: vec![T::zero(); width * height * sh::num_coeffs(degree) * 3] }
    }

    #[inline]
    pub fn texel_len(&self) -> usize {
        sh::num_coeffs(self.degree) * 3
    }

    #[inline]
    pub fn texel_offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.texel_len()
    }

    pub fn texel(&self, x: usize, y: usize) -> &[T] {
        let o = self.texel_offset(x, y);
        &self.data[o..o + self.texel_len()]
    }

    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let o = self.texel_offset(x, y);
        let n = self.texel_len();
        &mut self.data[o..o + n]
    }
}

/// A named set of faces sharing one atlas strip (e.g. `wall_0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceGroup {
    pub name: String,
    pub strip: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    /// Atlas UV of each face corner.
    pub face_uvs: Vec<[[T; 2]; 3]>,
    /// Group index of each face.
    pub face_group: Vec<usize>,
    pub groups: Vec<FaceGroup>,
    pub num_strips: usize,
    pub texture: ShTexture<T>,
}

impl<T: Real> LayoutMesh<T> {
    /// Empty mesh with a texture atlas but no geometry.
    pub fn empty(tex_width: usize, tex_height: usize) -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            face_uvs: Vec::new(),
            face_group: Vec::new(),
            groups: Vec::new(),
            num_strips: 1,
            texture: ShTexture::zeros(tex_width, tex_height, TEXTURE_SH_DEGREE),
        }
    }

    /// Closed box room: four walls, floor and ceiling, each a two-triangle
    /// group with its own atlas strip. Corners are shared so the shell is
    /// watertight; all faces are wound with outward normals.
    ///
    /// UVs are laid out so that a viewer inside the room looking at a face
    /// sees `u` increase to the right and `v` increase downwards.
    pub fn box_room(min: Vec3<T>, max: Vec3<T>, tex_width: usize, tex_height: usize) -> Self {
        let c = (min + max) * T::lit(0.5);
        let h = (max - min) * T::lit(0.5);
        let z = T::zero();
        let x = Vec3::new(T::one(), z, z);
        let y = Vec3::new(z, T::one(), z);
        let up = Vec3::new(z, z, T::one());
        // (name, outward axis, image-right, image-up) as seen from inside.
        let quads: [(&str, Vec3<T>, Vec3<T>, Vec3<T>); 6] = [
            ("wall_0", -y, -x, up),
            ("wall_1", x, -y, up),
            ("wall_2", y, x, up),
            ("wall_3", -x, y, up),
            ("floor", -up, x, y),
            ("ceiling", up, -x, y),
        ];
        let mut mesh = Self::empty(tex_width, tex_height);
        mesh.num_strips = quads.len();
        let mut index: HashMap<[i64; 3], usize> = HashMap::new();
        let ext = |v: Vec3<T>| Vec3::new(v.x * h.x, v.y * h.y, v.z * h.z);
        for (gi, (name, out, right, upv)) in quads.iter().enumerate() {
            let center = c + ext(*out);
            let r = ext(*right);
            let u = ext(*upv);
            let corners = [center - r + u, center + r + u, center + r - u, center - r - u];
            let mut ids = [0usize; 4];
            for (k, p) in corners.iter().enumerate() {
                // Corner keys quantized to 1e-9 m.
                let key = [p.x, p.y, p.z].map(|v| (v.as_f64() * 1e9).round() as i64);
                let next = mesh.vertices.len();
                ids[k] = *index.entry(key).or_insert_with(|| next);
                if ids[k] == next {
                    mesh.vertices.push(*p);
                }
            }
            mesh.groups.push(FaceGroup { name: (*name).to_string(), strip: gi });
            let (u0, u1) = mesh.strip_u_range(gi);
            let (o, l) = (T::zero(), T::one());
            let uv = [[u0, o], [u1, o], [u1, l], [u0, l]];
            mesh.faces.push([ids[0], ids[1], ids[2]]);
            mesh.face_uvs.push([uv[0], uv[1], uv[2]]);
            mesh.face_group.push(gi);
            mesh.faces.push([ids[0], ids[2], ids[3]]);
            mesh.face_uvs.push([uv[0], uv[2], uv[3]]);
            mesh.face_group.push(gi);
        }
        mesh
    }

    /// Atlas `u` range of strip `s`.
    pub fn strip_u_range(&self, s: usize) -> (T, T) {
        let n = T::from_usize_lossy(self.num_strips);
        (T::from_usize_lossy(s) / n, T::from_usize_lossy(s + 1) / n)
    }

    /// Texel column range `[x0, x1)` of strip `s`.
    pub fn strip_texels(&self, s: usize) -> (usize, usize) {
        let w = self.texture.width / self.num_strips;
        (s * w, (s + 1) * w)
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        self.groups.iter().position(|g| g.name == name).ok_or_else(|| Error::UnknownFaceGroup {
            name: name.to_string(),
            valid: self.groups.iter().map(|g| g.name.as_str()).collect::<Vec<_>>().join(", "),
        })
    }

    pub fn face_area(&self, f: usize) -> T {
        let [a, b, c] = self.faces[f];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        (pb - pa).cross(pc - pa).norm() * T::lit(0.5)
    }

    /// Checks index bounds, UV range, face areas and the strip layout.
    pub fn validate(&self) -> Result<()> {
        let n = self.faces.len();
        if self.face_uvs.len() != n || self.face_group.len() != n {
            return Err(Error::Mesh("per-face arrays have inconsistent lengths".into()));
        }
        if self.num_strips == 0 || self.texture.width % self.num_strips != 0 {
            return Err(Error::Mesh(format!(
                "texture width {} not divisible into {} strips",
                self.texture.width, self.num_strips
            )));
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i >= self.vertices.len()) {
                return Err(Error::Mesh(format!("face {f} references a missing vertex")));
            }
            if self.face_area(f).as_f64() <= MIN_FACE_AREA {
                return Err(Error::Mesh(format!("face {f} is degenerate")));
            }
            for uv in &self.face_uvs[f] {
                if uv.iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
                    return Err(Error::Mesh(format!("face {f} has UVs outside [0, 1]")));
                }
            }
            if self.face_group[f] >= self.groups.len() {
                return Err(Error::Mesh(format!("face {f} has no group")));
            }
        }
        for g in &self.groups {
            if g.strip >= self.num_strips {
                return Err(Error::Mesh(format!("group {} uses missing strip {}", g.name, g.strip)));
            }
        }
        Ok(())
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut edges: HashMap<(usize, usize), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }

    /// Writes geometry as OBJ (`v`/`f` lines only).
    pub fn to_obj(&self) -> String {
        let mut s = String::from("# layout mesh\n");
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64());
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn sidecar(&self) -> MeshSidecar {
        MeshSidecar {
            texture_width: self.texture.width,
            texture_height: self.texture.height,
            sh_degree: self.texture.degree,
            num_strips: self.num_strips,
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(gi, g)| SidecarGroup {
                    name: g.name.clone(),
                    strip: g.strip,
                    faces: (0..self.faces.len()).filter(|&f| self.face_group[f] == gi).collect(),
                })
                .collect(),
            face_uvs: self.face_uvs.iter().map(|f| f.map(|uv| uv.map(|v| v.as_f64()))).collect(),
        }
    }

    pub fn save(&self, obj_path: &Path, sidecar_path: &Path) -> Result<()> {
        std::fs::write(obj_path, self.to_obj()).map_err(|e| Error::io(obj_path, e))?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
    }

    /// Reads an OBJ subset plus its group sidecar. Textures start at zero.
    pub fn load(obj_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let obj = std::fs::read_to_string(obj_path).map_err(|e| Error::io(obj_path, e))?;
        let side: MeshSidecar = serde_json::from_str(
            &std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?,
        )?;
        let (vertices, faces) = parse_obj::<T>(&obj)?;
        let mut face_group = vec![usize::MAX; faces.len()];
        let mut groups = Vec::new();
        for (gi, g) in side.groups.iter().enumerate() {
            groups.push(FaceGroup { name: g.name.clone(), strip: g.strip });
            for &f in &g.faces {
                *face_group
                    .get_mut(f)
                    .ok_or_else(|| Error::Mesh(format!("sidecar references missing face {f}")))? = gi;
            }
        }
        if side.face_uvs.len() != faces.len() {
            return Err(Error::Mesh("sidecar UV count does not match face count".into()));
        }
        let mesh = Self {
            vertices,
            faces,
            face_uvs: side.face_uvs.iter().map(|f| f.map(|uv| uv.map(T::lit))).collect(),
            face_group,
            groups,
            num_strips: side.num_strips,
            texture: ShTexture::zeros(side.texture_width, side.texture_height, side.sh_degree),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn cast<U: Real>(&self) -> LayoutMesh<U> {
        let c = |v: T| U::lit(v.as_f64());
        LayoutMesh {
            vertices: self.vertices.iter().map(|v| v.cast()).collect(),
            faces: self.faces.clone(),
            face_uvs: self.face_uvs.iter().map(|f| f.map(|uv| uv.map(c))).collect(),
            face_group: self.face_group.clone(),
            groups: self.groups.clone(),
            num_strips: self.num_strips,
            texture: ShTexture {
                width: self.texture.width,
                height: self.texture.height,
                degree: self.texture.degree,
                data: self.texture.data.iter().map(|&v| c(v)).collect(),
            },
        }
    }
}

/// JSON sidecar next to the OBJ: atlas shape, face groups and face UVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSidecar {
    pub texture_width: usize,
    pub texture_height: usize,
    pub sh_degree: usize,
    pub num_strips: usize,
    pub groups: Vec<SidecarGroup>,
    pub face_uvs: Vec<[[f64; 2]; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarGroup {
    pub name: String,
    pub strip: usize,
    pub faces: Vec<usize>,
}

/// Parses `v x y z` and triangular `f a b c` lines (`a/…` forms accepted).
pub fn parse_obj<T: Real>(text: &str) -> Result<(Vec<Vec3<T>>, Vec<[usize; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Mesh(format!("line {}: {e}", ln + 1)))?;
                if xyz.len() != 3 {
                    return Err(Error::Mesh(format!("line {}: vertex needs 3 coordinates", ln + 1)));
                }
                verts.push(Vec3::new(T::lit(xyz[0]), T::lit(xyz[1]), T::lit(xyz[2])));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Mesh(format!("line {}: {e}", ln + 1)))?;
                if idx.len() != 3 || idx.iter().any(|&i| i == 0) {
                    return Err(Error::Mesh(format!("line {}: only 1-based triangles are supported", ln + 1)));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}
