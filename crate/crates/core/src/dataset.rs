//! Dataset directory contract.
//!
//! ```text
//! <root>/scene.toml            cameras, splits, background, optional GT scene
//! <root>/images/<view>.png     RGB ground truth
//! <root>/masks/<view>.masks.json   instance masks (optional per view)
//! <root>/semantic/<view>.png   8-bit labels: 0..5 layout faces, 10+k objects
//! <root>/layout.obj            layout shell geometry
//! <root>/layout.groups.json    face groups, atlas strips and UVs
//! <root>/points.json           sparse colored points for initialization
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::{load_masks, MaskSet};
use crate::mesh::LayoutMesh;
use crate::scalar::Real;
use crate::synth::GroundTruthScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub name: String,
    pub split: Split,
    pub camera: Camera<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub position: [f64; 3],
    pub color: [f64; 3],
}

/// Contents of `scene.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub background: [f64; 3],
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthScene>,
}

impl SceneFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = toml::from_str(&text)?;
        for v in &s.views {
            v.camera.validate()?;
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct View<T> {
    pub name: String,
    pub split: Split,
    pub camera: Camera<T>,
    pub image: ImageBuffer<T>,
    pub masks: Option<MaskSet>,
    /// Per-pixel semantic labels, if available.
    pub labels: Option<Vec<u8>>,
}

impl<T> View<T> {
    /// `true` for layout pixels (labels below 10).
    pub fn layout_region(&self) -> Option<Vec<bool>> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| v < crate::synth::OBJECT_LABEL_BASE).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub root: PathBuf,
    pub background: [f64; 3],
    pub views: Vec<View<T>>,
    pub points: Vec<PointRecord>,
    pub layout: LayoutMesh<T>,
}

impl<T: Real> Dataset<T> {
    /// Loads a dataset directory; missing mask or label files are allowed
    /// (the trainer reports them when they are needed).
    pub fn load(root: &Path, min_mask_area: usize) -> Result<Self> {
        let scene = SceneFile::load(&root.join("scene.toml"))?;
        if scene.views.is_empty() {
            return Err(Error::Dataset(format!("{} lists no views", root.display())));
        }
        let mut views = Vec::with_capacity(scene.views.len());
        for rec in &scene.views {
            let image = ImageBuffer::<T>::load_rgb(&root.join("images").join(format!("{}.png", rec.name)))?;
            if image.width != rec.camera.width || image.height != rec.camera.height {
                return Err(Error::ResolutionMismatch(image.width, image.height, rec.camera.width, rec.camera.height));
            }
            let mpath = root.join("masks").join(format!("{}.masks.json", rec.name));
            let masks = if mpath.exists() {
                let m = load_masks(&mpath, min_mask_area)?;
                if m.width != image.width || m.height != image.height {
                    return Err(Error::MaskFormat(format!("{}: mask size differs from image size", rec.name)));
                }
                Some(m)
            } else {
                None
            };
            let lpath = root.join("semantic").join(format!("{}.png", rec.name));
            let labels = if lpath.exists() {
                let (w, h, l) = ImageBuffer::<T>::load_gray_u8(&lpath)?;
                if w != image.width || h != image.height {
                    return Err(Error::ResolutionMismatch(w, h, image.width, image.height));
                }
                Some(l)
            } else {
                None
            };
            views.push(View { name: rec.name.clone(), split: rec.split, camera: rec.camera.cast(), image, masks, labels });
        }
        let ppath = root.join("points.json");
        let points = if ppath.exists() {
            serde_json::from_str(&std::fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?)?
        } else {
            Vec::new()
        };
        let layout = LayoutMesh::load(&root.join("layout.obj"), &root.join("layout.groups.json"))?;
        Ok(Self { root: root.to_path_buf(), background: scene.background, views, points, layout })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &View<T>> {
        self.views.iter().filter(move |v| v.split == split)
    }

    /// Scene scale used for learning rates and densification thresholds:
    /// half the diagonal of the layout's bounding box, or of the camera
    /// centers when there is no layout.
    pub fn extent(&self) -> f64 {
        let pts: Vec<[f64; 3]> = if self.layout.vertices.is_empty() {
            self.views.iter().map(|v| v.camera.center().cast::<f64>().to_array()).collect()
        } else {
            self.layout.vertices.iter().map(|v| v.cast::<f64>().to_array()).collect()
        };
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &pts {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let d: f64 = (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt();
        (0.5 * d).max(1e-3)
    }
}
