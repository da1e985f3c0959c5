//! Instance masks: RLE-JSON I/O, overlap removal and loss weights.
//!
//! File format (`<image_stem>.masks.json`):
//!
//! ```json
//! { "height": H, "width": W,
//!   "masks": [ { "id": 0, "area": 123, "rle": [c0, c1, ...] } ] }
//! ```
//!
//! `rle` is an uncompressed COCO run-length encoding: pixels are visited in
//! column-major order (`index = x * H + y`), runs alternate between
//! background and foreground, and the first run is background (possibly
//! zero-length). Runs must sum to `W * H`, and `area` must equal the number
//! of foreground pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Masks smaller than this many pixels are dropped on load.
pub const DEFAULT_MIN_AREA: usize = 16;
/// Default containment ratio for overlap removal.
pub const DEFAULT_OVERLAP_TAU: f64 = 0.8;

/// A binary mask stored as the sorted row-major indices of its pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub id: u64,
    pub pixels: Vec<u32>,
}

impl Mask {
    #[inline]
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn from_bits(id: u64, bits: &[bool]) -> Self {
        Self { id, pixels: bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i as u32).collect() }
    }

    pub fn to_bits(&self, n: usize) -> Vec<bool> {
        let mut b = vec![false; n];
        for &p in &self.pixels {
            b[p as usize] = true;
        }
        b
    }

    /// `|self ∩ other|` by merging the sorted index lists.
    pub fn intersection(&self, other: &Mask) -> usize {
        let (a, b) = (&self.pixels, &other.pixels);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// All masks of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self { image_id: image_id.into(), width, height, masks: Vec::new() }
    }

    pub fn areas(&self) -> Vec<usize> {
        self.masks.iter().map(Mask::area).collect()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Column-major COCO counts of a row-major bitmap.
pub fn rle_encode(bits: &[bool], width: usize, height: usize) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..width {
        for y in 0..height {
            let b = bits[y * width + x];
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decodes COCO counts into a row-major bitmap.
pub fn rle_decode(counts: &[u64], width: usize, height: usize) -> Result<Vec<bool>> {
    let n = width * height;
    let total: u64 = counts.iter().sum();
    if total != n as u64 {
        return Err(Error::MaskFormat(format!("RLE covers {total} pixels, image has {n}")));
    }
    let mut bits = vec![false; n];
    let mut k = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        let fg = i % 2 == 1;
        for _ in 0..c {
            if fg {
                let (x, y) = (k / height, k % height);
                bits[y * width + x] = true;
            }
            k += 1;
        }
    }
    Ok(bits)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MaskFile {
    height: usize,
    width: usize,
    masks: Vec<MaskRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MaskRecord {
    id: u64,
    area: usize,
    rle: Vec<u64>,
}

/// Parses a masks JSON document. Masks below `min_area` are dropped.
pub fn parse_masks(image_id: &str, json: &str, min_area: usize) -> Result<MaskSet> {
    let file: MaskFile = serde_json::from_str(json).map_err(|e| Error::MaskFormat(e.to_string()))?;
    let mut set = MaskSet::new(image_id, file.width, file.height);
    for rec in file.masks {
        let bits = rle_decode(&rec.rle, file.width, file.height)?;
        let mask = Mask::from_bits(rec.id, &bits);
        if mask.area() != rec.area {
            return Err(Error::MaskFormat(format!(
                "mask {} declares area {} but decodes to {}",
                rec.id,
                rec.area,
                mask.area()
            )));
        }
        if mask.area() < min_area.max(1) {
            log::warn!("{image_id}: dropping mask {} with area {} < {min_area}", rec.id, mask.area());
            continue;
        }
        set.masks.push(mask);
    }
    Ok(set)
}

pub fn load_masks(path: &Path, min_area: usize) -> Result<MaskSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.trim_end_matches(".masks.json").to_string())
        .unwrap_or_default();
    parse_masks(&id, &text, min_area)
}

pub fn masks_to_json(set: &MaskSet) -> Result<String> {
    let n = set.width * set.height;
    let file = MaskFile {
        height: set.height,
        width: set.width,
        masks: set
            .masks
            .iter()
            .map(|m| MaskRecord { id: m.id, area: m.area(), rle: rle_encode(&m.to_bits(n), set.width, set.height) })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_masks(set: &MaskSet, path: &Path) -> Result<()> {
    std::fs::write(path, masks_to_json(set)?).map_err(|e| Error::io(path, e))
}

/// Keeps the largest of any group of overlapping masks. Masks are visited by
/// descending area (ties: ascending id); a mask is dropped when more than
/// `tau` of its own area lies inside an already retained mask.
pub fn remove_overlapping(set: &MaskSet, tau: f64) -> MaskSet {
    let mut order: Vec<usize> = (0..set.masks.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (&set.masks[a], &set.masks[b]);
        mb.area().cmp(&ma.area()).then(ma.id.cmp(&mb.id))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let m = &set.masks[i];
        let covered = kept.iter().any(|&k| m.intersection(&set.masks[k]) as f64 / m.area() as f64 > tau);
        if !covered {
            kept.push(i);
        }
    }
    MaskSet { masks: kept.into_iter().map(|i| set.masks[i].clone()).collect(), ..set.clone() }
}

/// Per-mask weighting of the mask loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `1 / M`.
    Uniform,
    /// `A_i / sum A`.
    Area,
    /// `sqrt(A_i) / sum sqrt(A)`.
    SqrtArea,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "area" => Ok(Self::Area),
            "sqrt_area" => Ok(Self::SqrtArea),
            _ => Err(Error::Config(format!("unknown weight scheme `{s}` (uniform, area, sqrt_area)"))),
        }
    }
}

pub fn compute_weights(set: &MaskSet, scheme: WeightScheme) -> Vec<f64> {
    let raw: Vec<f64> = set
        .masks
        .iter()
        .map(|m| match scheme {
            WeightScheme::Uniform => 1.0,
            WeightScheme::Area => m.area() as f64,
            WeightScheme::SqrtArea => (m.area() as f64).sqrt(),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}
