//! Scene storage, procedural scene generation, global descriptors and
//! nearest-neighbour retrieval.

mod descriptor;
mod io;
mod retrieval;
mod scene;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PixelCoord, Pose, Vec3};

pub use descriptor::{compute_descriptor, DEFAULT_DESCRIPTOR_DIM};
pub use io::{load_scene, load_scene_with, read_depth, save_png, save_scene, write_depth, DEPTH_MAGIC};
pub use retrieval::top_k_neighbours;
pub use scene::{
    generate_scene, raycast, Material, SceneBox, SceneKind, SceneSpec, Trajectory,
};

pub type Rgb = [f64; 3];

/// Row-major RGB raster with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<Rgb>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    pub fn get(&self, u: u32, v: u32) -> Rgb {
        self.data[self.index(u, v)]
    }

    pub fn set(&mut self, u: u32, v: u32, rgb: Rgb) {
        let i = self.index(u, v);
        self.data[i] = rgb;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Snaps every channel to the nearest 8-bit level.
    pub fn quantize_8bit(&mut self) {
        for px in &mut self.data {
            for c in px.iter_mut() {
                *c = (c.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
}

/// Metric depth raster with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Builds a map from raw values; non-finite or non-positive entries are invalid.
    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Self {
        let valid = values.iter().map(|&d| d.is_finite() && d > 0.0).collect::<Vec<_>>();
        let depth = values
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Self {
            width,
            height,
            depth,
            valid,
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.valid[i].then(|| self.depth[i])
    }

    pub fn at(&self, p: PixelCoord) -> Option<f64> {
        self.get(p.v as usize * self.width as usize + p.u as usize)
    }

    pub fn set(&mut self, i: usize, d: f64) {
        self.depth[i] = d;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Per-image affine corruption applied to the dense depth by the generator:
/// `dense = scale * depth + shift + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCorruption {
    pub scale: f64,
    pub shift: f64,
    pub noise_rel_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub split: Split,
    pub image: ImageBuffer,
    pub sparse_depth: DepthMap,
    pub dense_depth_affine: DepthMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub descriptor: Vec<f64>,
    /// Generator-only oracles; not persisted.
    pub true_depth: Option<DepthMap>,
    pub corruption: Option<AffineCorruption>,
}

impl SceneRecord {
    pub fn image_path(&self) -> String {
        format!("images/{}.png", self.id)
    }
}

/// Ordered, immutable collection of scene records.
#[derive(Debug, Clone, Default)]
pub struct SceneDatabase {
    records: Vec<SceneRecord>,
    by_id: HashMap<String, usize>,
}

impl SceneDatabase {
    pub fn new(records: Vec<SceneRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::InvalidScene(format!("duplicate record id {}", r.id)));
            }
            let (w, h) = (r.intrinsics.width, r.intrinsics.height);
            let dims_ok = [
                (r.image.width, r.image.height),
                (r.sparse_depth.width, r.sparse_depth.height),
                (r.dense_depth_affine.width, r.dense_depth_affine.height),
            ]
            .iter()
            .all(|&d| d == (w, h));
            if !dims_ok {
                return Err(Error::InvalidScene(format!(
                    "record {} rasters do not match intrinsics {w}x{h}",
                    r.id
                )));
            }
        }
        Ok(Self { records, by_id })
    }

    pub fn records(&self) -> &[SceneRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &SceneRecord {
        &self.records[index]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownRecord(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<&SceneRecord> {
        Ok(&self.records[self.index_of(id)?])
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    pub fn train_poses(&self) -> Vec<Pose> {
        self.train_indices()
            .into_iter()
            .map(|i| self.records[i].pose)
            .collect()
    }

    pub fn train_centers(&self) -> Vec<Vec3> {
        self.train_poses().iter().map(|p| p.center).collect()
    }

    /// Keeps only the records for which `keep` returns true, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&SceneRecord) -> bool) -> Result<Self> {
        Self::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }
}
