//! Novel view synthesis by forward-warping depth maps.
//!
//! Every valid source pixel is lifted to a world point with its (fused) depth
//! and re-projected into the target camera with floor dehomogenization. The
//! nearest depth wins per target pixel; pixels nothing lands on keep the
//! background color. Several sources are accumulated, nearest camera first.

use serde::{Deserialize, Serialize};

use crate::dataset::{DepthMap, ImageBuffer, Rgb, SceneDatabase, Split};
use crate::error::{Error, Result};
use crate::geometry::{
    angular_error_deg, camera_ray, project_camera, Dehomogenize, Intrinsics, PixelCoord, Pose,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Stop adding sources once this fraction of pixels is filled.
    pub fill_threshold: f64,
    pub max_sources: usize,
    /// Views filled below this fraction are not used for training.
    pub min_valid_fraction: f64,
    /// Only sources whose rotation is within this angle of the target are used.
    pub source_rotation_gate_deg: f64,
    pub background: Rgb,
    pub dehomogenize: Dehomogenize,
    /// Paint unfilled pixels from their filled neighbours instead of leaving
    /// the background. Hole shape otherwise leaks the pose offset to a
    /// regressor trained on synthetic pairs.
    #[serde(default)]
    pub fill_holes: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self::outdoor()
    }
}

impl SynthesisConfig {
    pub fn outdoor() -> Self {
        Self {
            fill_threshold: 0.8,
            max_sources: 10,
            min_valid_fraction: 0.3,
            source_rotation_gate_deg: 30.0,
            background: [1.0, 1.0, 1.0],
            dehomogenize: Dehomogenize::Floor,
            fill_holes: false,
        }
    }

    pub fn indoor() -> Self {
        Self {
            source_rotation_gate_deg: 15.0,
            ..Self::outdoor()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_valid_fraction > 0.0
            && self.min_valid_fraction <= self.fill_threshold
            && self.fill_threshold <= 1.0
            && self.max_sources >= 1
            && self.source_rotation_gate_deg >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("synthesis config {self:?}")))
        }
    }
}

/// A rendered (possibly partial) view and its z-buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub image: ImageBuffer,
    pub zbuffer: DepthMap,
    pub filled_fraction: f64,
    pub sources_used: Vec<String>,
}

impl SynthesisResult {
    /// Empty canvas for a target camera.
    pub fn blank(k: &Intrinsics, background: Rgb) -> Self {
        Self {
            image: ImageBuffer::new(k.width, k.height, background),
            zbuffer: DepthMap::invalid(k.width, k.height),
            filled_fraction: 0.0,
            sources_used: Vec::new(),
        }
    }

    fn refresh_fraction(&mut self) {
        self.filled_fraction = self.zbuffer.valid_fraction();
    }
}

/// Least-squares scale and shift mapping dense depth onto sparse depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
}

const MAX_CONDITION: f64 = 1e12;

/// Aligns `dense_affine` to `sparse` by least squares over jointly valid
/// pixels, then fills sparse holes with the aligned dense depth.
pub fn fuse_depth(sparse: &DepthMap, dense_affine: &DepthMap) -> Result<(DepthMap, DepthAlignment)> {
    if (sparse.width, sparse.height) != (dense_affine.width, dense_affine.height) {
        return Err(Error::DegenerateAlignment("raster sizes differ".into()));
    }
    let pairs: Vec<(f64, f64)> = (0..sparse.len())
        .filter_map(|i| Some((dense_affine.get(i)?, sparse.get(i)?)))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::DegenerateAlignment(format!("{n} overlapping pixels")));
    }
    let nf = n as f64;
    let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let sxx: f64 = pairs.iter().map(|(x, _)| x * x).sum();
    // normal matrix [[sxx, sx], [sx, n]]: eigenvalue ratio as condition number
    let tr = sxx + nf;
    let det = sxx * nf - sx * sx;
    let disc = ((sxx - nf).powi(2) + 4.0 * sx * sx).sqrt();
    let (lmax, lmin) = (0.5 * (tr + disc), 0.5 * (tr - disc));
    if !(det > 0.0) || !(lmin > 0.0) || lmax / lmin > MAX_CONDITION {
        return Err(Error::DegenerateAlignment(format!(
            "normal matrix condition {:e}",
            lmax / lmin.max(0.0)
        )));
    }
    // centered solve
    let (mx, my) = (sx / nf, sy / nf);
    let (mut cxy, mut cxx) = (0.0, 0.0);
    for (x, y) in &pairs {
        cxy += (x - mx) * (y - my);
        cxx += (x - mx) * (x - mx);
    }
    let scale = cxy / cxx;
    let shift = my - scale * mx;

    let mut fused = sparse.clone();
    for i in 0..fused.len() {
        if fused.valid[i] {
            continue;
        }
        if let Some(x) = dense_affine.get(i) {
            let d = scale * x + shift;
            if d > 0.0 && d.is_finite() {
                fused.set(i, d);
            }
        }
    }
    Ok((fused, DepthAlignment { scale, shift }))
}

/// Borrowed view of one source camera.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub image: &'a ImageBuffer,
    pub depth: &'a DepthMap,
    pub intrinsics: &'a Intrinsics,
    pub pose: &'a Pose,
}

/// Forward-warps `src` into `canvas` as seen from `target` with intrinsics `k`.
/// A target pixel is overwritten only by a strictly nearer positive depth.
pub fn reproject(
    src: &SourceView<'_>,
    target: &Pose,
    k: &Intrinsics,
    mode: Dehomogenize,
    canvas: &mut SynthesisResult,
) {
    assert_eq!(
        (canvas.image.width, canvas.image.height),
        (k.width, k.height),
        "canvas does not match target intrinsics"
    );
    let r_src = src.pose.rotation_matrix();
    let r_tgt_t = target.rotation_matrix().transpose();
    let w = src.intrinsics.width;
    for i in 0..src.depth.len() {
        let Some(d) = src.depth.get(i) else { continue };
        let p = PixelCoord::new((i % w as usize) as i64, (i / w as usize) as i64);
        let world = r_src * (camera_ray(p, src.intrinsics) * d) + src.pose.center;
        let cam = r_tgt_t * (world - target.center);
        let Some((q, z)) = project_camera(&cam, k, mode).visible() else {
            continue;
        };
        let j = q.v as usize * k.width as usize + q.u as usize;
        let nearer = canvas.zbuffer.get(j).map_or(true, |zb| z < zb);
        if nearer {
            canvas.zbuffer.set(j, z);
            canvas.image.data[j] = src.image.data[i];
        }
    }
    canvas.refresh_fraction();
}

/// Renders novel views from the train records of a database, caching the
/// fused depth of every source.
pub struct ViewSynthesizer<'a> {
    db: &'a SceneDatabase,
    cfg: SynthesisConfig,
    fused: Vec<Option<DepthMap>>,
}

impl<'a> ViewSynthesizer<'a> {
    pub fn new(db: &'a SceneDatabase, cfg: SynthesisConfig) -> Result<Self> {
        cfg.validate()?;
        let fused = db
            .records()
            .iter()
            .map(|r| {
                (r.split == Split::Train).then(|| {
                    match fuse_depth(&r.sparse_depth, &r.dense_depth_affine) {
                        Ok((d, _)) => d,
                        // too little overlap to align: warp the sparse depth alone
                        Err(_) => r.sparse_depth.clone(),
                    }
                })
            })
            .collect();
        Ok(Self { db, cfg, fused })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.cfg
    }

    pub fn database(&self) -> &'a SceneDatabase {
        self.db
    }

    pub fn fused_depth(&self, index: usize) -> Option<&DepthMap> {
        self.fused[index].as_ref()
    }

    /// Train record indices usable as sources for `target`, nearest camera first.
    pub fn candidate_sources(&self, target: &Pose) -> Vec<usize> {
        let mut c: Vec<(f64, usize)> = self
            .db
            .train_indices()
            .into_iter()
            .filter(|&i| {
                angular_error_deg(&self.db.record(i).pose.rotation, &target.rotation)
                    <= self.cfg.source_rotation_gate_deg
            })
            .map(|i| ((self.db.record(i).pose.center - target.center).norm(), i))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c.into_iter().map(|(_, i)| i).collect()
    }

    pub fn synthesize(&self, target: &Pose, k: &Intrinsics) -> Result<SynthesisResult> {
        let sources = self.candidate_sources(target);
        if sources.is_empty() {
            return Err(Error::NoSources);
        }
        let mut canvas = SynthesisResult::blank(k, self.cfg.background);
        for &s in sources.iter().take(self.cfg.max_sources) {
            if canvas.filled_fraction >= self.cfg.fill_threshold {
                break;
            }
            let r = self.db.record(s);
            let view = SourceView {
                image: &r.image,
                depth: self.fused[s].as_ref().expect("train record"),
                intrinsics: &r.intrinsics,
                pose: &r.pose,
            };
            reproject(&view, target, k, self.cfg.dehomogenize, &mut canvas);
            canvas.sources_used.push(r.id.clone());
        }
        if self.cfg.fill_holes {
            fill_holes(&mut canvas.image, &canvas.zbuffer);
        }
        Ok(canvas)
    }
}

/// Grows the filled region one ring at a time; each hole pixel takes the mean
/// of its already-coloured 4-neighbours. A canvas with nothing filled is left
/// untouched.
pub fn fill_holes(image: &mut ImageBuffer, filled: &DepthMap) {
    let (w, h) = (image.width as usize, image.height as usize);
    let mut known: Vec<bool> = (0..w * h).map(|i| filled.get(i).is_some()).collect();
    let mut ring = Vec::new();
    loop {
        ring.clear();
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                if known[i] {
                    continue;
                }
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                let neighbours = [
                    (u > 0).then(|| i - 1),
                    (u + 1 < w).then(|| i + 1),
                    (v > 0).then(|| i - w),
                    (v + 1 < h).then(|| i + w),
                ];
                for j in neighbours.into_iter().flatten().filter(|&j| known[j]) {
                    for (a, c) in acc.iter_mut().zip(image.data[j]) {
                        *a += c;
                    }
                    n += 1.0;
                }
                if n > 0.0 {
                    ring.push((i, acc.map(|a| a / n)));
                }
            }
        }
        if ring.is_empty() {
            return;
        }
        for &(i, c) in &ring {
            image.data[i] = c;
            known[i] = true;
        }
    }
}

/// Renders the view at `target` from the train records of `db`.
pub fn synthesize_view(
    db: &SceneDatabase,
    target: &Pose,
    k: &Intrinsics,
    cfg: &SynthesisConfig,
) -> Result<SynthesisResult> {
    ViewSynthesizer::new(db, cfg.clone())?.synthesize(target, k)
}
