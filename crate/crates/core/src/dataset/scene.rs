//! Procedural desk-scale scenes rendered by ray casting axis-aligned boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    compute_descriptor, AffineCorruption, DepthMap, ImageBuffer, Rgb, SceneDatabase, SceneRecord,
    Split, DEFAULT_DESCRIPTOR_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{camera_ray, Intrinsics, PixelCoord, Pose, Vec3};

const SKY: Rgb = [0.9, 0.92, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Material {
    /// Brick-banded wall whose hue follows the azimuth of the surface point
    /// around `center`, so that heading is visible in the colors.
    Compass { center: [f64; 2] },
    Checker { a: Rgb, b: Rgb, cell: f64 },
    Solid(Rgb),
}

/// Axis-aligned box. An `enclosure` is seen from inside (room or street
/// block boundary); other boxes are solid obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
    pub enclosure: bool,
    pub sides: Material,
    pub top: Material,
    pub bottom: Material,
}

impl SceneBox {
    pub fn obstacle(min: Vec3, max: Vec3, color: Rgb) -> Self {
        let m = Material::Checker {
            a: color,
            b: color.map(|c| c * 0.75),
            cell: 1.0,
        };
        Self {
            min,
            max,
            enclosure: false,
            sides: m.clone(),
            top: m.clone(),
            bottom: m,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Ray parameter and outward face normal axis (0..3, sign) of the first
    /// visible surface, if any.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let (mut near_axis, mut far_axis) = (0, 0);
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut t0, mut t1) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > t_near {
                t_near = t0;
                near_axis = i;
            }
            if t1 < t_far {
                t_far = t1;
                far_axis = i;
            }
        }
        if t_near > t_far || t_far <= 0.0 {
            return None;
        }
        if self.enclosure {
            // exit face; the normal facing the viewer points against the ray
            Some((t_far, far_axis, -dir[far_axis].signum()))
        } else if t_near > 0.0 {
            Some((t_near, near_axis, -dir[near_axis].signum()))
        } else {
            None
        }
    }

    fn shade(&self, p: &Vec3, axis: usize, normal_sign: f64) -> Rgb {
        let material = match (axis, normal_sign > 0.0) {
            (2, true) if self.enclosure => &self.bottom,
            (2, false) if self.enclosure => &self.top,
            (2, true) => &self.top,
            (2, false) => &self.bottom,
            _ => &self.sides,
        };
        // coordinate along the face, horizontal
        let along = if axis == 0 { p.y } else { p.x };
        match material {
            Material::Solid(c) => *c,
            Material::Checker { a, b, cell } => {
                let (s, t) = if axis == 2 { (p.x, p.y) } else { (along, p.z) };
                let parity = ((s / cell).floor() + (t / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Material::Compass { center } => {
                let az = (p.y - center[1]).atan2(p.x - center[0]);
                let hue = az.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
                let base = hsv_to_rgb(hue, 0.65, 0.9);
                let row = (p.z / 1.0).floor();
                let offset = if (row as i64).rem_euclid(2) == 0 { 0.0 } else { 1.0 };
                let fx = (along + offset).rem_euclid(2.0);
                let fz = p.z.rem_euclid(1.0);
                let mortar = fx < 0.2 || fz < 0.12;
                let shade = if mortar { 0.45 } else { 1.0 - 0.1 * (row % 3.0) };
                base.map(|c| c * shade)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Nearest surface hit along `origin + t * dir`, returning `(t, color)`.
pub fn raycast(boxes: &[SceneBox], origin: &Vec3, dir: &Vec3) -> Option<(f64, Rgb)> {
    let mut best: Option<(f64, usize, usize, f64)> = None;
    for (b, sbox) in boxes.iter().enumerate() {
        if let Some((t, axis, sign)) = sbox.intersect(origin, dir) {
            if best.map_or(true, |(bt, ..)| t < bt) {
                best = Some((t, b, axis, sign));
            }
        }
    }
    best.map(|(t, b, axis, sign)| {
        let p = origin + dir * t;
        (t, boxes[b].shade(&p, axis, sign))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    BiasedStreet,
    UniformOrbit,
    Indoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Trajectory {
    /// Four straight walks around a block, each facing its walking direction
    /// (headings 0, 90, 180, 270 degrees). Test views are placed on the same
    /// walks with headings spread uniformly by `test_yaw_spread_deg`.
    BiasedStreet {
        half_length: f64,
        offset: f64,
        height: f64,
        lateral_sigma: f64,
        yaw_sigma_deg: f64,
        test_yaw_spread_deg: f64,
    },
    /// Cameras on a ring with uniformly distributed heading.
    UniformOrbit {
        radius: f64,
        radial_sigma: f64,
        height: f64,
    },
    /// Hand-held style loop through a room, looking roughly at its center.
    RoomLoop {
        radius_x: f64,
        radius_y: f64,
        height: f64,
        look_sigma_deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub boxes: Vec<SceneBox>,
    pub trajectory: Trajectory,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub train_count: usize,
    pub test_count: usize,
    /// Fraction of pixels kept in the sparse "MVS-like" depth.
    pub keep_rate: f64,
    /// Relative sigma of the Gaussian noise added to the affine dense depth.
    pub dense_noise: f64,
    pub descriptor_dim: usize,
    pub pitch_roll_sigma_deg: f64,
}

impl SceneSpec {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "biased-street" => Ok(Self::biased_street()),
            "uniform-orbit" => Ok(Self::uniform_orbit()),
            "indoor" => Ok(Self::indoor()),
            other => Err(Error::InvalidConfig(format!("unknown scene preset {other:?}"))),
        }
    }

    fn street_boxes() -> Vec<SceneBox> {
        let enclosure = SceneBox {
            min: Vec3::new(-20.0, -20.0, 0.0),
            max: Vec3::new(20.0, 20.0, 10.0),
            enclosure: true,
            sides: Material::Compass { center: [0.0, 0.0] },
            top: Material::Checker {
                a: [0.72, 0.82, 0.95],
                b: [0.8, 0.88, 0.98],
                cell: 5.0,
            },
            bottom: Material::Checker {
                a: [0.35, 0.35, 0.33],
                b: [0.55, 0.55, 0.52],
                cell: 2.0,
            },
        };
        vec![
            enclosure,
            SceneBox::obstacle(Vec3::new(-3.0, -3.0, 0.0), Vec3::new(3.0, 3.0, 6.0), [0.8, 0.75, 0.6]),
            SceneBox::obstacle(Vec3::new(14.0, 14.0, 0.0), Vec3::new(17.0, 17.0, 4.0), [0.3, 0.5, 0.8]),
            SceneBox::obstacle(Vec3::new(-17.0, 13.0, 0.0), Vec3::new(-14.0, 16.0, 3.0), [0.8, 0.3, 0.3]),
            SceneBox::obstacle(Vec3::new(13.0, -17.0, 0.0), Vec3::new(16.0, -14.0, 5.0), [0.3, 0.7, 0.35]),
            SceneBox::obstacle(Vec3::new(-16.0, -16.0, 0.0), Vec3::new(-13.0, -13.0, 2.5), [0.7, 0.5, 0.8]),
        ]
    }

    /// Street-like loop whose headings cluster at four 90-degree modes.
    pub fn biased_street() -> Self {
        Self {
            kind: SceneKind::BiasedStreet,
            boxes: Self::street_boxes(),
            trajectory: Trajectory::BiasedStreet {
                half_length: 11.0,
                offset: 8.0,
                height: 1.6,
                lateral_sigma: 0.3,
                yaw_sigma_deg: 2.0,
                test_yaw_spread_deg: 45.0,
            },
            width: 64,
            height: 64,
            hfov_deg: 65.0,
            train_count: 400,
            test_count: 100,
            keep_rate: 0.2,
            dense_noise: 0.01,
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
            pitch_roll_sigma_deg: 1.0,
        }
    }

    pub fn uniform_orbit() -> Self {
        Self {
            kind: SceneKind::UniformOrbit,
            trajectory: Trajectory::UniformOrbit {
                radius: 9.0,
                radial_sigma: 0.5,
                height: 1.6,
            },
            ..Self::biased_street()
        }
    }

    pub fn indoor() -> Self {
        let room = SceneBox {
            min: Vec3::new(-4.0, -3.0, 0.0),
            max: Vec3::new(4.0, 3.0, 3.0),
            enclosure: true,
            sides: Material::Compass { center: [0.0, 0.0] },
            top: Material::Solid([0.92, 0.92, 0.9]),
            bottom: Material::Checker {
                a: [0.55, 0.4, 0.3],
                b: [0.45, 0.32, 0.25],
                cell: 0.5,
            },
        };
        Self {
            kind: SceneKind::Indoor,
            boxes: vec![
                room,
                SceneBox::obstacle(Vec3::new(-0.6, -0.4, 0.0), Vec3::new(0.6, 0.4, 0.75), [0.6, 0.45, 0.3]),
                SceneBox::obstacle(Vec3::new(3.2, -2.8, 0.0), Vec3::new(3.9, -1.0, 2.0), [0.3, 0.4, 0.7]),
                SceneBox::obstacle(Vec3::new(-3.9, 1.6, 0.0), Vec3::new(-2.4, 2.9, 1.0), [0.7, 0.7, 0.3]),
            ],
            trajectory: Trajectory::RoomLoop {
                radius_x: 2.2,
                radius_y: 1.6,
                height: 1.4,
                look_sigma_deg: 20.0,
            },
            width: 64,
            height: 64,
            hfov_deg: 60.0,
            train_count: 200,
            test_count: 50,
            keep_rate: 0.8,
            dense_noise: 0.01,
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
            pitch_roll_sigma_deg: 3.0,
        }
    }

    pub fn with_counts(mut self, train: usize, test: usize) -> Self {
        self.train_count = train;
        self.test_count = test;
        self
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }

    /// Union bounding box of all geometry.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for b in &self.boxes {
            lo = lo.inf(&b.min);
            hi = hi.sup(&b.max);
        }
        (lo, hi)
    }

    fn sample_pose(&self, split: Split, i: usize, n: usize, rng: &mut ChaCha8Rng) -> Pose {
        let gauss = |rng: &mut ChaCha8Rng, s: f64| -> f64 {
            if s > 0.0 {
                Normal::new(0.0, s).unwrap().sample(rng)
            } else {
                0.0
            }
        };
        let tilt = self.pitch_roll_sigma_deg.to_radians();
        match self.trajectory {
            Trajectory::BiasedStreet {
                half_length,
                offset,
                height,
                lateral_sigma,
                yaw_sigma_deg,
                test_yaw_spread_deg,
            } => {
                let walk = i % 4;
                let heading = walk as f64 * std::f64::consts::FRAC_PI_2;
                let per_walk = n.div_ceil(4).max(1);
                let s = match split {
                    Split::Train => {
                        let j = i / 4;
                        let spacing = 2.0 * half_length / per_walk as f64;
                        -half_length + spacing * (j as f64 + 0.5) + gauss(rng, 0.2 * spacing)
                    }
                    Split::Test => rng.gen_range(-half_length..half_length),
                };
                let fwd = Vec3::new(heading.cos(), heading.sin(), 0.0);
                let left = Vec3::new(-heading.sin(), heading.cos(), 0.0);
                let lateral = gauss(rng, lateral_sigma);
                let mut center = fwd * s - left * (offset + lateral);
                center.z = height + gauss(rng, 0.05);
                let yaw = match split {
                    Split::Train => heading + gauss(rng, yaw_sigma_deg.to_radians()),
                    Split::Test => {
                        let spread = test_yaw_spread_deg.to_radians();
                        heading + rng.gen_range(-spread..spread)
                    }
                };
                Pose::from_yaw_pitch_roll(yaw, gauss(rng, tilt), gauss(rng, tilt), center)
            }
            Trajectory::UniformOrbit {
                radius,
                radial_sigma,
                height,
            } => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = radius + gauss(rng, radial_sigma);
                let center = Vec3::new(r * theta.cos(), r * theta.sin(), height + gauss(rng, 0.05));
                let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
                Pose::from_yaw_pitch_roll(yaw, gauss(rng, tilt), gauss(rng, tilt), center)
            }
            Trajectory::RoomLoop {
                radius_x,
                radius_y,
                height,
                look_sigma_deg,
            } => {
                let theta = match split {
                    Split::Train => std::f64::consts::TAU * (i as f64 + 0.5) / n.max(1) as f64,
                    Split::Test => rng.gen_range(0.0..std::f64::consts::TAU),
                } + gauss(rng, 0.02);
                let center = Vec3::new(
                    radius_x * theta.cos() + gauss(rng, 0.1),
                    radius_y * theta.sin() + gauss(rng, 0.1),
                    height + gauss(rng, 0.1),
                );
                // look across the room, past its center
                let yaw = (-center.y).atan2(-center.x) + gauss(rng, look_sigma_deg.to_radians());
                Pose::from_yaw_pitch_roll(yaw, gauss(rng, tilt), gauss(rng, tilt), center)
            }
        }
    }
}

/// Ray-cast color and z-depth for every pixel of a camera.
pub(crate) fn render(boxes: &[SceneBox], k: &Intrinsics, pose: &Pose) -> (ImageBuffer, DepthMap) {
    let rot = pose.rotation_matrix();
    let mut image = ImageBuffer::new(k.width, k.height, SKY);
    let mut depth = DepthMap::invalid(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // unit-z camera ray: the hit parameter is the z-depth
            let dir = rot * camera_ray(PixelCoord::new(u as i64, v as i64), k);
            if let Some((t, rgb)) = raycast(boxes, &pose.center, &dir) {
                let i = image.index(u, v);
                image.data[i] = rgb;
                // stored depths are representable in the f32 raster format
                depth.set(i, t as f32 as f64);
            }
        }
    }
    image.quantize_8bit();
    (image, depth)
}

/// Deterministically generates a scene database from `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneDatabase> {
    if spec.boxes.is_empty() {
        return Err(Error::EmptyScene);
    }
    if spec.train_count == 0 {
        return Err(Error::InvalidConfig("scene needs at least one train view".into()));
    }
    if !(0.0..=1.0).contains(&spec.keep_rate) || !(spec.dense_noise >= 0.0) {
        return Err(Error::InvalidConfig("keep_rate must be in [0,1], dense_noise >= 0".into()));
    }
    let k = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.train_count + spec.test_count);
    let splits = std::iter::repeat(Split::Train)
        .take(spec.train_count)
        .enumerate()
        .chain(std::iter::repeat(Split::Test).take(spec.test_count).enumerate());
    for (n, (i, split)) in splits.enumerate() {
        let count = match split {
            Split::Train => spec.train_count,
            Split::Test => spec.test_count,
        };
        let pose = spec.sample_pose(split, i, count, &mut rng);
        let (image, true_depth) = render(&spec.boxes, &k, &pose);

        let mut sparse = DepthMap::invalid(k.width, k.height);
        for idx in 0..true_depth.len() {
            let keep = rng.gen::<f64>() < spec.keep_rate;
            if let (true, Some(d)) = (keep, true_depth.get(idx)) {
                sparse.set(idx, d);
            }
        }

        let min_depth = true_depth
            .depth
            .iter()
            .zip(&true_depth.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .fold(f64::INFINITY, f64::min);
        let scale = rng.gen_range(0.5..=2.0);
        let shift = if min_depth.is_finite() {
            rng.gen_range(-0.2..=0.2) * min_depth
        } else {
            0.0
        };
        let mut dense = DepthMap::invalid(k.width, k.height);
        for idx in 0..true_depth.len() {
            if let Some(d) = true_depth.get(idx) {
                let clean = scale * d + shift;
                let noise = if spec.dense_noise > 0.0 {
                    Normal::new(0.0, spec.dense_noise * scale * d).unwrap().sample(&mut rng)
                } else {
                    0.0
                };
                let value = clean + noise;
                if value > 0.0 {
                    dense.set(idx, value);
                }
            }
        }

        let descriptor = compute_descriptor(&image, spec.descriptor_dim);
        records.push(SceneRecord {
            id: format!("{n:05}"),
            split,
            image,
            sparse_depth: sparse,
            dense_depth_affine: dense,
            pose,
            intrinsics: k,
            descriptor,
            true_depth: Some(true_depth),
            corruption: Some(AffineCorruption {
                scale,
                shift,
                noise_rel_sigma: spec.dense_noise,
            }),
        });
    }
    SceneDatabase::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{unproject, yaw_deg};

    fn small_street() -> SceneSpec {
        SceneSpec::biased_street().with_counts(24, 8).with_size(32, 24)
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_street();
        let a = generate_scene(&spec, 7).unwrap();
        let b = generate_scene(&spec, 7).unwrap();
        assert_eq!(a.records(), b.records());
        let c = generate_scene(&spec, 8).unwrap();
        assert_ne!(a.record(0).pose, c.record(0).pose);
    }

    #[test]
    fn empty_scene_rejected() {
        let mut spec = small_street();
        spec.boxes.clear();
        assert!(matches!(generate_scene(&spec, 1), Err(Error::EmptyScene)));
    }

    #[test]
    fn keep_rate_one_gives_dense_sparse_depth() {
        let mut spec = small_street().with_counts(3, 0);
        spec.keep_rate = 1.0;
        let db = generate_scene(&spec, 3).unwrap();
        for r in db.records() {
            assert_eq!(&r.sparse_depth, r.true_depth.as_ref().unwrap());
        }
    }

    #[test]
    fn principal_pixel_depth_matches_analytic_distance() {
        // camera inside the street box facing +x; nothing between it and the
        // east wall at x = 20 along the principal ray
        let spec = SceneSpec::biased_street().with_size(32, 32);
        let k = spec.intrinsics().unwrap();
        assert_eq!((k.cx, k.cy), (16.0, 16.0));
        let pose = Pose::from_yaw_pitch_roll(0.0, 0.0, 0.0, Vec3::new(-4.5, -8.0, 1.6));
        let (_, depth) = render(&spec.boxes, &k, &pose);
        let d = depth.at(PixelCoord::new(16, 16)).unwrap();
        assert_eq!(d, (20.0f64 - -4.5) as f32 as f64);

        // facing the central block from the south: face at y = -3
        let pose = Pose::from_yaw_pitch_roll(
            std::f64::consts::FRAC_PI_2,
            0.0,
            0.0,
            Vec3::new(0.5, -8.0, 1.6),
        );
        let (_, depth) = render(&spec.boxes, &k, &pose);
        assert_eq!(depth.at(PixelCoord::new(16, 16)).unwrap(), 5.0);
    }

    #[test]
    fn sparse_points_lie_inside_scene_bounds() {
        let spec = small_street();
        let (lo, hi) = spec.bounds();
        let db = generate_scene(&spec, 11).unwrap();
        for r in db.records() {
            for v in 0..r.intrinsics.height {
                for u in 0..r.intrinsics.width {
                    let p = PixelCoord::new(u as i64, v as i64);
                    if let Some(d) = r.sparse_depth.at(p) {
                        let x = unproject(p, d, &r.intrinsics, &r.pose).unwrap();
                        for i in 0..3 {
                            assert!(x[i] >= lo[i] - 1e-4 && x[i] <= hi[i] + 1e-4, "{x:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn street_train_headings_cluster_at_right_angles() {
        let db = generate_scene(&small_street().with_counts(40, 0), 7).unwrap();
        for (i, r) in db.records().iter().enumerate() {
            let expected = (i % 4) as f64 * 90.0;
            let err = crate::geometry::wrap_deg(yaw_deg(&r.pose.rotation) - expected);
            assert!(err.abs() < 10.0, "record {i}: {err}");
        }
    }

    #[test]
    fn dense_depth_is_affine_in_true_depth() {
        let mut spec = small_street().with_counts(2, 0);
        spec.dense_noise = 0.0;
        let db = generate_scene(&spec, 5).unwrap();
        for r in db.records() {
            let c = r.corruption.unwrap();
            assert!((0.5..=2.0).contains(&c.scale));
            let truth = r.true_depth.as_ref().unwrap();
            for i in 0..truth.len() {
                if let (Some(d), Some(a)) = (truth.get(i), r.dense_depth_affine.get(i)) {
                    assert!((c.scale * d + c.shift - a).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cameras_start_outside_obstacles() {
        for spec in [SceneSpec::biased_street(), SceneSpec::uniform_orbit(), SceneSpec::indoor()] {
            let spec = spec.with_counts(60, 20).with_size(8, 8);
            let db = generate_scene(&spec, 2).unwrap();
            for r in db.records() {
                assert!(spec.boxes[0].contains(&r.pose.center));
                for b in &spec.boxes[1..] {
                    assert!(!b.contains(&r.pose.center));
                }
            }
        }
    }
}
