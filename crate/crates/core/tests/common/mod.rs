#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use posesynth::dataset::{DepthMap, ImageBuffer};
use posesynth::geometry::{Dehomogenize, Vec3};
use posesynth::synthesis::{reproject, SourceView, SynthesisResult};
use posesynth::regressor::{sample_param_indices, Arch, LossConfig, Mode, Regressor, RegressorConfig};
use posesynth::{Intrinsics, Pose, Quaternion, RelativePose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_quaternion<R: Rng>(rng: &mut R) -> Quaternion {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return Quaternion::new(v[0] / n, v[1] / n, v[2] / n, v[3] / n);
        }
    }
}

pub fn random_pose<R: Rng>(rng: &mut R, extent: f64) -> Pose {
    let c = Vec3::new(
        rng.gen_range(-extent..extent),
        rng.gen_range(-extent..extent),
        rng.gen_range(-extent..extent),
    );
    Pose::new(random_quaternion(rng), c)
}

/// Rotation matrix from a unit quaternion, written out independently.
pub fn rot(q: &Quaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `K [R^T | -R^T c]` for a camera-to-world pose.
pub fn projection_matrix(k: &Intrinsics, pose: &Pose) -> Matrix3x4<f64> {
    let kk = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    let rt = rot(&pose.rotation).transpose();
    let t = -rt * Vector3::new(pose.center.x, pose.center.y, pose.center.z);
    let mut ext = Matrix3x4::zeros();
    ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    ext.set_column(3, &t);
    kk * ext
}

/// Pixel and depth of world point `x`, or `None` when behind or outside.
pub fn oracle_project(k: &Intrinsics, pose: &Pose, x: &Vec3) -> Option<(usize, usize, f64)> {
    let h = projection_matrix(k, pose) * Vector4::new(x.x, x.y, x.z, 1.0);
    if !(h.z > 0.0) {
        return None;
    }
    let u = (h.x / h.z + 1e-9).floor();
    let v = (h.y / h.z + 1e-9).floor();
    if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
        return None;
    }
    Some((u as usize, v as usize, h.z))
}

/// A source camera with three valid depth pixels and a nearby target.
pub struct MicroScene {
    pub k: Intrinsics,
    pub source: Pose,
    pub target: Pose,
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub points: Vec<(Vec3, [f64; 3])>,
}

pub fn micro_scene<R: Rng>(rng: &mut R) -> MicroScene {
    let k = Intrinsics::new(6.0, 6.0, 4.0, 4.0, 8, 8).unwrap();
    let source = Pose::new(random_quaternion(rng), Vec3::zeros());
    // small motion so the points usually land in view, often on one pixel
    let dq = Quaternion::new(1.0, rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05))
        .normalize()
        .unwrap();
    let jitter = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let target = Pose::new(source.rotation.mul(&dq), jitter);
    let mut image = ImageBuffer::new(8, 8, [0.0; 3]);
    let mut depth = DepthMap::invalid(8, 8);
    let mut points = Vec::new();
    let mut used = Vec::new();
    while points.len() < 3 {
        // cluster the pixels so occlusions are common
        let (u, v) = (rng.gen_range(3..6u32), rng.gen_range(3..6u32));
        if used.contains(&(u, v)) {
            continue;
        }
        used.push((u, v));
        let d = rng.gen_range(1.0..5.0);
        let color = [rng.gen(), rng.gen(), rng.gen()];
        image.set(u, v, color);
        let i = (v * 8 + u) as usize;
        depth.set(i, d);
        let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0) * d;
        let w = rot(&source.rotation) * ray;
        points.push((Vec3::new(w.x, w.y, w.z) + source.center, color));
    }
    MicroScene {
        k,
        source,
        target,
        image,
        depth,
        points,
    }
}

/// Library warp of a micro scene onto a white canvas.
pub fn warp_micro(s: &MicroScene) -> ImageBuffer {
    let mut canvas = SynthesisResult::blank(&s.k, [1.0; 3]);
    let view = SourceView {
        image: &s.image,
        depth: &s.depth,
        intrinsics: &s.k,
        pose: &s.source,
    };
    reproject(&view, &s.target, &s.k, Dehomogenize::Floor, &mut canvas);
    canvas.image
}

/// Sorted painter: draw far to near so the nearest point ends on top.
pub fn painter_micro(s: &MicroScene) -> ImageBuffer {
    let mut hits: Vec<(f64, usize, (usize, usize), [f64; 3])> = s
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, (x, c))| oracle_project(&s.k, &s.target, x).map(|(u, v, z)| (z, i, (u, v), *c)))
        .collect();
    // equal depths: the earlier source pixel keeps the pixel, so paint it last
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut img = ImageBuffer::new(8, 8, [1.0; 3]);
    for (_, _, (u, v), c) in hits {
        img.set(u as u32, v as u32, c);
    }
    img
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central differences against backprop for `count` random parameters of a
/// desk-size regressor on a random batch of two 64x64 pairs.
pub fn gradient_check(arch: Arch, count: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Regressor::new(RegressorConfig::desk().with_arch(arch), seed).unwrap();
    let imgs: Vec<ImageBuffer> =
        (0..4).map(|_| ImageBuffer::from_fn(64, 64, |_, _| [rng.gen(), rng.gen(), rng.gen()])).collect();
    let (q, n) = ([&imgs[0], &imgs[1]], [&imgs[2], &imgs[3]]);
    let targets: Vec<RelativePose> = (0..2)
        .map(|_| RelativePose {
            rotation: random_quaternion(&mut rng),
            translation: Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        })
        .collect();
    let loss_cfg = LossConfig::outdoor();
    // same dropout masks on every evaluation
    let eval = |m: &Regressor| {
        m.loss_and_grads(&q, &n, &targets, &loss_cfg, Mode::Train, &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
    };
    let analytic = eval(&model).grads;
    let h = 1e-6;
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (t, i) in sample_param_indices(model.params(), count, seed) {
        let x0 = model.params().tensors[t].value.data[i];
        model.params_mut().tensors[t].value.data[i] = x0 + h;
        let up = eval(&model).loss;
        model.params_mut().tensors[t].value.data[i] = x0 - h;
        let down = eval(&model).loss;
        model.params_mut().tensors[t].value.data[i] = x0;
        let num = (up - down) / (2.0 * h);
        let a = analytic[t][i];
        let diff = (num - a).abs();
        // the loss is O(10), so round-off in the difference quotient is O(1e-9);
        // the 1e-5 floor keeps near-zero gradients from dividing noise by noise
        let rel = diff / num.abs().max(a.abs()).max(1e-5);
        out.checked += 1;
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = format!("{}[{i}]: numeric {num:.6e} analytic {a:.6e}", model.params().tensors[t].name);
        }
    }
    out
}
