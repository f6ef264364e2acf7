//! Hand-crafted global image descriptor used for retrieval.
//!
//! Layout before folding: an 8x8 grid of mean colors (192 values) followed by
//! a 4x4 grid of 4-bin gradient-orientation histograms (64 values). The two
//! parts are normalized separately and weighted before the final L2 norm.

use super::ImageBuffer;

pub const DEFAULT_DESCRIPTOR_DIM: usize = 256;

const COLOR_GRID: usize = 8;
const GRAD_GRID: usize = 4;
const ORIENT_BINS: usize = 4;
const COLOR_WEIGHT: f64 = 0.85;

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn cell_of(x: u32, extent: u32, cells: usize) -> usize {
    ((x as usize * cells) / extent as usize).min(cells - 1)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Computes a unit-length descriptor of length `dim`. The raw 256-value
/// feature is folded modulo `dim` (or zero-padded when `dim > 256`).
pub fn compute_descriptor(img: &ImageBuffer, dim: usize) -> Vec<f64> {
    assert!(dim > 0, "descriptor dimension must be positive");
    let (w, h) = (img.width, img.height);
    let mut color = vec![0.0; COLOR_GRID * COLOR_GRID * 3];
    let mut counts = vec![0usize; COLOR_GRID * COLOR_GRID];
    let mut grad = vec![0.0; GRAD_GRID * GRAD_GRID * ORIENT_BINS];

    for v in 0..h {
        for u in 0..w {
            let c = img.get(u, v);
            let cell = cell_of(v, h, COLOR_GRID) * COLOR_GRID + cell_of(u, w, COLOR_GRID);
            counts[cell] += 1;
            for ch in 0..3 {
                color[cell * 3 + ch] += c[ch];
            }
            if u == 0 || v == 0 || u + 1 == w || v + 1 == h {
                continue;
            }
            let gx = luminance(img.get(u + 1, v)) - luminance(img.get(u - 1, v));
            let gy = luminance(img.get(u, v + 1)) - luminance(img.get(u, v - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            // unsigned orientation in [0, pi)
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            let bin = ((theta / std::f64::consts::PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
            let gcell = cell_of(v, h, GRAD_GRID) * GRAD_GRID + cell_of(u, w, GRAD_GRID);
            grad[gcell * ORIENT_BINS + bin] += mag;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            for ch in 0..3 {
                color[cell * 3 + ch] /= n as f64;
            }
        }
    }
    normalize(&mut color);
    normalize(&mut grad);
    let wc = COLOR_WEIGHT.sqrt();
    let wg = (1.0 - COLOR_WEIGHT).sqrt();

    let mut out = vec![0.0; dim];
    let raw = color.iter().map(|x| x * wc).chain(grad.iter().map(|x| x * wg));
    for (i, x) in raw.enumerate() {
        out[i % dim] += x;
    }
    normalize(&mut out);
    if out.iter().all(|&x| x == 0.0) {
        let c = 1.0 / (dim as f64).sqrt();
        out.iter_mut().for_each(|x| *x = c);
    }
    out
}
