//! Tape-based reverse-mode differentiation over coarse tensor ops.
//!
//! Every op appends a node holding its value and whatever it needs for the
//! backward pass; nodes are topologically ordered by construction, so
//! [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix-shaped tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-major `c = op(a) * op(b) + beta * c` with `op(a)` of shape m x k and
/// `op(b)` of shape k x n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reached through these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Source pixel of patch entry `(ky, kx)` for output `(oy, ox)`.
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let plane = ho * wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            cols[row * plane + oy * wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some((y, x)) => img[(ci * self.h + y) * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let plane = ho * wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            if let Some((y, x)) = self.src(oy, ox, ky, kx) {
                                img[(ci * self.h + y) * self.w + x] += cols[row * plane + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Relu(Var),
    Add(Var, Var),
    GlobalAvgPool { x: Var, hw: usize },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    /// Normalization over rows (batch norm, train or frozen statistics) or
    /// over columns (layer norm); `xhat` and `inv_std` saved for backward.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    Attention { qkv: Var, seq: usize, heads: usize, probs: Vec<f64> },
    Mask { x: Var, mask: Vec<f64> },
    QuatNormalize { x: Var },
    L1 { x: Var, target: Vec<f64>, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    BatchTrain,
    BatchFrozen,
    Layer,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf node (input, constant or parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `x [m, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, din, dout) = (xv.rows(), xv.cols(), wv.rows());
        assert_eq!(wv.cols(), din, "linear weight shape");
        assert_eq!(bv.len(), dout, "linear bias shape");
        let mut y = vec![0.0; m * dout];
        for r in 0..m {
            y[r * dout..(r + 1) * dout].copy_from_slice(&bv.data);
        }
        gemm(m, din, dout, &xv.data, false, &wv.data, true, &mut y, 1.0);
        self.push(Tensor::new(vec![m, dout], y), Op::Linear { x, w, b })
    }

    /// 2-D convolution of `x [n, cin, h, w]` with `w [cout, cin*k*k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 4, "conv input must be [n, c, h, w]");
        let wv = self.value(w);
        let geom = ConvGeom {
            n: xv.shape[0],
            cin: xv.shape[1],
            h: xv.shape[2],
            w: xv.shape[3],
            cout: wv.rows(),
            k,
            stride,
            pad,
        };
        assert_eq!(wv.cols(), geom.patch(), "conv weight shape");
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let plane = ho * wo;
        let kk = geom.patch();
        let in_sz = geom.cin * geom.h * geom.w;
        let out_sz = geom.cout * plane;
        let mut cols = vec![0.0; geom.n * kk * plane];
        let mut y = vec![0.0; geom.n * out_sz];
        let bv = &self.value(b).data;
        for i in 0..geom.n {
            let c = &mut cols[i * kk * plane..(i + 1) * kk * plane];
            geom.im2col(&xv.data[i * in_sz..(i + 1) * in_sz], c);
            let out = &mut y[i * out_sz..(i + 1) * out_sz];
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(bv[co]);
            }
            gemm(geom.cout, kk, plane, &wv.data, false, c, false, out, 1.0);
        }
        let shape = vec![geom.n, geom.cout, ho, wo];
        self.push(Tensor::new(shape, y), Op::Conv2d { x, w, b, geom, cols })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.data.iter().map(|&v| v.max(0.0)).collect();
        self.push(Tensor::new(xv.shape.clone(), y), Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shapes");
        let y = av.data.iter().zip(&bv.data).map(|(p, q)| p + q).collect();
        self.push(Tensor::new(av.shape.clone(), y), Op::Add(a, b))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.shape[0], xv.shape[1]);
        let hw = xv.shape[2] * xv.shape[3];
        let y = xv.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::new(vec![n, c], y), Op::GlobalAvgPool { x, hw })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), m, "concat rows");
        let mut y = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            y.extend_from_slice(&av.data[r * p..(r + 1) * p]);
            y.extend_from_slice(&bv.data[r * q..(r + 1) * q]);
        }
        self.push(Tensor::new(vec![m, p + q], y), Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat cols");
        let mut y = av.data.clone();
        y.extend_from_slice(&bv.data);
        let shape = vec![av.rows() + bv.rows(), av.cols()];
        self.push(Tensor::new(shape, y), Op::ConcatRows(a, b))
    }

    /// Rows `idx` of a matrix, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut y = Vec::with_capacity(idx.len() * c);
        for &r in &idx {
            y.extend_from_slice(&xv.data[r * c..(r + 1) * c]);
        }
        self.push(Tensor::new(vec![idx.len(), c], y), Op::GatherRows { x, idx })
    }

    /// Batch norm over the rows of `x [m, f]` using the batch's statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (m, f) = (xv.rows(), xv.cols());
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..m {
            for j in 0..f {
                mean[j] += xv.data[r * f + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for r in 0..m {
            for j in 0..f {
                var[j] += (xv.data[r * f + j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.norm_apply(x, gamma, beta, &mean, inv_std, NormKind::BatchTrain);
        (out, BatchStats { mean, var })
    }

    /// Batch norm with fixed statistics: a per-feature affine map.
    pub fn batch_norm_frozen(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.norm_apply(x, gamma, beta, mean, inv_std, NormKind::BatchFrozen)
    }

    fn norm_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, kind: NormKind) -> Var {
        let xv = self.value(x);
        let (m, f) = (xv.rows(), xv.cols());
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; m * f];
        let mut y = vec![0.0; m * f];
        for r in 0..m {
            for j in 0..f {
                let i = r * f + j;
                xhat[i] = (xv.data[i] - mean[j]) * inv_std[j];
                y[i] = g[j] * xhat[i] + b[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(
            Tensor::new(shape, y),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
        )
    }

    /// Layer norm over the columns of each row of `x [m, f]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, f) = (xv.rows(), xv.cols());
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; m * f];
        let mut y = vec![0.0; m * f];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xv.data[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            inv_std[r] = 1.0 / (var + eps).sqrt();
            for j in 0..f {
                let i = r * f + j;
                xhat[i] = (row[j] - mean) * inv_std[r];
                y[i] = g[j] * xhat[i] + b[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(
            Tensor::new(shape, y),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention. `qkv [t, 3e]` holds
    /// consecutive sequences of length `seq`; returns `[t, e]`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Var {
        let v = self.value(qkv);
        let (t, e3) = (v.rows(), v.cols());
        let e = e3 / 3;
        assert!(e3 == 3 * e && e % heads == 0 && t % seq == 0, "attention shapes");
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; (t / seq) * heads * seq * seq];
        let mut y = vec![0.0; t * e];
        let d = &v.data;
        let mut scores = vec![0.0; seq];
        for s in 0..t / seq {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &d[(s * seq + i) * e3 + off..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &d[(s * seq + j) * e3 + e + off..][..dh];
                        *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|x| (x - mx).exp()).sum();
                    let p = &mut probs[((s * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..seq {
                        p[j] = (scores[j] - mx).exp() / z;
                        let vj = &d[(s * seq + j) * e3 + 2 * e + off..][..dh];
                        let out = &mut y[(s * seq + i) * e + off..][..dh];
                        for c in 0..dh {
                            out[c] += p[j] * vj[c];
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![t, e], y), Op::Attention { qkv, seq, heads, probs })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let y = xv.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push(Tensor::new(xv.shape.clone(), y), Op::Mask { x, mask })
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mask(x, mask)
    }

    /// Row-wise unit quaternion with `w >= 0`.
    pub fn quat_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 4, "quaternion rows must have 4 entries");
        let mut y = xv.data.clone();
        for row in y.chunks_mut(4) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if row[0] < 0.0 { -1.0 } else { 1.0 };
            row.iter_mut().for_each(|v| *v *= s / n);
        }
        self.push(Tensor::new(xv.shape.clone(), y), Op::QuatNormalize { x })
    }

    /// `scale * sum |x - target|` as a scalar.
    pub fn l1(&mut self, x: Var, target: Vec<f64>, scale: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(target.len(), xv.len(), "l1 target shape");
        let s: f64 = xv.data.iter().zip(&target).map(|(a, t)| (a - t).abs()).sum();
        self.push(Tensor::scalar(scale * s), Op::L1 { x, target, scale })
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn take(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Vec<f64> {
        grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Input gradients are taken out of `grads`, accumulated and put back,
        // one input at a time.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {{
                let v = $v;
                let mut $g = self.take(grads, v);
                $body
                grads[v.0] = Some($g);
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                with_grad!(*x, |gx| {
                    gemm(m, dout, din, gy, false, &wv.data, false, &mut gx, 1.0);
                });
                with_grad!(*w, |gw| {
                    gemm(dout, m, din, gy, true, &xv.data, false, &mut gw, 1.0);
                });
                with_grad!(*b, |gb| {
                    for r in 0..m {
                        for j in 0..dout {
                            gb[j] += gy[r * dout + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let wv = self.value(*w);
                let plane = geom.out_h() * geom.out_w();
                let kk = geom.patch();
                let in_sz = geom.cin * geom.h * geom.w;
                let out_sz = geom.cout * plane;
                with_grad!(*w, |gw| {
                    for n in 0..geom.n {
                        let go = &gy[n * out_sz..(n + 1) * out_sz];
                        let c = &cols[n * kk * plane..(n + 1) * kk * plane];
                        gemm(geom.cout, plane, kk, go, false, c, true, &mut gw, 1.0);
                    }
                });
                with_grad!(*b, |gb| {
                    for chunk in gy.chunks(out_sz) {
                        for (co, ch) in chunk.chunks(plane).enumerate() {
                            gb[co] += ch.iter().sum::<f64>();
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    let mut dcols = vec![0.0; kk * plane];
                    for n in 0..geom.n {
                        let go = &gy[n * out_sz..(n + 1) * out_sz];
                        gemm(kk, geom.cout, plane, &wv.data, true, go, false, &mut dcols, 0.0);
                        geom.col2im(&dcols, &mut gx[n * in_sz..(n + 1) * in_sz]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                with_grad!(*x, |gx| {
                    for j in 0..gy.len() {
                        if xv[j] > 0.0 {
                            gx[j] += gy[j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |g| {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    });
                }
            }
            Op::GlobalAvgPool { x, hw } => {
                with_grad!(*x, |gx| {
                    for (j, g) in gy.iter().enumerate() {
                        for v in &mut gx[j * hw..(j + 1) * hw] {
                            *v += g / *hw as f64;
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let m = self.value(*a).rows();
                with_grad!(*a, |ga| {
                    for r in 0..m {
                        for j in 0..p {
                            ga[r * p + j] += gy[r * (p + q) + j];
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..m {
                        for j in 0..q {
                            gb[r * q + j] += gy[r * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(&gy[..na]).for_each(|(g, d)| *g += d);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(&gy[na..]).for_each(|(g, d)| *g += d);
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                with_grad!(*x, |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += gy[k * c + j];
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => {
                let xv = self.value(*x);
                let (m, f) = (xv.rows(), xv.cols());
                let g = &self.value(*gamma).data;
                with_grad!(*gamma, |gg| {
                    for r in 0..m {
                        for j in 0..f {
                            gg[j] += gy[r * f + j] * xhat[r * f + j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for r in 0..m {
                        for j in 0..f {
                            gb[j] += gy[r * f + j];
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    match kind {
                        NormKind::BatchFrozen => {
                            for r in 0..m {
                                for j in 0..f {
                                    gx[r * f + j] += gy[r * f + j] * g[j] * inv_std[j];
                                }
                            }
                        }
                        NormKind::BatchTrain => {
                            let mf = m as f64;
                            for j in 0..f {
                                let (mut s1, mut s2) = (0.0, 0.0);
                                for r in 0..m {
                                    let dxh = gy[r * f + j] * g[j];
                                    s1 += dxh;
                                    s2 += dxh * xhat[r * f + j];
                                }
                                for r in 0..m {
                                    let dxh = gy[r * f + j] * g[j];
                                    gx[r * f + j] += inv_std[j] / mf * (mf * dxh - s1 - xhat[r * f + j] * s2);
                                }
                            }
                        }
                        NormKind::Layer => {
                            let ff = f as f64;
                            for r in 0..m {
                                let (mut s1, mut s2) = (0.0, 0.0);
                                for j in 0..f {
                                    let dxh = gy[r * f + j] * g[j];
                                    s1 += dxh;
                                    s2 += dxh * xhat[r * f + j];
                                }
                                for j in 0..f {
                                    let dxh = gy[r * f + j] * g[j];
                                    gx[r * f + j] += inv_std[r] / ff * (ff * dxh - s1 - xhat[r * f + j] * s2);
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention { qkv, seq, heads, probs } => {
                let (seq, heads) = (*seq, *heads);
                let v = self.value(*qkv);
                let (t, e3) = (v.rows(), v.cols());
                let e = e3 / 3;
                let dh = e / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let d = &v.data;
                with_grad!(*qkv, |gq| {
                    let mut dp = vec![0.0; seq];
                    for s in 0..t / seq {
                        for h in 0..heads {
                            let off = h * dh;
                            for i in 0..seq {
                                let p = &probs[((s * heads + h) * seq + i) * seq..][..seq];
                                let go = &gy[(s * seq + i) * e + off..][..dh];
                                for j in 0..seq {
                                    let vj = (s * seq + j) * e3 + 2 * e + off;
                                    dp[j] = 0.0;
                                    for c in 0..dh {
                                        dp[j] += go[c] * d[vj + c];
                                        gq[vj + c] += p[j] * go[c];
                                    }
                                }
                                let dot: f64 = (0..seq).map(|j| p[j] * dp[j]).sum();
                                let qi = (s * seq + i) * e3 + off;
                                for j in 0..seq {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    let kj = (s * seq + j) * e3 + e + off;
                                    for c in 0..dh {
                                        gq[qi + c] += ds * d[kj + c];
                                        gq[kj + c] += ds * d[qi + c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Mask { x, mask } => {
                with_grad!(*x, |gx| {
                    gx.iter_mut()
                        .zip(gy.iter().zip(mask))
                        .for_each(|(g, (d, m))| *g += d * m);
                });
            }
            Op::QuatNormalize { x } => {
                let xv = &self.value(*x).data;
                with_grad!(*x, |gx| {
                    for r in 0..xv.len() / 4 {
                        let row = &xv[r * 4..r * 4 + 4];
                        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let s = if row[0] < 0.0 { -1.0 } else { 1.0 };
                        let g = &gy[r * 4..r * 4 + 4];
                        let ug: f64 = (0..4).map(|c| row[c] / n * g[c]).sum();
                        for c in 0..4 {
                            gx[r * 4 + c] += s / n * (g[c] - row[c] / n * ug);
                        }
                    }
                });
            }
            Op::L1 { x, target, scale } => {
                let xv = &self.value(*x).data;
                with_grad!(*x, |gx| {
                    for j in 0..xv.len() {
                        let d = xv[j] - target[j];
                        if d != 0.0 {
                            gx[j] += gy[0] * scale * d.signum();
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks d(build)/d(leaves) against central differences.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vs);
            (g, vs, out)
        };
        let (g, vs, out) = eval(&leaves);
        let grads = g.backward(out);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vs[li]).map(|s| s.to_vec()).unwrap_or(vec![0.0; leaf.len()]);
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[j] += h;
                let mut minus = leaves.clone();
                minus[li].data[j] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let num = (gp.value(op).data[0] - gm.value(om).data[0]) / (2.0 * h);
                let err = (num - analytic[j]).abs() / num.abs().max(analytic[j].abs()).max(1e-6);
                // loss is ~100, so round-off in the difference is ~1e-8
                let abs = (num - analytic[j]).abs();
                assert!(err < 1e-5 || abs < 1e-7, "leaf {li}[{j}]: numeric {num} analytic {}", analytic[j]);
            }
        }
    }

    /// Random linear projection to a scalar so every output entry matters.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (g.value(v).rows(), g.value(v).cols());
        let w = g.leaf(rand_tensor(&mut rng, vec![1, cols]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = g.linear(v, w, b);
        // far-away target keeps the l1 on one side of its kink
        g.l1(y, vec![-100.0; rows], 1.0)
    }

    #[test]
    fn gemm_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, k, n) = (3, 5, 4);
        let a = rand_tensor(&mut rng, vec![m, k]).data;
        let b = rand_tensor(&mut rng, vec![k, n]).data;
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &b, false, &mut c2, 0.0);
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - naive).abs() < 1e-12);
                assert!((c2[i * n + j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_relu_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![5, 4]),
            rand_tensor(&mut rng, vec![5]),
        ];
        check(leaves, |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let y = g.relu(y);
            project(g, y, 7)
        });
    }

    #[test]
    fn conv_pool_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_tensor(&mut rng, vec![2, 2, 5, 5]),
            rand_tensor(&mut rng, vec![3, 2 * 3 * 3]),
            rand_tensor(&mut rng, vec![3]),
        ];
        check(leaves, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 3, 2, 1);
            let y = g.global_avg_pool(y);
            project(g, y, 8)
        });
    }

    #[test]
    fn norms_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, vec![4, 3]),
            rand_tensor(&mut rng, vec![3]),
            rand_tensor(&mut rng, vec![3]),
        ];
        check(leaves.clone(), |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5);
            project(g, y, 9)
        });
        check(leaves.clone(), |g, v| {
            let y = g.batch_norm_frozen(v[0], v[1], v[2], &[0.1, 0.2, -0.3], &[1.0, 0.5, 2.0], 1e-5);
            project(g, y, 10)
        });
        check(leaves, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            project(g, y, 11)
        });
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![rand_tensor(&mut rng, vec![4, 3 * 6])];
        check(leaves, |g, v| {
            let y = g.attention(v[0], 2, 2);
            project(g, y, 12)
        });
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = Graph::new();
        let mut qkv = vec![0.0; 2 * 6];
        // zero queries: uniform weights over the two values
        qkv[4] = 1.0;
        qkv[6 + 4] = 3.0;
        let x = g.leaf(Tensor::new(vec![2, 6], qkv));
        let y = g.attention(x, 2, 1);
        assert_eq!(g.value(y).data, vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn concat_gather_mask_quat_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![rand_tensor(&mut rng, vec![2, 2]), rand_tensor(&mut rng, vec![2, 2])];
        check(leaves, |g, v| {
            let c = g.concat_cols(v[0], v[1]);
            let r = g.concat_rows(c, c);
            let s = g.gather_rows(r, vec![3, 0, 0]);
            let m = g.mask(s, vec![2.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0]);
            let q = g.quat_normalize(m);
            let a = g.add(q, q);
            project(g, a, 13)
        });
    }

    #[test]
    fn quat_normalize_is_unit_and_canonical() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 4], vec![-2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]));
        let y = g.quat_normalize(x);
        assert_eq!(g.value(y).data, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn detached_branch_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.3, -0.2]));
        let unused = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let loss = g.l1(x, vec![0.0, 0.0], 2.0);
        let grads = g.backward(loss);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0, -2.0]);
    }
}
