//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep. Only the
//! operations the encoder/decoder/classifier and the training losses need
//! are provided.

use crate::error::{CdnError, Result};
use crate::feature_stats::plane_stats;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x { x: Var },
    Relu { x: Var },
    Mix { x: Var, pairs: Vec<(usize, usize)>, eps: f64 },
    ChannelMean { x: Var },
    ChannelStd { x: Var, eps: f64 },
    Flatten { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Linear { x: Var, w: Var, b: Var },
    Sigmoid { x: Var },
    Sub { a: Var, b: Var },
    MeanSquare { x: Var },
    SquaredNormMean { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    Bce { p: Var, labels: Vec<f64>, clamp: f64 },
    Boundary { reals: Var, fakes: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = beta * c + a * b` with optional transposes, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
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

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is inside
/// the image.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.w_out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                let (lo, hi) = valid_span(g, kx);
                if lo == hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.w_out + lo..oy * g.w_out + hi];
                    for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn unit_rows(t: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (n, d) = t.dims2()?;
    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let row = &t.data()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(CdnError::invalid("cosine distance of a zero vector"));
        }
        units.push(row.iter().map(|v| v / norm).collect());
        norms.push(norm);
    }
    Ok((units, norms))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean pairwise cosine distance among reals minus mean real/fake distance.
fn boundary_value(reals: &Tensor, fakes: &Tensor) -> Result<f64> {
    let (ur, _) = unit_rows(reals)?;
    let (uf, _) = unit_rows(fakes)?;
    let (nr, nf) = (ur.len() as f64, uf.len() as f64);
    let mut rr = 0.0;
    for a in &ur {
        for b in &ur {
            rr += 0.5 * (1.0 - dot(a, b));
        }
    }
    let mut rf = 0.0;
    for a in &ur {
        for b in &uf {
            rf += 0.5 * (1.0 - dot(a, b));
        }
    }
    Ok(rr / (nr * nr) - rf / (nr * nf))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A parameter or input; gradients are kept when `needs_grad`.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// A value that no gradient flows into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Detached copy of an existing node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 {
            return Err(CdnError::ShapeMismatch {
                expected: vec![c_out, c_in, k, k],
                got: self.value(w).shape().to_vec(),
            });
        }
        self.value(b).expect_shape(&[c_out])?;
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(CdnError::invalid("convolution kernel larger than padded input"));
        }
        let g = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (p, rows) = (g.cols(), g.rows());
        let mut out = Tensor::zeros(&[n, c_out, g.h_out, g.w_out]);
        let mut cols = vec![0.0; rows * p];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for s in 0..n {
                im2col(xv.sample(s), &g, &mut cols);
                let dst = out.sample_mut(s);
                for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[co]);
                }
                gemm(c_out, rows, p, wv, false, &cols, false, 1.0, dst);
            }
        }
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = self.value(x).data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Upsample2x { x }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, ng)
    }

    /// Re-styles sources toward partners per channel (see
    /// [`crate::feature_stats::apply_pairing`]), with gradients to both.
    pub fn mix(&mut self, x: Var, pairs: &[(usize, usize)], eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let l = h * w;
        let src = self.value(x);
        let mut out = src.clone();
        for &(s, p) in pairs {
            if s >= n || p >= n {
                return Err(CdnError::invalid(format!("pair ({s}, {p}) out of range for batch {n}")));
            }
            for ch in 0..c {
                let (os, op) = ((s * c + ch) * l, (p * c + ch) * l);
                let (mu_s, sig_s) = plane_stats(&src.data()[os..os + l], eps);
                let (mu_p, sig_p) = plane_stats(&src.data()[op..op + l], eps);
                for (o, &v) in out.data_mut()[os..os + l].iter_mut().zip(&src.data()[os..os + l]) {
                    *o = sig_p * (v - mu_s) / sig_s + mu_p;
                }
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Mix { x, pairs: pairs.to_vec(), eps }, ng))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let data = self.value(x).data().chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::ChannelMean { x }, ng))
    }

    /// `(N, C, H, W) -> (N, C)` spatial `sqrt(var + eps)`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let data = self.value(x).data().chunks_exact(h * w).map(|p| plane_stats(p, eps).1).collect();
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::ChannelStd { x, eps }, ng))
    }

    /// `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let rest = t.len() / n.max(1);
        let out = t.clone().reshape(&[n, rest])?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Flatten { x }, ng))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() || axis > 1 {
            return Err(CdnError::invalid("concat needs at least one input and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = xs.iter().map(|&v| self.value(v).dims2()).collect::<Result<_>>()?;
        let out = if axis == 1 {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(CdnError::invalid("concat along columns needs equal row counts"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&v, d) in xs.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(v).data()[r * d.1..(r + 1) * d.1]);
                }
            }
            Tensor::new(vec![rows, total], data)?
        } else {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(CdnError::invalid("concat along rows needs equal column counts"));
            }
            let total: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(total * cols);
            for &v in xs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::new(vec![total, cols], data)?
        };
        let ng = self.any_grad(xs);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// `x (N, F) * w (F, H) + b (H)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (wf, h) = self.value(w).dims2()?;
        if wf != f {
            return Err(CdnError::ShapeMismatch { expected: vec![f, h], got: vec![wf, h] });
        }
        self.value(b).expect_shape(&[h])?;
        let mut out = Tensor::zeros(&[n, h]);
        for row in out.data_mut().chunks_exact_mut(h) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(n, f, h, self.value(x).data(), false, self.value(w).data(), false, 1.0, out.data_mut());
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    /// Mean of squares over every element.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), Op::MeanSquare { x }, ng)
    }

    /// Squared norm per leading-axis sample, averaged over samples.
    pub fn squared_norm_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|v| v * v).sum::<f64>() / t.shape()[0] as f64;
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), Op::SquaredNormMean { x }, ng)
    }

    /// `sum_k w_k * x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut v = 0.0;
        for &(x, wt) in terms {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(CdnError::invalid("weighted_sum expects scalar nodes"));
            }
            v += wt * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum { terms: terms.to_vec() }, ng))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], clamp: f64) -> Result<Var> {
        let t = self.value(p);
        if t.len() != labels.len() {
            return Err(CdnError::invalid(format!("{} scores for {} labels", t.len(), labels.len())));
        }
        let v = bce_value(t.data(), labels, clamp);
        let ng = self.any_grad(&[p]);
        Ok(self.push(Tensor::scalar(v), Op::Bce { p, labels: labels.to_vec(), clamp }, ng))
    }

    /// Domain boundary loss over real rows and fake rows of 2-D embeddings.
    pub fn boundary(&mut self, reals: Var, fakes: Var) -> Result<Var> {
        let (nr, d) = self.value(reals).dims2()?;
        let (nf, df) = self.value(fakes).dims2()?;
        if nr < 2 || nf < 1 {
            return Err(CdnError::invalid(format!("boundary loss needs >= 2 reals and >= 1 fake, got {nr} and {nf}")));
        }
        if d != df {
            return Err(CdnError::invalid("real and fake embeddings differ in width"));
        }
        let v = boundary_value(self.value(reals), self.value(fakes))?;
        let ng = self.any_grad(&[reals, fakes]);
        Ok(self.push(Tensor::scalar(v), Op::Boundary { reals, fakes }, ng))
    }

    /// Reverse sweep from a scalar node. Gradients accumulate on every node
    /// that needs them; call on a fresh graph per step.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(CdnError::invalid("backward needs a scalar root"));
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &gout)?;
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = val(x);
                let wv = val(w);
                let (n, c_in, h, wd) = xv.dims4()?;
                let (c_out, _, k, _) = wv.dims4()?;
                let (_, _, h_out, w_out) = gout.dims4()?;
                let g = ConvGeom { c_in, h, w: wd, k, stride: *stride, pad: *pad, h_out, w_out };
                let (p, rows) = (g.cols(), g.rows());
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = Tensor::zeros(&[c_out]);
                let mut dx = if ng(x) { Some(Tensor::zeros(xv.shape())) } else { None };
                let mut cols = if ng(w) { vec![0.0; rows * p] } else { Vec::new() };
                let mut dcols = if dx.is_some() { vec![0.0; rows * p] } else { Vec::new() };
                for s in 0..n {
                    let go = gout.sample(s);
                    if ng(w) {
                        im2col(xv.sample(s), &g, &mut cols);
                        gemm(c_out, p, rows, go, false, &cols, true, 1.0, dw.data_mut());
                    }
                    if ng(b) {
                        for (co, row) in go.chunks_exact(p).enumerate() {
                            db.data_mut()[co] += row.iter().sum::<f64>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, c_out, p, wv.data(), true, go, false, 0.0, &mut dcols);
                        col2im_add(&dcols, &g, dx.sample_mut(s));
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if ng(w) {
                    out.push((*w, dw));
                }
                if ng(b) {
                    out.push((*b, db));
                }
            }
            Op::Upsample2x { x } => {
                let (n, c, h, w) = val(x).dims4()?;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let g = gout.data();
                let d = dx.data_mut();
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[plane * h * w + (y / 2) * w + xx / 2] += g[plane * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Relu { x } => {
                let dx = val(x).zip_map(gout, |v, g| if v > 0.0 { g } else { 0.0 })?;
                out.push((*x, dx));
            }
            Op::Mix { x, pairs, eps } => {
                let xv = val(x);
                let (_, c, h, w) = xv.dims4()?;
                let l = h * w;
                let lf = l as f64;
                let mut dx = gout.clone();
                for &(s, p) in pairs {
                    for ch in 0..c {
                        let (os, op) = ((s * c + ch) * l, (p * c + ch) * l);
                        let xs = &xv.data()[os..os + l];
                        let xp = &xv.data()[op..op + l];
                        let (mu_s, sig_s) = plane_stats(xs, *eps);
                        let (mu_p, sig_p) = plane_stats(xp, *eps);
                        let gy = &gout.data()[os..os + l];
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mu_s) / sig_s).collect();
                        let sum_g: f64 = gy.iter().sum();
                        let sum_gx: f64 = gy.iter().zip(&xhat).map(|(g, xh)| g * xh).sum();
                        // Source path through its own normalization; the
                        // output plane replaced the identity pass-through.
                        let mean_gh = sig_p * sum_g / lf;
                        let mean_ghx = sig_p * sum_gx / lf;
                        for j in 0..l {
                            dx.data_mut()[os + j] -= gy[j];
                            dx.data_mut()[os + j] += (sig_p * gy[j] - mean_gh - xhat[j] * mean_ghx) / sig_s;
                        }
                        // Partner path through (mu_p, sig_p).
                        for j in 0..l {
                            let xhat_p = (xp[j] - mu_p) / sig_p;
                            dx.data_mut()[op + j] += sum_g / lf + sum_gx * xhat_p / lf;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::ChannelMean { x } => {
                let xv = val(x);
                let (_, _, h, w) = xv.dims4()?;
                let l = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for (k, plane) in dx.data_mut().chunks_exact_mut(l).enumerate() {
                    let g = gout.data()[k] / l as f64;
                    plane.iter_mut().for_each(|v| *v = g);
                }
                out.push((*x, dx));
            }
            Op::ChannelStd { x, eps } => {
                let xv = val(x);
                let (_, _, h, w) = xv.dims4()?;
                let l = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for (k, (plane, src)) in dx.data_mut().chunks_exact_mut(l).zip(xv.data().chunks_exact(l)).enumerate() {
                    let (mu, sig) = plane_stats(src, *eps);
                    let g = gout.data()[k];
                    for (d, &v) in plane.iter_mut().zip(src) {
                        *d = g * (v - mu) / (l as f64 * sig);
                    }
                }
                out.push((*x, dx));
            }
            Op::Flatten { x } => {
                out.push((*x, gout.clone().reshape(val(x).shape())?));
            }
            Op::Concat { xs, axis } => {
                let (rows, total) = gout.dims2()?;
                let mut offset = 0;
                for v in xs {
                    let (r, c) = val(v).dims2()?;
                    let mut g = Tensor::zeros(&[r, c]);
                    if *axis == 1 {
                        for row in 0..rows {
                            g.data_mut()[row * c..(row + 1) * c]
                                .copy_from_slice(&gout.data()[row * total + offset..row * total + offset + c]);
                        }
                        offset += c;
                    } else {
                        g.data_mut().copy_from_slice(&gout.data()[offset * total..(offset + r) * total]);
                        offset += r;
                    }
                    if ng(v) {
                        out.push((*v, g));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = val(x).dims2()?;
                let (_, h) = val(w).dims2()?;
                if ng(x) {
                    let mut dx = Tensor::zeros(&[n, f]);
                    gemm(n, h, f, gout.data(), false, val(w).data(), true, 0.0, dx.data_mut());
                    out.push((*x, dx));
                }
                if ng(w) {
                    let mut dw = Tensor::zeros(&[f, h]);
                    gemm(f, n, h, val(x).data(), true, gout.data(), false, 0.0, dw.data_mut());
                    out.push((*w, dw));
                }
                if ng(b) {
                    let mut db = Tensor::zeros(&[h]);
                    for row in gout.data().chunks_exact(h) {
                        for (d, g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                out.push((*x, y.zip_map(gout, |s, g| g * s * (1.0 - s))?));
            }
            Op::Sub { a, b } => {
                if ng(a) {
                    out.push((*a, gout.clone()));
                }
                if ng(b) {
                    out.push((*b, gout.map(|g| -g)));
                }
            }
            Op::MeanSquare { x } => {
                let t = val(x);
                let scale = 2.0 * gout.item() / t.len() as f64;
                out.push((*x, t.map(|v| scale * v)));
            }
            Op::SquaredNormMean { x } => {
                let t = val(x);
                let scale = 2.0 * gout.item() / t.shape()[0] as f64;
                out.push((*x, t.map(|v| scale * v)));
            }
            Op::WeightedSum { terms } => {
                for &(v, wt) in terms {
                    if ng(&v) {
                        out.push((v, Tensor::scalar(wt * gout.item())));
                    }
                }
            }
            Op::Bce { p, labels, clamp } => {
                let t = val(p);
                let n = labels.len() as f64;
                let g = gout.item();
                let mut dp = Tensor::zeros(t.shape());
                for ((d, &pv), &y) in dp.data_mut().iter_mut().zip(t.data()).zip(labels) {
                    if pv > *clamp && pv < 1.0 - clamp {
                        *d = g * (pv - y) / (pv * (1.0 - pv)) / n;
                    }
                }
                out.push((*p, dp));
            }
            Op::Boundary { reals, fakes } => {
                let (ur, nr_norm) = unit_rows(val(reals))?;
                let (uf, nf_norm) = unit_rows(val(fakes))?;
                let (nr, nf) = (ur.len(), uf.len());
                let d = ur[0].len();
                let g = gout.item();
                let mut dr = Tensor::zeros(&[nr, d]);
                let mut df = Tensor::zeros(&[nf, d]);
                // d/dx Dis(x, y) = -0.5 (v - (u.v) u) / |x|
                let w_rr = g / (nr * nr) as f64;
                let w_rf = -g / (nr * nf) as f64;
                for a in 0..nr {
                    for b in 0..nr {
                        let c = dot(&ur[a], &ur[b]);
                        for k in 0..d {
                            dr.data_mut()[a * d + k] += w_rr * -0.5 * (ur[b][k] - c * ur[a][k]) / nr_norm[a];
                            dr.data_mut()[b * d + k] += w_rr * -0.5 * (ur[a][k] - c * ur[b][k]) / nr_norm[b];
                        }
                    }
                    for b in 0..nf {
                        let c = dot(&ur[a], &uf[b]);
                        for k in 0..d {
                            dr.data_mut()[a * d + k] += w_rf * -0.5 * (uf[b][k] - c * ur[a][k]) / nr_norm[a];
                            df.data_mut()[b * d + k] += w_rf * -0.5 * (ur[a][k] - c * uf[b][k]) / nf_norm[b];
                        }
                    }
                }
                if ng(reals) {
                    out.push((*reals, dr));
                }
                if ng(fakes) {
                    out.push((*fakes, df));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn bce_value(p: &[f64], labels: &[f64], clamp: f64) -> f64 {
    let n = labels.len() as f64;
    p.iter()
        .zip(labels)
        .map(|(&pv, &y)| {
            let q = pv.clamp(clamp, 1.0 - clamp);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n
}

pub(crate) fn boundary_of(reals: &Tensor, fakes: &Tensor) -> Result<f64> {
    boundary_value(reals, fakes)
}
