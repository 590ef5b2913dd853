//! Differentiable operations. Image tensors are NCHW.

use rand::Rng;

use super::params::{ForwardCtx, ParamStore};
use super::tensor::{numel, BackwardOp, ParamId, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects rank {rank}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// C = A * B with explicit strides, accumulating as C = alpha*A*B + beta*C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering every strided index used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

struct Reshape;
impl BackwardOp for Reshape {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.len() {
        return Err(mismatch("reshape", x.shape(), shape));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.data().to_vec(),
        Reshape,
        vec![x.clone()],
    ))
}

struct Add;
impl BackwardOp for Add {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        _: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Add,
        vec![a.clone(), b.clone()],
    ))
}

struct Mul;
impl BackwardOp for Mul {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        p: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let prod = |other: &Tensor| g.iter().zip(other.data()).map(|(g, o)| g * o).collect();
        vec![needs[0].then(|| prod(&p[1])), needs[1].then(|| prod(&p[0]))]
    }
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Mul,
        vec![a.clone(), b.clone()],
    ))
}

struct Scale(f64);
impl BackwardOp for Scale {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    Tensor::from_op(x.shape().to_vec(), data, Scale(c), vec![x.clone()])
}

struct Sum;
impl BackwardOp for Sum {
    fn backward(&self, g: &[f64], _: &[f64], p: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; p[0].len()])]
    }
}

/// Sum of all entries, as a scalar.
pub fn sum(x: &Tensor) -> Tensor {
    Tensor::from_op(
        Vec::new(),
        vec![x.data().iter().sum()],
        Sum,
        vec![x.clone()],
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    scale(&sum(x), 1.0 / x.len().max(1) as f64)
}

struct Relu;
impl BackwardOp for Relu {
    fn backward(&self, g: &[f64], out: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            g.iter()
                .zip(out)
                .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(x.shape().to_vec(), data, Relu, vec![x.clone()])
}

struct Sigmoid;
impl BackwardOp for Sigmoid {
    fn backward(&self, g: &[f64], out: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect(),
        )]
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::from_op(x.shape().to_vec(), data, Sigmoid, vec![x.clone()])
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (v, o) in row.iter().zip(o.iter_mut()) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in o.iter_mut() {
            *o /= z;
        }
    }
    out
}

struct Softmax(usize);
impl BackwardOp for Softmax {
    fn backward(&self, g: &[f64], out: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; g.len()];
        for ((gr, yr), xr) in g
            .chunks_exact(self.0)
            .zip(out.chunks_exact(self.0))
            .zip(gx.chunks_exact_mut(self.0))
        {
            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
            for ((x, g), y) in xr.iter_mut().zip(gr).zip(yr) {
                *x = y * (g - dot);
            }
        }
        vec![Some(gx)]
    }
}

/// Row-wise softmax of an `[N, C]` tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "softmax")?;
    let cols = x.shape()[1];
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        softmax_rows(x.data(), cols),
        Softmax(cols),
        vec![x.clone()],
    ))
}

struct SoftmaxCe {
    probs: Vec<f64>,
    labels: Vec<usize>,
    cols: usize,
}
impl BackwardOp for SoftmaxCe {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.labels.len() as f64;
        let mut gx = self.probs.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            gx[i * self.cols + l] -= 1.0;
        }
        for v in &mut gx {
            *v *= g[0] / n;
        }
        vec![Some(gx)]
    }
}

/// Mean cross-entropy of row-wise softmax against integer labels.
/// The logit gradient is (p - onehot) / N.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    expect_rank(logits, 2, "softmax_cross_entropy")?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n || labels.iter().any(|&l| l >= c) {
        return Err(Error::ShapeMismatch(format!(
            "{} labels (max {:?}) for logits {:?}",
            labels.len(),
            labels.iter().max(),
            logits.shape()
        )));
    }
    let probs = softmax_rows(logits.data(), c);
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    let op = SoftmaxCe {
        probs,
        labels: labels.to_vec(),
        cols: c,
    };
    Ok(Tensor::from_op(
        Vec::new(),
        vec![loss / n as f64],
        op,
        vec![logits.clone()],
    ))
}

struct Matmul {
    n: usize,
    k: usize,
    m: usize,
}
impl BackwardOp for Matmul {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        p: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (n, k, m) = (self.n, self.k, self.m);
        let ga = needs[0].then(|| {
            let mut ga = vec![0.0; n * k];
            // g [n,m] * b^T [m,k]
            gemm(n, m, k, g, m, 1, p[1].data(), 1, m, &mut ga, k, 0.0);
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; k * m];
            // a^T [k,n] * g [n,m]
            gemm(k, n, m, p[0].data(), 1, k, g, m, 1, &mut gb, m, 0.0);
            gb
        });
        vec![ga, gb]
    }
}

/// `[N, K] x [K, M] -> [N, M]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), k, 1, b.data(), m, 1, &mut out, m, 0.0);
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        Matmul { n, k, m },
        vec![a.clone(), b.clone()],
    ))
}

struct AddBias(usize);
impl BackwardOp for AddBias {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        _: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let gb = needs[1].then(|| {
            let mut gb = vec![0.0; self.0];
            for row in g.chunks_exact(self.0) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            gb
        });
        vec![needs[0].then(|| g.to_vec()), gb]
    }
}

/// Adds `b` (length = last dim of `x`) to every row of `x`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let m = *x.shape().last().unwrap_or(&1);
    if b.len() != m || x.shape().is_empty() {
        return Err(mismatch("add_bias", x.shape(), b.shape()));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(m) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        AddBias(m),
        vec![x.clone(), b.clone()],
    ))
}

/// Fully connected layer: `x [N, K] * w [K, M] + b [M]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_bias(&matmul(x, w)?, b)
}

struct GlobalAvgPool {
    hw: usize,
}
impl BackwardOp for GlobalAvgPool {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.hw as f64;
        let mut gx = Vec::with_capacity(g.len() * self.hw);
        for &v in g {
            gx.extend(std::iter::repeat(v * inv).take(self.hw));
        }
        vec![Some(gx)]
    }
}

/// `[N, C, H, W] -> [N, C]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 4, "global_avg_pool")?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let data = x
        .data()
        .chunks_exact(hw.max(1))
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_op(
        vec![s[0], s[1]],
        data,
        GlobalAvgPool { hw },
        vec![x.clone()],
    ))
}

struct MeanRows {
    rows: usize,
    cols: usize,
}
impl BackwardOp for MeanRows {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.rows as f64;
        let mut gx = Vec::with_capacity(g.len() * self.rows);
        for gb in g.chunks_exact(self.cols) {
            for _ in 0..self.rows {
                gx.extend(gb.iter().map(|v| v * inv));
            }
        }
        vec![Some(gx)]
    }
}

/// Mean over the middle axis: `[N, R, F] -> [N, F]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 3, "mean_rows")?;
    let (n, r, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; n * f];
    for (b, o) in out.chunks_exact_mut(f).enumerate() {
        for row in x.data()[b * r * f..(b + 1) * r * f].chunks_exact(f) {
            for (o, v) in o.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in o.iter_mut() {
            *o /= r as f64;
        }
    }
    Ok(Tensor::from_op(
        vec![n, f],
        out,
        MeanRows { rows: r, cols: f },
        vec![x.clone()],
    ))
}

struct MulRows {
    rows: usize,
    cols: usize,
}
impl BackwardOp for MulRows {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        p: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (r, f) = (self.rows, self.cols);
        let (x, gate) = (p[0].data(), p[1].data());
        let gx = needs[0].then(|| {
            g.iter()
                .enumerate()
                .map(|(i, gv)| gv * gate[(i / (r * f)) * f + i % f])
                .collect()
        });
        let gg = needs[1].then(|| {
            let mut gg = vec![0.0; gate.len()];
            for (i, gv) in g.iter().enumerate() {
                gg[(i / (r * f)) * f + i % f] += gv * x[i];
            }
            gg
        });
        vec![gx, gg]
    }
}

/// Multiplies every row of `x [N, R, F]` by `g [N, F]`.
pub fn mul_rows(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    expect_rank(x, 3, "mul_rows")?;
    let (n, r, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if g.shape() != [n, f] {
        return Err(mismatch("mul_rows", x.shape(), g.shape()));
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * g.data()[(i / (r * f)) * f + i % f])
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        MulRows { rows: r, cols: f },
        vec![x.clone(), g.clone()],
    ))
}

struct Dropout {
    mask: Vec<f64>,
}
impl BackwardOp for Dropout {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(g, m)| g * m).collect())]
    }
}

/// Inverted dropout: in training, zeroes entries with probability `rate`
/// and scales survivors by 1/(1-rate). Identity in eval mode.
pub fn dropout(x: &Tensor, rate: f64, ctx: &mut ForwardCtx) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !ctx.is_train() || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let rng = ctx.rng();
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        Dropout { mask },
        vec![x.clone()],
    ))
}

struct ConcatChannels {
    channels: Vec<usize>,
    hw: usize,
}
impl BackwardOp for ConcatChannels {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        _: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.channels.iter().sum();
        let n = g.len() / (total * self.hw);
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            if need {
                let mut gp = Vec::with_capacity(n * c * self.hw);
                for b in 0..n {
                    let start = (b * total + offset) * self.hw;
                    gp.extend_from_slice(&g[start..start + c * self.hw]);
                }
                out.push(Some(gp));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
    expect_rank(first, 4, "concat_channels")?;
    let (n, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(mismatch("concat_channels", first.shape(), s));
        }
        channels.push(s[1]);
    }
    let hw = h * w;
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, total, h, w],
        data,
        ConcatChannels { channels, hw },
        parts.to_vec(),
    ))
}

fn pool_out(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if n + 2 * p < k || s == 0 {
        return Err(Error::ShapeMismatch(format!(
            "window {k} (stride {s}, padding {p}) larger than input {n}"
        )));
    }
    Ok((n + 2 * p - k) / s + 1)
}

/// Output spatial size of a conv or pool: floor((n + 2p - k) / s) + 1.
pub fn conv_output_size(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    pool_out(n, k, s, p)
}

struct MaxPool {
    argmax: Vec<usize>,
    in_len: usize,
}
impl BackwardOp for MaxPool {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.in_len];
        for (&i, gv) in self.argmax.iter().zip(g) {
            gx[i] += gv;
        }
        vec![Some(gx)]
    }
}

/// Max pooling over `window`x`window` windows; padded cells never win.
pub fn max_pool2d(x: &Tensor, window: usize, stride: usize, padding: usize) -> Result<Tensor> {
    expect_rank(x, 4, "max_pool2d")?;
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let oh = pool_out(h, window, stride, padding)?;
    let ow = pool_out(w, window, stride, padding)?;
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut argmax = Vec::with_capacity(nc * oh * ow);
    let xd = x.data();
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for i in 0..window {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..window {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if xd[idx] > best || at == usize::MAX {
                            best = xd[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
    }
    let op = MaxPool {
        argmax,
        in_len: x.len(),
    };
    Ok(Tensor::from_op(
        vec![s[0], s[1], oh, ow],
        out,
        op,
        vec![x.clone()],
    ))
}

struct AvgPool {
    shape: [usize; 4],
    out_hw: (usize, usize),
    window: usize,
    stride: usize,
    padding: usize,
}
impl BackwardOp for AvgPool {
    fn backward(&self, g: &[f64], _: &[f64], _: &[Tensor], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [n, c, h, w] = self.shape;
        let (oh, ow) = self.out_hw;
        let inv = 1.0 / (self.window * self.window) as f64;
        let mut gx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(plane * oh + oy) * ow + ox] * inv;
                    for_window(
                        oy,
                        ox,
                        self.window,
                        self.stride,
                        self.padding,
                        h,
                        w,
                        |iy, ix| {
                            gx[plane * h * w + iy * w + ix] += gv;
                        },
                    );
                }
            }
        }
        vec![Some(gx)]
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn for_window(
    oy: usize,
    ox: usize,
    window: usize,
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize),
) {
    for i in 0..window {
        let iy = (oy * stride + i) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for j in 0..window {
            let ix = (ox * stride + j) as isize - padding as isize;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}

/// Average pooling; the divisor is always window^2.
pub fn avg_pool2d(x: &Tensor, window: usize, stride: usize, padding: usize) -> Result<Tensor> {
    expect_rank(x, 4, "avg_pool2d")?;
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = pool_out(h, window, stride, padding)?;
    let ow = pool_out(w, window, stride, padding)?;
    let inv = 1.0 / (window * window) as f64;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for_window(oy, ox, window, stride, padding, h, w, |iy, ix| {
                    acc += xd[plane * h * w + iy * w + ix];
                });
                out.push(acc * inv);
            }
        }
    }
    let op = AvgPool {
        shape: [n, c, h, w],
        out_hw: (oh, ow),
        window,
        stride,
        padding,
    };
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        op,
        vec![x.clone()],
    ))
}

/// Parameter ids of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormParams {
    /// Registers `{prefix}.gamma`, `.beta`, `.running_mean`, `.running_var`.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: store.add(
                &format!("{prefix}.gamma"),
                &[channels],
                vec![1.0; channels],
                true,
            )?,
            beta: store.add(
                &format!("{prefix}.beta"),
                &[channels],
                vec![0.0; channels],
                true,
            )?,
            running_mean: store.add(
                &format!("{prefix}.running_mean"),
                &[channels],
                vec![0.0; channels],
                false,
            )?,
            running_var: store.add(
                &format!("{prefix}.running_var"),
                &[channels],
                vec![1.0; channels],
                false,
            )?,
        })
    }
}

struct BatchNorm {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    inner: usize,
    batch_stats: bool,
}
impl BackwardOp for BatchNorm {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        p: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (n, c, inner) = (self.n, self.c, self.inner);
        let gamma = p[1].data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * self.xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let m = (n * inner) as f64;
            let mut gx = vec![0.0; g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in off..off + inner {
                        gx[i] = if self.batch_stats {
                            k * (g[i] - sum_g[ch] / m - self.xhat[i] * sum_gx[ch] / m)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

/// Batch normalization over `[N, C, ...]`, per channel.
///
/// Training mode normalizes with batch statistics and queues running-moment
/// updates on `ctx`; eval mode uses the stored running moments.
pub fn batch_norm(
    x: &Tensor,
    bn: &BatchNormParams,
    store: &ParamStore,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::ShapeMismatch(format!("batch_norm input {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    if store.entry(bn.gamma).data.len() != c {
        return Err(mismatch(
            "batch_norm channels",
            s,
            &store.entry(bn.gamma).shape,
        ));
    }
    let gamma = ctx.param(store, bn.gamma);
    let beta = ctx.param(store, bn.beta);
    let xd = x.data();
    let batch_stats = ctx.is_train();
    let (mean, var) = if batch_stats {
        let m = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                mean[ch] += xd[off..off + inner].iter().sum::<f64>();
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                var[ch] += xd[off..off + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m;
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let rm = &store.entry(bn.running_mean).data;
        let rv = &store.entry(bn.running_var).data;
        let new_mean = rm
            .iter()
            .zip(&mean)
            .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
            .collect();
        let new_var = rv
            .iter()
            .zip(&var)
            .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b * unbias)
            .collect();
        ctx.push_update(bn.running_mean, new_mean);
        ctx.push_update(bn.running_var, new_var);
        (mean, var)
    } else {
        (
            store.entry(bn.running_mean).data.to_vec(),
            store.entry(bn.running_var).data.to_vec(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + inner {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = g * xhat[i] + bt;
            }
        }
    }
    let op = BatchNorm {
        xhat,
        inv_std,
        n,
        c,
        inner,
        batch_stats,
    };
    Ok(Tensor::from_op(
        s.to_vec(),
        out,
        op,
        vec![x.clone(), gamma, beta],
    ))
}
