use rayon::prelude::*;

use super::ops::{conv_output_size, gemm};
use super::tensor::{BackwardOp, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Column matrix `[C*kh*kw, N*OH*OW]`, zero where the window hits padding.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.cols();
    let ohw = g.oh * g.ow;
    let mut col = vec![0.0; g.rows() * cols];
    col.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
        let c = r / (g.kh * g.kw);
        let i = (r / g.kw) % g.kh;
        let j = r % g.kw;
        for b in 0..g.n {
            let plane = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + i) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                let dst = &mut row[b * ohw + oy * g.ow..b * ohw + (oy + 1) * g.ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.w as isize {
                        *d = src[ix as usize];
                    }
                }
            }
        }
    });
    col
}

/// Scatters column gradients back onto the NCHW input.
fn col2im(dcol: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.cols();
    let ohw = g.oh * g.ow;
    let hw = g.h * g.w;
    // Channel-major scratch so each worker owns one channel.
    let mut scratch = vec![0.0; g.c * g.n * hw];
    scratch
        .par_chunks_mut(g.n * hw)
        .enumerate()
        .for_each(|(c, chan)| {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = &dcol[((c * g.kh + i) * g.kw + j) * cols..][..cols];
                    for b in 0..g.n {
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + i) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src = &row[b * ohw + oy * g.ow..b * ohw + (oy + 1) * g.ow];
                            let dst = &mut chan[b * hw + iy as usize * g.w..][..g.w];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        });
    let mut dx = vec![0.0; scratch.len()];
    for c in 0..g.c {
        for b in 0..g.n {
            dx[(b * g.c + c) * hw..][..hw].copy_from_slice(&scratch[(c * g.n + b) * hw..][..hw]);
        }
    }
    dx
}

struct Conv2d {
    geo: Geometry,
    out_c: usize,
    col: Vec<f64>,
}

impl BackwardOp for Conv2d {
    fn backward(
        &self,
        g: &[f64],
        _: &[f64],
        p: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let geo = &self.geo;
        let (o, k, cols) = (self.out_c, geo.rows(), geo.cols());
        let ohw = geo.oh * geo.ow;
        // [N, O, OHW] -> [O, N*OHW]
        let mut gm = vec![0.0; o * cols];
        for b in 0..geo.n {
            for oc in 0..o {
                gm[oc * cols + b * ohw..][..ohw].copy_from_slice(&g[(b * o + oc) * ohw..][..ohw]);
            }
        }
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; o * k];
            gemm(
                o, cols, k, &gm, cols, 1, &self.col, 1, cols, &mut dw, k, 0.0,
            );
            dw
        });
        let dx = needs[0].then(|| {
            let mut dcol = vec![0.0; k * cols];
            gemm(
                k,
                o,
                cols,
                p[1].data(),
                1,
                k,
                &gm,
                cols,
                1,
                &mut dcol,
                cols,
                0.0,
            );
            col2im(&dcol, geo)
        });
        vec![dx, dw]
    }
}

/// 2-D cross-correlation, no bias. `x [N, C, H, W]`, `w [O, C, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input {xs:?} with kernel {ws:?}"
        )));
    }
    let geo = Geometry {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        oh: conv_output_size(xs[2], ws[2], stride, padding)?,
        ow: conv_output_size(xs[3], ws[3], stride, padding)?,
        stride,
        pad: padding,
    };
    let o = ws[0];
    let (k, cols) = (geo.rows(), geo.cols());
    let col = im2col(x.data(), &geo);
    let mut om = vec![0.0; o * cols];
    gemm(
        o,
        k,
        cols,
        w.data(),
        k,
        1,
        &col,
        cols,
        1,
        &mut om,
        cols,
        0.0,
    );
    let ohw = geo.oh * geo.ow;
    let mut out = vec![0.0; o * cols];
    for b in 0..geo.n {
        for oc in 0..o {
            out[(b * o + oc) * ohw..][..ohw].copy_from_slice(&om[oc * cols + b * ohw..][..ohw]);
        }
    }
    let shape = vec![geo.n, o, geo.oh, geo.ow];
    let keep_col = if w.requires_grad() { col } else { Vec::new() };
    let op = Conv2d {
        geo,
        out_c: o,
        col: keep_col,
    };
    Ok(Tensor::from_op(shape, out, op, vec![x.clone(), w.clone()]))
}
