//! Forward and backward kernels for every [`LayerKind`].
//!
//! Convolution lowers to im2col + sgemm; everything else is a direct loop.
//! Kernels never spawn threads, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::layer::{LayerKind, Mode, ParamGrads, Params};
use crate::tensor::Tensor;

/// State a kernel keeps between forward and backward.
#[derive(Clone, Debug, Default)]
pub enum Cache {
    #[default]
    None,
    /// Flat input index selected for each output element.
    ArgMax(Vec<u32>),
    BatchNorm {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: Mode,
        /// Batch mean and unbiased variance, for the running-stat update.
        batch_mean: Vec<f32>,
        batch_var: Vec<f32>,
    },
}

/// Evaluate one layer. Parametric kinds read `params`; BatchNorm running
/// statistics are not touched here, see [`Cache::BatchNorm`].
pub fn forward_op(
    kind: &LayerKind,
    params: &Params,
    inputs: &[&Tensor],
    mode: Mode,
) -> Result<(Tensor, Cache)> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = kind.output_shape(&shapes)?;
    if kind.has_params() {
        params.check(kind)?;
    }
    let x = inputs[0];
    let (data, cache) = match *kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => (
            conv_forward(x, params, out_channels, kernel, stride, padding, &out_shape),
            Cache::None,
        ),
        LayerKind::Linear { out_features, .. } => (linear_forward(x, params, out_features), Cache::None),
        LayerKind::BatchNorm { eps, .. } => batch_norm_forward(x, params, eps, mode),
        LayerKind::Relu => (x.data().iter().map(|&v| v.max(0.0)).collect(), Cache::None),
        LayerKind::Sigmoid => (x.data().iter().map(|&v| sigmoid(v)).collect(), Cache::None),
        LayerKind::HardSwish => (
            x.data()
                .iter()
                .map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
                .collect(),
            Cache::None,
        ),
        LayerKind::MaxPool { kernel, stride } => {
            let (d, idx) = max_pool_forward(x, kernel, stride, &out_shape);
            (d, Cache::ArgMax(idx))
        }
        LayerKind::AvgPool { kernel, stride } => {
            (avg_pool_forward(x, kernel, stride, &out_shape), Cache::None)
        }
        LayerKind::GlobalAvgPool => {
            let plane = x.shape()[2] * x.shape()[3];
            let inv = 1.0 / plane as f32;
            (
                x.data()
                    .chunks_exact(plane)
                    .map(|c| c.iter().sum::<f32>() * inv)
                    .collect(),
                Cache::None,
            )
        }
        LayerKind::Flatten => (x.data().to_vec(), Cache::None),
        LayerKind::Add => (
            x.data()
                .iter()
                .zip(inputs[1].data())
                .map(|(a, b)| a + b)
                .collect(),
            Cache::None,
        ),
        LayerKind::Mul => (mul_forward(x, inputs[1]), Cache::None),
        LayerKind::Concat => (concat_forward(inputs, &out_shape), Cache::None),
        LayerKind::Softmax => (softmax_rows(x.data(), x.shape()[1]), Cache::None),
    };
    Ok((Tensor::from_parts(out_shape, data), cache))
}

/// Gradients of one layer given the gradient of its output.
///
/// Returns one gradient buffer per input plus the parameter gradients.
pub fn backward_op(
    kind: &LayerKind,
    params: &Params,
    inputs: &[&Tensor],
    output: &Tensor,
    cache: &Cache,
    grad_out: &[f32],
) -> Result<(Vec<Vec<f32>>, ParamGrads)> {
    if grad_out.len() != output.len() {
        return Err(Error::State(format!(
            "{} backward: gradient length {} vs output length {}",
            kind.op_name(),
            grad_out.len(),
            output.len()
        )));
    }
    let x = inputs[0];
    let mut pg = ParamGrads::default();
    let grads = match *kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (dx, dw, db) = conv_backward(
                x,
                params,
                out_channels,
                kernel,
                stride,
                padding,
                output.shape(),
                grad_out,
            );
            pg.weight = Some(dw);
            pg.bias = db;
            vec![dx]
        }
        LayerKind::Linear { out_features, .. } => {
            let (dx, dw, db) = linear_backward(x, params, out_features, grad_out);
            pg.weight = Some(dw);
            pg.bias = db;
            vec![dx]
        }
        LayerKind::BatchNorm { .. } => {
            let Cache::BatchNorm {
                xhat, inv_std, mode, ..
            } = cache
            else {
                return Err(Error::State("batch_norm backward without forward cache".into()));
            };
            let (dx, dg, dbeta) = batch_norm_backward(x, params, xhat, inv_std, *mode, grad_out);
            pg.gamma = Some(dg);
            pg.beta = Some(dbeta);
            vec![dx]
        }
        LayerKind::Relu => vec![x
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect()],
        LayerKind::Sigmoid => vec![output
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&y, &g)| g * y * (1.0 - y))
            .collect()],
        LayerKind::HardSwish => vec![x
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| {
                if v <= -3.0 {
                    0.0
                } else if v >= 3.0 {
                    g
                } else {
                    g * (2.0 * v + 3.0) / 6.0
                }
            })
            .collect()],
        LayerKind::MaxPool { .. } => {
            let Cache::ArgMax(idx) = cache else {
                return Err(Error::State("max_pool backward without forward cache".into()));
            };
            let mut dx = vec![0.0; x.len()];
            for (&i, &g) in idx.iter().zip(grad_out) {
                dx[i as usize] += g;
            }
            vec![dx]
        }
        LayerKind::AvgPool { kernel, stride } => {
            vec![avg_pool_backward(x, kernel, stride, output.shape(), grad_out)]
        }
        LayerKind::GlobalAvgPool => {
            let plane = x.shape()[2] * x.shape()[3];
            let inv = 1.0 / plane as f32;
            let mut dx = vec![0.0; x.len()];
            for (chunk, &g) in dx.chunks_exact_mut(plane).zip(grad_out) {
                chunk.fill(g * inv);
            }
            vec![dx]
        }
        LayerKind::Flatten => vec![grad_out.to_vec()],
        LayerKind::Add => vec![grad_out.to_vec(), grad_out.to_vec()],
        LayerKind::Mul => mul_backward(x, inputs[1], grad_out),
        LayerKind::Concat => concat_backward(inputs, output.shape(), grad_out),
        LayerKind::Softmax => {
            let n = output.shape()[1];
            let mut dx = vec![0.0; grad_out.len()];
            for ((y, g), d) in output
                .data()
                .chunks_exact(n)
                .zip(grad_out.chunks_exact(n))
                .zip(dx.chunks_exact_mut(n))
            {
                let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[j] = y[j] * (g[j] - dot);
                }
            }
            vec![dx]
        }
    };
    Ok((grads, pg))
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `[rows, n]` buffer.
pub(crate) fn softmax_rows(data: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f32;
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - m).exp();
            s += *dst;
        }
        let inv = 1.0 / s;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

// ---------------------------------------------------------------------------
// gemm

/// `C = A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
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
            csc as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// convolution

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

/// Output columns `ox` whose input column `ox·s + kx − p` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.p.saturating_sub(kx).div_ceil(g.s);
    let hi = if g.w + g.p > kx {
        ((g.w + g.p - kx - 1) / g.s + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let hw = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let ix0 = lo * g.s + kx - g.p;
                    if g.s == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * g.s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.s + kx - g.p;
                    let from = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.s == 1 {
                        line[ix0..ix0 + hi - lo].iter_mut().zip(from).for_each(|(d, v)| *d += v);
                    } else {
                        for (j, v) in from.iter().enumerate() {
                            line[ix0 + j * g.s] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: &Tensor,
    params: &Params,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    out_shape: &[usize],
) -> Vec<f32> {
    let xs = x.shape();
    let g = ConvGeom {
        c: xs[1],
        h: xs[2],
        w: xs[3],
        k,
        s,
        p,
        oh: out_shape[2],
        ow: out_shape[3],
    };
    let (batch, hw, ckk) = (xs[0], g.oh * g.ow, g.c * k * k);
    let w = params.weight.as_ref().expect("checked").data();
    let mut out = vec![0.0; batch * cout * hw];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; ckk * hw]
    };
    let in_plane = g.c * g.h * g.w;
    for b in 0..batch {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let src: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let ob = &mut out[b * cout * hw..(b + 1) * cout * hw];
        gemm(cout, ckk, hw, w, (ckk, 1), src, (hw, 1), 0.0, ob, (hw, 1));
        if let Some(bias) = &params.bias {
            for (row, &bv) in ob.chunks_exact_mut(hw).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    params: &Params,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    out_shape: &[usize],
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let xs = x.shape();
    let g = ConvGeom {
        c: xs[1],
        h: xs[2],
        w: xs[3],
        k,
        s,
        p,
        oh: out_shape[2],
        ow: out_shape[3],
    };
    let (batch, hw, ckk) = (xs[0], g.oh * g.ow, g.c * k * k);
    let w = params.weight.as_ref().expect("checked").data();
    let in_plane = g.c * g.h * g.w;
    let mut dw = vec![0.0; cout * ckk];
    let mut dx = vec![0.0; x.len()];
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; ckk * hw] };
    let mut dcol = if pointwise { Vec::new() } else { vec![0.0; ckk * hw] };
    for b in 0..batch {
        let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
        let dyb = &dy[b * cout * hw..(b + 1) * cout * hw];
        let src: &[f32] = if pointwise {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        // dW += dY_b · col_bᵀ
        gemm(cout, hw, ckk, dyb, (hw, 1), src, (1, hw), 1.0, &mut dw, (ckk, 1));
        let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
        if pointwise {
            gemm(ckk, cout, hw, w, (1, ckk), dyb, (hw, 1), 0.0, dxb, (hw, 1));
        } else {
            gemm(ckk, cout, hw, w, (1, ckk), dyb, (hw, 1), 0.0, &mut dcol, (hw, 1));
            col2im(&dcol, &g, dxb);
        }
    }
    let db = params.bias.as_ref().map(|_| {
        let mut db = vec![0.0f32; cout];
        for b in 0..batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let base = (b * cout + o) * hw;
                *acc += dy[base..base + hw].iter().sum::<f32>();
            }
        }
        db
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// linear

fn linear_forward(x: &Tensor, params: &Params, out: usize) -> Vec<f32> {
    let (batch, inf) = (x.shape()[0], x.shape()[1]);
    let w = params.weight.as_ref().expect("checked").data();
    let mut y = vec![0.0; batch * out];
    gemm(batch, inf, out, x.data(), (inf, 1), w, (1, inf), 0.0, &mut y, (out, 1));
    if let Some(bias) = &params.bias {
        for row in y.chunks_exact_mut(out) {
            row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
        }
    }
    y
}

fn linear_backward(
    x: &Tensor,
    params: &Params,
    out: usize,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let (batch, inf) = (x.shape()[0], x.shape()[1]);
    let w = params.weight.as_ref().expect("checked").data();
    let mut dx = vec![0.0; batch * inf];
    gemm(batch, out, inf, dy, (out, 1), w, (inf, 1), 0.0, &mut dx, (inf, 1));
    let mut dw = vec![0.0; out * inf];
    gemm(out, batch, inf, dy, (1, out), x.data(), (inf, 1), 0.0, &mut dw, (inf, 1));
    let db = params.bias.as_ref().map(|_| {
        let mut db = vec![0.0; out];
        for row in dy.chunks_exact(out) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        db
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// batch norm

fn bn_layout(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    let inner = if s.len() == 4 { s[2] * s[3] } else { 1 };
    (s[0], s[1], inner)
}

fn batch_norm_forward(x: &Tensor, params: &Params, eps: f32, mode: Mode) -> (Vec<f32>, Cache) {
    let (batch, c, inner) = bn_layout(x);
    let gamma = params.gamma.as_ref().expect("checked").data();
    let beta = params.beta.as_ref().expect("checked").data();
    let n = batch * inner;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut batch_var = vec![0.0f32; c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let (mut s, mut s2) = (0.0f64, 0.0f64);
                for b in 0..batch {
                    let base = (b * c + ch) * inner;
                    for &v in &x.data()[base..base + inner] {
                        s += v as f64;
                    }
                }
                let m = s / n as f64;
                for b in 0..batch {
                    let base = (b * c + ch) * inner;
                    for &v in &x.data()[base..base + inner] {
                        let d = v as f64 - m;
                        s2 += d * d;
                    }
                }
                mean[ch] = m as f32;
                var[ch] = (s2 / n as f64) as f32;
                batch_var[ch] = if n > 1 {
                    (s2 / (n - 1) as f64) as f32
                } else {
                    var[ch]
                };
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(params.running_mean.as_ref().expect("checked").data());
            var.copy_from_slice(params.running_var.as_ref().expect("checked").data());
        }
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (
        y,
        Cache::BatchNorm {
            xhat,
            inv_std,
            mode,
            batch_mean: if mode == Mode::Train { mean } else { Vec::new() },
            batch_var: if mode == Mode::Train { batch_var } else { Vec::new() },
        },
    )
}

fn batch_norm_backward(
    x: &Tensor,
    params: &Params,
    xhat: &[f32],
    inv_std: &[f32],
    mode: Mode,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (batch, c, inner) = bn_layout(x);
    let gamma = params.gamma.as_ref().expect("checked").data();
    let n = (batch * inner) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let scale = gamma[ch] * inv_std[ch];
            for i in base..base + inner {
                dx[i] = match mode {
                    Mode::Eval => dy[i] * scale,
                    Mode::Train => {
                        scale / n * (n * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    }
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// pooling

fn max_pool_forward(x: &Tensor, k: usize, s: usize, out_shape: &[usize]) -> (Vec<f32>, Vec<u32>) {
    let xs = x.shape();
    let (h, w) = (xs[2], xs[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let planes = xs[0] * xs[1];
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut at = base + oy * s * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * s + ky) * w + ox * s + kx;
                        let v = x.data()[i];
                        if v > best {
                            best = v;
                            at = i;
                        }
                    }
                }
                out.push(best);
                idx.push(at as u32);
            }
        }
    }
    (out, idx)
}

fn avg_pool_forward(x: &Tensor, k: usize, s: usize, out_shape: &[usize]) -> Vec<f32> {
    let xs = x.shape();
    let (h, w) = (xs[2], xs[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let inv = 1.0 / (k * k) as f32;
    let mut out = Vec::with_capacity(xs[0] * xs[1] * oh * ow);
    for pl in 0..xs[0] * xs[1] {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x.data()[base + (oy * s + ky) * w + ox * s + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

fn avg_pool_backward(x: &Tensor, k: usize, s: usize, out_shape: &[usize], dy: &[f32]) -> Vec<f32> {
    let xs = x.shape();
    let (h, w) = (xs[2], xs[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0; x.len()];
    for pl in 0..xs[0] * xs[1] {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(pl * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        dx[base + (oy * s + ky) * w + ox * s + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// elementwise binary and concat

/// Plane size of each operand when one side is a `[B, C, 1, 1]` gate.
fn mul_planes(a: &Tensor, b: &Tensor) -> (usize, usize) {
    if a.shape() == b.shape() {
        return (1, 1);
    }
    let pa = a.shape()[2] * a.shape()[3];
    let pb = b.shape()[2] * b.shape()[3];
    (pa, pb)
}

fn mul_forward(a: &Tensor, b: &Tensor) -> Vec<f32> {
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    }
    let (pa, pb) = mul_planes(a, b);
    let (full, gate, plane) = if pa >= pb { (a, b, pa) } else { (b, a, pb) };
    full.data()
        .chunks_exact(plane)
        .zip(gate.data())
        .flat_map(|(row, &g)| row.iter().map(move |v| v * g))
        .collect()
}

fn mul_backward(a: &Tensor, b: &Tensor, dy: &[f32]) -> Vec<Vec<f32>> {
    if a.shape() == b.shape() {
        let da = dy.iter().zip(b.data()).map(|(g, y)| g * y).collect();
        let db = dy.iter().zip(a.data()).map(|(g, x)| g * x).collect();
        return vec![da, db];
    }
    let (pa, pb) = mul_planes(a, b);
    let a_is_full = pa >= pb;
    let (full, gate, plane) = if a_is_full { (a, b, pa) } else { (b, a, pb) };
    let mut dfull = vec![0.0; full.len()];
    let mut dgate = vec![0.0; gate.len()];
    for ((row, drow), dg) in full
        .data()
        .chunks_exact(plane)
        .zip(dy.chunks_exact(plane))
        .zip(dgate.iter_mut())
    {
        *dg = row.iter().zip(drow).map(|(v, d)| v * d).sum();
    }
    for ((dst, drow), &g) in dfull
        .chunks_exact_mut(plane)
        .zip(dy.chunks_exact(plane))
        .zip(gate.data())
    {
        dst.iter_mut().zip(drow).for_each(|(o, d)| *o = d * g);
    }
    if a_is_full {
        vec![dfull, dgate]
    } else {
        vec![dgate, dfull]
    }
}

fn concat_forward(inputs: &[&Tensor], out_shape: &[usize]) -> Vec<f32> {
    let batch = out_shape[0];
    let inner: usize = out_shape[2..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for b in 0..batch {
        for t in inputs {
            let chunk = t.shape()[1] * inner;
            out.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    out
}

fn concat_backward(inputs: &[&Tensor], out_shape: &[usize], dy: &[f32]) -> Vec<Vec<f32>> {
    let batch = out_shape[0];
    let inner: usize = out_shape[2..].iter().product();
    let total = out_shape[1] * inner;
    let mut grads: Vec<Vec<f32>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for b in 0..batch {
        let mut off = b * total;
        for (t, g) in inputs.iter().zip(grads.iter_mut()) {
            let chunk = t.shape()[1] * inner;
            g.extend_from_slice(&dy[off..off + chunk]);
            off += chunk;
        }
    }
    grads
}
