//! Forward and backward kernels for the non-elementwise primitives.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// `c[m x n] = a[m x k] . b[k x n] + beta * c`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: isize, c: isize, rows: usize, cols: usize| (rows - 1) * r as usize + (cols - 1) * c as usize + 1;
    assert!(c.len() >= span(rsc, csc, m, n));
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc as usize + j * csc as usize] *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= span(rsa, csa, m, k) && b.len() >= span(rsb, csb, k, n));
    // SAFETY: the asserts above bound every strided access; c does not
    // alias a or b because it is borrowed mutably.
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
            rsc,
            csc,
        );
    }
}

/// `y = x . w^T + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (batch, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut y = Tensor::zeros(&[batch, fout]);
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        batch,
        fin,
        fout,
        x.data(),
        (fin as isize, 1),
        w.data(),
        (1, fin as isize),
        beta,
        y.data_mut(),
        (fout as isize, 1),
    );
    y
}

/// Gradients of [`linear_forward`] w.r.t. `x`, `w` and `b`.
pub fn linear_backward(g: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut dx = Tensor::zeros(&[batch, fin]);
    gemm(
        batch,
        fout,
        fin,
        g.data(),
        (fout as isize, 1),
        w.data(),
        (fin as isize, 1),
        0.0,
        dx.data_mut(),
        (fin as isize, 1),
    );
    let mut dw = Tensor::zeros(&[fout, fin]);
    gemm(
        fout,
        batch,
        fin,
        g.data(),
        (1, fout as isize),
        x.data(),
        (fin as isize, 1),
        0.0,
        dw.data_mut(),
        (fin as isize, 1),
    );
    let mut db = Tensor::zeros(&[fout]);
    for row in g.data().chunks(fout) {
        for (d, v) in db.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, w: &Tensor, opts: &ConvOptions) -> Self {
        let xs = x.shape();
        let ws = w.shape();
        let (kh, kw) = (ws[2], ws[3]);
        Self {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            cin_g: ws[1],
            cout_g: ws[0] / opts.groups,
            kh,
            kw,
            oh: conv_output_size(xs[2], kh, opts.stride, opts.padding),
            ow: conv_output_size(xs[3], kw, opts.stride, opts.padding),
            stride: opts.stride,
            padding: opts.padding,
            groups: opts.groups,
        }
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Rows of the unfolded input of one group.
    fn patch(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col index, input index)` for every in-bounds patch entry of
    /// the input channels `c0..c0 + cin_g` of one sample.
    fn for_each_patch(&self, x_base: usize, mut f: impl FnMut(usize, usize)) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let plane = self.out_plane();
        for ic in 0..self.cin_g {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ic * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.oh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let xi = x_base + (ic * self.h + iy as usize) * self.w + ix as usize;
                            f(row + oy * self.ow + ox, xi);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], x_base: usize, col: &mut [f64]) {
        col.fill(0.0);
        self.for_each_patch(x_base, |ci, xi| col[ci] = x[xi]);
    }
}

/// `x: [batch, cin, h, w]`, `w: [cout, cin / groups, kh, kw]`, `b: [cout]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, opts: &ConvOptions) -> Tensor {
    let geo = ConvGeometry::new(x, w, opts);
    let mut y = Tensor::zeros(&[geo.batch, geo.cout, geo.oh, geo.ow]);
    let (xd, wd) = (x.data(), w.data());
    let (patch, plane, hw) = (geo.patch(), geo.out_plane(), geo.h * geo.w);
    let yd = y.data_mut();
    let mut col = vec![0.0; if geo.pointwise() { 0 } else { patch * plane }];
    for g in 0..geo.groups {
        let wg = &wd[g * geo.cout_g * patch..];
        if geo.pointwise() && hw == 1 {
            gemm(
                geo.cout_g,
                patch,
                geo.batch,
                wg,
                (patch as isize, 1),
                &xd[g * geo.cin_g..],
                (1, geo.cin as isize),
                0.0,
                &mut yd[g * geo.cout_g..],
                (1, geo.cout as isize),
            );
            continue;
        }
        for n in 0..geo.batch {
            let x_base = (n * geo.cin + g * geo.cin_g) * hw;
            let src: &[f64] = if geo.pointwise() {
                &xd[x_base..]
            } else {
                geo.im2col(xd, x_base, &mut col);
                &col
            };
            gemm(
                geo.cout_g,
                patch,
                plane,
                wg,
                (patch as isize, 1),
                src,
                (plane as isize, 1),
                0.0,
                &mut yd[(n * geo.cout + g * geo.cout_g) * plane..],
                (plane as isize, 1),
            );
        }
    }
    if let Some(b) = b {
        for (i, chunk) in yd.chunks_mut(plane).enumerate() {
            let bias = b.data()[i % geo.cout];
            for v in chunk {
                *v += bias;
            }
        }
    }
    y
}

pub fn conv2d_backward(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    opts: &ConvOptions,
) -> (Tensor, Tensor, Tensor) {
    let geo = ConvGeometry::new(x, w, opts);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let (gd, xd, wd) = (g.data(), x.data(), w.data());
    let (patch, plane, hw) = (geo.patch(), geo.out_plane(), geo.h * geo.w);
    let mut col = vec![0.0; if geo.pointwise() { 0 } else { patch * plane }];
    let mut dcol = col.clone();
    for grp in 0..geo.groups {
        let w_off = grp * geo.cout_g * patch;
        if geo.pointwise() && hw == 1 {
            let (c_in, c_out) = (geo.cin as isize, geo.cout as isize);
            gemm(
                geo.cout_g,
                geo.batch,
                patch,
                &gd[grp * geo.cout_g..],
                (1, c_out),
                &xd[grp * geo.cin_g..],
                (c_in, 1),
                0.0,
                &mut dw.data_mut()[w_off..],
                (patch as isize, 1),
            );
            gemm(
                patch,
                geo.cout_g,
                geo.batch,
                &wd[w_off..],
                (1, patch as isize),
                &gd[grp * geo.cout_g..],
                (1, c_out),
                0.0,
                &mut dx.data_mut()[grp * geo.cin_g..],
                (1, c_in),
            );
            continue;
        }
        for n in 0..geo.batch {
            let x_base = (n * geo.cin + grp * geo.cin_g) * hw;
            let g_slice = &gd[(n * geo.cout + grp * geo.cout_g) * plane..];
            let src: &[f64] = if geo.pointwise() {
                &xd[x_base..]
            } else {
                geo.im2col(xd, x_base, &mut col);
                &col
            };
            gemm(
                geo.cout_g,
                plane,
                patch,
                g_slice,
                (plane as isize, 1),
                src,
                (1, plane as isize),
                1.0,
                &mut dw.data_mut()[w_off..],
                (patch as isize, 1),
            );
            let target: &mut [f64] = if geo.pointwise() {
                &mut dx.data_mut()[x_base..]
            } else {
                &mut dcol
            };
            gemm(
                patch,
                geo.cout_g,
                plane,
                &wd[w_off..],
                (1, patch as isize),
                g_slice,
                (plane as isize, 1),
                0.0,
                target,
                (plane as isize, 1),
            );
            if !geo.pointwise() {
                let dxd = dx.data_mut();
                geo.for_each_patch(x_base, |ci, xi| dxd[xi] += dcol[ci]);
            }
        }
    }
    let mut db = Tensor::zeros(&[geo.cout]);
    for (i, chunk) in gd.chunks(plane).enumerate() {
        db.data_mut()[i % geo.cout] += chunk.iter().sum::<f64>();
    }
    (dx, dw, db)
}

/// Channel axis is 1; statistics run over every other axis.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    (batch, channels, inner)
}

/// Per-channel mean and biased variance.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (batch, channels, inner) = channel_layout(x.shape());
    let m = (batch * inner) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let d = x.data();
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            mean[c] += d[base..base + inner].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            var[c] += d[base..base + inner]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel. Returns `(y, xhat)`.
pub fn normalize_channels(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> (Tensor, Tensor) {
    let (batch, channels, inner) = channel_layout(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gd[c] * h + bd[c];
            }
        }
    }
    (y, xhat)
}

/// Backward of batch normalization with batch statistics.
pub fn batch_norm_train_backward(
    g: &Tensor,
    xhat: &Tensor,
    gamma: &Tensor,
    inv_std: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (batch, channels, inner) = channel_layout(g.shape());
    let m = (batch * inner) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let (gd, hd) = (g.data(), xhat.data());
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            for i in base..base + inner {
                dgamma[c] += gd[i] * hd[i];
                dbeta[c] += gd[i];
            }
        }
    }
    let mut dx = Tensor::zeros(g.shape());
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            let scale = gamma.data()[c] * inv_std[c] / m;
            for i in base..base + inner {
                dx.data_mut()[i] = scale * (m * gd[i] - dbeta[c] - hd[i] * dgamma[c]);
            }
        }
    }
    (
        dx,
        Tensor::new(vec![channels], dgamma).expect("channel count"),
        Tensor::new(vec![channels], dbeta).expect("channel count"),
    )
}

/// Backward of batch normalization with frozen statistics.
pub fn batch_norm_eval_backward(
    g: &Tensor,
    xhat: &Tensor,
    gamma: &Tensor,
    inv_std: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (batch, channels, inner) = channel_layout(g.shape());
    let mut dx = Tensor::zeros(g.shape());
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let (gd, hd) = (g.data(), xhat.data());
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * inner;
            let scale = gamma.data()[c] * inv_std[c];
            for i in base..base + inner {
                dx.data_mut()[i] = gd[i] * scale;
                dgamma[c] += gd[i] * hd[i];
                dbeta[c] += gd[i];
            }
        }
    }
    (
        dx,
        Tensor::new(vec![channels], dgamma).expect("channel count"),
        Tensor::new(vec![channels], dbeta).expect("channel count"),
    )
}

/// Max pooling over `[batch, c, h, w]`; returns output and the flat input
/// index chosen for each output element.
pub fn max_pool2d_forward(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = conv_output_size(h, kernel, stride, padding);
    let ow = conv_output_size(w, kernel, stride, padding);
    let mut y = Tensor::zeros(&[batch, c, oh, ow]);
    let mut arg = vec![0usize; batch * c * oh * ow];
    let xd = x.data();
    let mut o = 0;
    for bc in 0..batch * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                y.data_mut()[o] = best;
                arg[o] = best_i;
                o += 1;
            }
        }
    }
    (y, arg)
}

/// Row-wise softmax of `[batch, classes]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Per-sample cross-entropy `-log softmax(logits)[label]`.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}
