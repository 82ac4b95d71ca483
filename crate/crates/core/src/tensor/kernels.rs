//! Forward, reverse and forward-mode rules for every primitive the models
//! and losses are built from.
//!
//! Conventions: batched tensors carry the batch in dimension 0. Convolution
//! is valid (no padding) with stride 1; max-pooling is 2x2 with stride 2.

use super::array::Tensor;
use crate::error::{Error, Result};

/// Primitive operation identifier, carrying any static operand it needs.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `x [N, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    Dense,
    /// Valid stride-1 convolution: `x [N, Cin, H, W]`, `w [Cout, Cin, K, K]`, `b [Cout]`.
    Conv2d,
    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`.
    MaxPool2,
    Relu,
    /// `[N, ...] -> [N, prod(...)]`.
    Flatten,
    /// `a [m, k] · b [k, n]` or `a [m, k] · b [k]`.
    MatMul,
    Add,
    Mul,
    Scale(f64),
    /// Row-wise log-softmax over the last dimension.
    LogSoftmax,
    /// `(logp [N, C], targets [N, C]) -> [N]`, `-Σ t·logp`.
    CrossEntropy,
    /// `logp [N, C] -> [N]`, `-Σ p·logp` with `p = exp(logp)`.
    Entropy,
    /// `(logp, logq) -> [N]`, `Σ p·(logp - logq)`.
    KlDiv,
    /// Logit margin `max_{i≠y} z_i - z_y` per row.
    Margin(Vec<usize>),
    /// Sum of all elements into a rank-0 tensor.
    Sum,
    /// Mean of all elements into a rank-0 tensor.
    Mean,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Dense => "dense",
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2 => "maxpool2",
            Primitive::Relu => "relu",
            Primitive::Flatten => "flatten",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::Entropy => "entropy",
            Primitive::KlDiv => "kl_div",
            Primitive::Margin(_) => "margin",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Dense | Primitive::Conv2d => 3,
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Mul
            | Primitive::CrossEntropy
            | Primitive::KlDiv => 2,
            _ => 1,
        }
    }
}

/// Forward values a primitive keeps for its backward and tangent rules.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved {
    #[default]
    Nothing,
    /// im2col buffers, one `[Cin·K·K, Oh·Ow]` block per batch row.
    Columns(Vec<f64>),
    /// Flat source index per output element (pooling) or runner-up class per
    /// row (margin).
    Indices(Vec<usize>),
}

/// Evaluates a primitive without recording it.
pub fn forward_primitive(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(op, inputs).map(|(t, _)| t)
}

pub(crate) fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    if inputs.len() != op.arity() {
        return Err(Error::shape(
            op.name(),
            format!("expected {} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    match op {
        Primitive::Dense => dense_forward(inputs[0], inputs[1], inputs[2]).map(|t| (t, Saved::Nothing)),
        Primitive::Conv2d => conv_forward(inputs[0], inputs[1], inputs[2]),
        Primitive::MaxPool2 => pool_forward(inputs[0]),
        Primitive::Relu => Ok((inputs[0].map(|v| v.max(0.0)), Saved::Nothing)),
        Primitive::Flatten => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(Error::shape("flatten", format!("need rank ≥ 2, got {:?}", x.shape())));
            }
            let n = x.rows();
            Ok((x.clone().reshape(&[n, x.row_len()])?, Saved::Nothing))
        }
        Primitive::MatMul => matmul_forward(inputs[0], inputs[1]).map(|t| (t, Saved::Nothing)),
        Primitive::Add => Ok((inputs[0].zip_with(inputs[1], |a, b| a + b)?, Saved::Nothing)),
        Primitive::Mul => Ok((inputs[0].zip_with(inputs[1], |a, b| a * b)?, Saved::Nothing)),
        Primitive::Scale(c) => Ok((inputs[0].map(|v| v * c), Saved::Nothing)),
        Primitive::LogSoftmax => log_softmax_forward(inputs[0]).map(|t| (t, Saved::Nothing)),
        Primitive::CrossEntropy => {
            let (logp, t) = (inputs[0], inputs[1]);
            same_shape("cross_entropy", logp, t)?;
            let c = class_dim("cross_entropy", logp)?;
            let out = logp
                .data()
                .chunks(c)
                .zip(t.data().chunks(c))
                .map(|(lp, tt)| -lp.iter().zip(tt).map(|(l, y)| y * l).sum::<f64>())
                .collect();
            Ok((Tensor::vector(out), Saved::Nothing))
        }
        Primitive::Entropy => {
            let logp = inputs[0];
            let c = class_dim("entropy", logp)?;
            let out = logp
                .data()
                .chunks(c)
                .map(|lp| -lp.iter().map(|&l| plogp(l)).sum::<f64>())
                .collect();
            Ok((Tensor::vector(out), Saved::Nothing))
        }
        Primitive::KlDiv => {
            let (lp, lq) = (inputs[0], inputs[1]);
            same_shape("kl_div", lp, lq)?;
            let c = class_dim("kl_div", lp)?;
            let out = lp
                .data()
                .chunks(c)
                .zip(lq.data().chunks(c))
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(&la, &lb)| {
                            let p = la.exp();
                            if p == 0.0 {
                                0.0
                            } else {
                                p * (la - lb)
                            }
                        })
                        .sum::<f64>()
                })
                .collect();
            Ok((Tensor::vector(out), Saved::Nothing))
        }
        Primitive::Margin(labels) => margin_forward(inputs[0], labels),
        Primitive::Sum => Ok((Tensor::scalar(inputs[0].sum()), Saved::Nothing)),
        Primitive::Mean => Ok((
            Tensor::scalar(inputs[0].sum() / inputs[0].numel() as f64),
            Saved::Nothing,
        )),
    }
}

/// `p·log p` evaluated from `log p`, with `0·log 0 = 0`.
fn plogp(logp: f64) -> f64 {
    let p = logp.exp();
    if p == 0.0 {
        0.0
    } else {
        p * logp
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn class_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [_, c] => Ok(*c),
        s => Err(Error::shape(op, format!("expected [N, C], got {s:?}"))),
    }
}

/// Row-major GEMM `c = a·b + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
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
            csc as isize,
        );
    }
}

fn dense_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, din) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape("dense", format!("input must be [N, in], got {s:?}"))),
    };
    let dout = match w.shape() {
        [o, i] if *i == din => *o,
        s => {
            return Err(Error::shape(
                "dense",
                format!("weight {s:?} does not accept {din} input features"),
            ))
        }
    };
    if b.shape() != [dout] {
        return Err(Error::shape(
            "dense",
            format!("bias {:?} does not match {dout} outputs", b.shape()),
        ));
    }
    Ok((n, din, dout))
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = dense_dims(x, w, b)?;
    let mut y = vec![0.0; n * dout];
    for row in y.chunks_mut(dout) {
        row.copy_from_slice(b.data());
    }
    gemm(n, din, dout, x.data(), (din, 1), w.data(), (1, din), 1.0, &mut y, (dout, 1));
    Tensor::new(vec![n, dout], y)
}

/// `x·wᵀ` without bias, used by the tangent rule.
fn dense_linear(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut y = vec![0.0; n * dout];
    gemm(n, din, dout, x.data(), (din, 1), w.data(), (1, din), 0.0, &mut y, (dout, 1));
    y
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_dims(x: &Tensor, wt: &Tensor, b: &Tensor) -> Result<ConvDims> {
    let (n, cin, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => return Err(Error::shape("conv2d", format!("input must be [N, C, H, W], got {s:?}"))),
    };
    let (cout, k) = match wt.shape() {
        [o, i, k1, k2] if *i == cin && k1 == k2 => (*o, *k1),
        s => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {s:?} incompatible with {cin} input channels"),
            ))
        }
    };
    if b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {cout} filters", b.shape()),
        ));
    }
    if h < k || w < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {h}x{w} smaller than kernel {k}x{k}"),
        ));
    }
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        k,
        oh: h - k + 1,
        ow: w - k + 1,
    })
}

fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let r = (ci * d.k + ky) * d.k + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..d.oh {
                    let src = &plane[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + d.ow];
                    dst[oy * d.ow..(oy + 1) * d.ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add(d: &ConvDims, cols: &[f64], gx: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.cin {
        let plane = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let r = (ci * d.k + ky) * d.k + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..d.oh {
                    let dst = &mut plane[(oy + ky) * d.w + kx..(oy + ky) * d.w + kx + d.ow];
                    for (a, b) in dst.iter_mut().zip(&src[oy * d.ow..(oy + 1) * d.ow]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, wt: &Tensor, b: &Tensor) -> Result<(Tensor, Saved)> {
    let d = conv_dims(x, wt, b)?;
    let (ckk, p) = (d.ckk(), d.p());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let mut cols = vec![0.0; d.n * ckk * p];
    let mut y = vec![0.0; d.n * out_len];
    for i in 0..d.n {
        let c = &mut cols[i * ckk * p..(i + 1) * ckk * p];
        im2col(&d, &x.data()[i * in_len..(i + 1) * in_len], c);
        let out = &mut y[i * out_len..(i + 1) * out_len];
        for (o, row) in out.chunks_mut(p).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm(d.cout, ckk, p, wt.data(), (ckk, 1), c, (p, 1), 1.0, out, (p, 1));
    }
    let t = Tensor::new(vec![d.n, d.cout, d.oh, d.ow], y)?;
    Ok((t, Saved::Columns(cols)))
}

/// Convolution of `x` with `wt`, no bias.
fn conv_linear(x: &Tensor, wt: &Tensor) -> Vec<f64> {
    let zero_bias = Tensor::zeros(&[wt.shape()[0]]);
    conv_forward(x, wt, &zero_bias)
        .map(|(t, _)| t.into_data())
        .expect("shapes validated by the primal forward")
}

fn pool_forward(x: &Tensor) -> Result<(Tensor, Saved)> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] if *h >= 2 && *w >= 2 => (*n, *c, *h, *w),
        s => return Err(Error::shape("maxpool2", format!("need [N, C, H≥2, W≥2], got {s:?}"))),
    };
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, Saved::Indices(idx)))
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(Error::shape("matmul", format!("left operand must be a matrix, got {s:?}"))),
    };
    match b.shape() {
        [k2, n] if *k2 == k => {
            let mut c = vec![0.0; m * n];
            gemm(m, k, *n, a.data(), (k, 1), b.data(), (*n, 1), 0.0, &mut c, (*n, 1));
            Tensor::new(vec![m, *n], c)
        }
        [k2] if *k2 == k => {
            let mut c = vec![0.0; m];
            gemm(m, k, 1, a.data(), (k, 1), b.data(), (1, 1), 0.0, &mut c, (1, 1));
            Tensor::new(vec![m], c)
        }
        s => Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {:?} · {s:?}", a.shape()),
        )),
    }
}

fn log_softmax_forward(x: &Tensor) -> Result<Tensor> {
    let c = class_dim("log_softmax", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn margin_forward(z: &Tensor, labels: &[usize]) -> Result<(Tensor, Saved)> {
    let c = class_dim("margin", z)?;
    if c < 2 {
        return Err(Error::shape("margin", "need at least two classes"));
    }
    if labels.len() != z.rows() {
        return Err(Error::shape(
            "margin",
            format!("{} labels for {} rows", labels.len(), z.rows()),
        ));
    }
    let mut out = Vec::with_capacity(labels.len());
    let mut runner = Vec::with_capacity(labels.len());
    for (row, &y) in z.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::shape("margin", format!("label {y} out of range for {c} classes")));
        }
        let mut best = if y == 0 { 1 } else { 0 };
        for (i, &v) in row.iter().enumerate() {
            if i != y && v > row[best] {
                best = i;
            }
        }
        out.push(row[best] - row[y]);
        runner.push(best);
    }
    Ok((Tensor::vector(out), Saved::Indices(runner)))
}

/// Reverse rule: gradients of the inputs that `needs` marks, given the
/// upstream gradient `g` of the output.
pub(crate) fn backward(
    op: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let out = match op {
        Primitive::Dense => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            let gd = g.data();
            let gx = want(0).then(|| {
                let mut gx = vec![0.0; n * din];
                gemm(n, dout, din, gd, (dout, 1), w.data(), (din, 1), 0.0, &mut gx, (din, 1));
                Tensor::new(vec![n, din], gx).unwrap()
            });
            let gw = want(1).then(|| {
                let mut gw = vec![0.0; dout * din];
                gemm(dout, n, din, gd, (1, dout), x.data(), (din, 1), 0.0, &mut gw, (din, 1));
                Tensor::new(vec![dout, din], gw).unwrap()
            });
            let gb = want(2).then(|| {
                let mut gb = vec![0.0; dout];
                for row in gd.chunks(dout) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::vector(gb)
            });
            vec![gx, gw, gb]
        }
        Primitive::Conv2d => {
            let (x, wt, b) = (inputs[0], inputs[1], inputs[2]);
            let d = conv_dims(x, wt, b)?;
            let cols = match saved {
                Saved::Columns(c) => c,
                _ => unreachable!("conv2d always saves its columns"),
            };
            let (ckk, p) = (d.ckk(), d.p());
            let in_len = d.cin * d.h * d.w;
            let out_len = d.cout * p;
            let gd = g.data();
            let mut gx = want(0).then(|| vec![0.0; d.n * in_len]);
            let mut gw = want(1).then(|| vec![0.0; d.cout * ckk]);
            let mut gb = want(2).then(|| vec![0.0; d.cout]);
            let mut gcols = vec![0.0; ckk * p];
            for i in 0..d.n {
                let go = &gd[i * out_len..(i + 1) * out_len];
                let c = &cols[i * ckk * p..(i + 1) * ckk * p];
                if let Some(gw) = gw.as_mut() {
                    gemm(d.cout, p, ckk, go, (p, 1), c, (1, p), 1.0, gw, (ckk, 1));
                }
                if let Some(gb) = gb.as_mut() {
                    for (o, row) in go.chunks(p).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(ckk, d.cout, p, wt.data(), (1, ckk), go, (p, 1), 0.0, &mut gcols, (p, 1));
                    col2im_add(&d, &gcols, &mut gx[i * in_len..(i + 1) * in_len]);
                }
            }
            vec![
                gx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
                gw.map(|v| Tensor::new(wt.shape().to_vec(), v).unwrap()),
                gb.map(Tensor::vector),
            ]
        }
        Primitive::MaxPool2 => {
            let idx = indices(saved);
            let mut gx = vec![0.0; inputs[0].numel()];
            for (&j, &gv) in idx.iter().zip(g.data()) {
                gx[j] += gv;
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)]
        }
        Primitive::Relu => vec![Some(inputs[0].zip_with(g, |x, gv| if x > 0.0 { gv } else { 0.0 })?)],
        Primitive::Flatten => vec![Some(g.clone().reshape(inputs[0].shape())?)],
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = if b.rank() == 2 { b.shape()[1] } else { 1 };
            let ga = want(0).then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), 0.0, &mut ga, (k, 1));
                Tensor::new(vec![m, k], ga).unwrap()
            });
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), 0.0, &mut gb, (n, 1));
                Tensor::new(b.shape().to_vec(), gb).unwrap()
            });
            vec![ga, gb]
        }
        Primitive::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Primitive::Mul => vec![
            want(0).then(|| g.zip_with(inputs[1], |a, b| a * b).unwrap()),
            want(1).then(|| g.zip_with(inputs[0], |a, b| a * b).unwrap()),
        ],
        Primitive::Scale(c) => vec![Some(g.map(|v| v * c))],
        Primitive::LogSoftmax => {
            let c = output.shape()[1];
            let mut gx = Vec::with_capacity(g.numel());
            for (lp, gr) in output.data().chunks(c).zip(g.data().chunks(c)) {
                let s: f64 = gr.iter().sum();
                gx.extend(lp.iter().zip(gr).map(|(l, gv)| gv - l.exp() * s));
            }
            vec![Some(Tensor::new(output.shape().to_vec(), gx)?)]
        }
        Primitive::CrossEntropy => {
            let (logp, t) = (inputs[0], inputs[1]);
            let c = logp.shape()[1];
            let row_scaled = |src: &Tensor| {
                let data = src
                    .data()
                    .chunks(c)
                    .zip(g.data())
                    .flat_map(|(r, &gv)| r.iter().map(move |v| -gv * v))
                    .collect();
                Tensor::new(src.shape().to_vec(), data).unwrap()
            };
            vec![want(0).then(|| row_scaled(t)), want(1).then(|| row_scaled(logp))]
        }
        Primitive::Entropy => {
            let logp = inputs[0];
            let c = logp.shape()[1];
            let data = logp
                .data()
                .chunks(c)
                .zip(g.data())
                .flat_map(|(r, &gv)| {
                    r.iter().map(move |&l| {
                        let p = l.exp();
                        if p == 0.0 {
                            0.0
                        } else {
                            -gv * p * (l + 1.0)
                        }
                    })
                })
                .collect();
            vec![Some(Tensor::new(logp.shape().to_vec(), data)?)]
        }
        Primitive::KlDiv => {
            let (lp, lq) = (inputs[0], inputs[1]);
            let c = lp.shape()[1];
            let mut ga = want(0).then(|| Vec::with_capacity(lp.numel()));
            let mut gb = want(1).then(|| Vec::with_capacity(lp.numel()));
            for ((a, b), &gv) in lp.data().chunks(c).zip(lq.data().chunks(c)).zip(g.data()) {
                for (&la, &lb) in a.iter().zip(b) {
                    let p = la.exp();
                    if let Some(ga) = ga.as_mut() {
                        ga.push(if p == 0.0 { 0.0 } else { gv * p * (la - lb + 1.0) });
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.push(-gv * p);
                    }
                }
            }
            vec![
                ga.map(|v| Tensor::new(lp.shape().to_vec(), v).unwrap()),
                gb.map(|v| Tensor::new(lq.shape().to_vec(), v).unwrap()),
            ]
        }
        Primitive::Margin(labels) => {
            let z = inputs[0];
            let c = z.shape()[1];
            let runner = indices(saved);
            let mut gz = vec![0.0; z.numel()];
            for (i, (&y, &j)) in labels.iter().zip(runner).enumerate() {
                gz[i * c + j] += g.data()[i];
                gz[i * c + y] -= g.data()[i];
            }
            vec![Some(Tensor::new(z.shape().to_vec(), gz)?)]
        }
        Primitive::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))],
        Primitive::Mean => {
            let n = inputs[0].numel() as f64;
            vec![Some(Tensor::full(inputs[0].shape(), g.data()[0] / n))]
        }
    };
    Ok(out)
}

fn indices(saved: &Saved) -> &[usize] {
    match saved {
        Saved::Indices(v) => v,
        _ => unreachable!("primitive saves indices"),
    }
}

/// Forward-mode rule: the output tangent given input tangents (`None` = zero).
pub(crate) fn tangent(
    op: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    dx: &[Option<&Tensor>],
) -> Result<Tensor> {
    let zero = |i: usize| Tensor::zeros(inputs[i].shape());
    let get = |i: usize| dx[i].cloned().unwrap_or_else(|| zero(i));
    let t = match op {
        Primitive::Dense => {
            let (x, w) = (inputs[0], inputs[1]);
            let dout = w.shape()[0];
            let mut y = vec![0.0; x.shape()[0] * dout];
            if let Some(t) = dx[0] {
                add_into(&mut y, &dense_linear(t, w));
            }
            if let Some(t) = dx[1] {
                add_into(&mut y, &dense_linear(x, t));
            }
            if let Some(t) = dx[2] {
                for row in y.chunks_mut(dout) {
                    add_into(row, t.data());
                }
            }
            Tensor::new(output.shape().to_vec(), y)?
        }
        Primitive::Conv2d => {
            let (x, w) = (inputs[0], inputs[1]);
            let mut y = vec![0.0; output.numel()];
            if let Some(t) = dx[0] {
                add_into(&mut y, &conv_linear(t, w));
            }
            if let Some(t) = dx[1] {
                add_into(&mut y, &conv_linear(x, t));
            }
            if let Some(t) = dx[2] {
                let p = output.shape()[2] * output.shape()[3];
                for (j, chunk) in y.chunks_mut(p).enumerate() {
                    let o = j % t.numel();
                    chunk.iter_mut().for_each(|v| *v += t.data()[o]);
                }
            }
            Tensor::new(output.shape().to_vec(), y)?
        }
        Primitive::MaxPool2 => {
            let t = get(0);
            let data = indices(saved).iter().map(|&j| t.data()[j]).collect();
            Tensor::new(output.shape().to_vec(), data)?
        }
        Primitive::Relu => inputs[0].zip_with(&get(0), |x, t| if x > 0.0 { t } else { 0.0 })?,
        Primitive::Flatten => get(0).reshape(output.shape())?,
        Primitive::MatMul => {
            let mut y = Tensor::zeros(output.shape());
            if let Some(t) = dx[0] {
                y.add_assign(&matmul_forward(t, inputs[1])?);
            }
            if let Some(t) = dx[1] {
                y.add_assign(&matmul_forward(inputs[0], t)?);
            }
            y
        }
        Primitive::Add => get(0).zip_with(&get(1), |a, b| a + b)?,
        Primitive::Mul => {
            let a = inputs[0].zip_with(&get(1), |a, t| a * t)?;
            let b = inputs[1].zip_with(&get(0), |b, t| b * t)?;
            a.zip_with(&b, |u, v| u + v)?
        }
        Primitive::Scale(c) => get(0).map(|v| v * c),
        Primitive::LogSoftmax => {
            let t = get(0);
            let c = output.shape()[1];
            let mut y = Vec::with_capacity(t.numel());
            for (lp, tr) in output.data().chunks(c).zip(t.data().chunks(c)) {
                let s: f64 = lp.iter().zip(tr).map(|(l, v)| l.exp() * v).sum();
                y.extend(tr.iter().map(|v| v - s));
            }
            Tensor::new(output.shape().to_vec(), y)?
        }
        Primitive::CrossEntropy => {
            let (dl, dt) = (get(0), get(1));
            let c = inputs[0].shape()[1];
            let y = (0..inputs[0].rows())
                .map(|i| {
                    let r = i * c..(i + 1) * c;
                    -(inputs[1].data()[r.clone()].iter().zip(&dl.data()[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        + inputs[0].data()[r.clone()].iter().zip(&dt.data()[r]).map(|(a, b)| a * b).sum::<f64>())
                })
                .collect();
            Tensor::vector(y)
        }
        Primitive::Entropy => {
            let t = get(0);
            let c = inputs[0].shape()[1];
            let y = inputs[0]
                .data()
                .chunks(c)
                .zip(t.data().chunks(c))
                .map(|(lp, tr)| {
                    -lp.iter()
                        .zip(tr)
                        .map(|(&l, v)| {
                            let p = l.exp();
                            if p == 0.0 {
                                0.0
                            } else {
                                p * (l + 1.0) * v
                            }
                        })
                        .sum::<f64>()
                })
                .collect();
            Tensor::vector(y)
        }
        Primitive::KlDiv => {
            let (ta, tb) = (get(0), get(1));
            let c = inputs[0].shape()[1];
            let y = (0..inputs[0].rows())
                .map(|i| {
                    (i * c..(i + 1) * c)
                        .map(|j| {
                            let (la, lb) = (inputs[0].data()[j], inputs[1].data()[j]);
                            let p = la.exp();
                            if p == 0.0 {
                                0.0
                            } else {
                                p * (la - lb + 1.0) * ta.data()[j] - p * tb.data()[j]
                            }
                        })
                        .sum()
                })
                .collect();
            Tensor::vector(y)
        }
        Primitive::Margin(labels) => {
            let t = get(0);
            let c = inputs[0].shape()[1];
            let y = labels
                .iter()
                .zip(indices(saved))
                .enumerate()
                .map(|(i, (&l, &j))| t.data()[i * c + j] - t.data()[i * c + l])
                .collect();
            Tensor::vector(y)
        }
        Primitive::Sum => Tensor::scalar(get(0).sum()),
        Primitive::Mean => Tensor::scalar(get(0).sum() / inputs[0].numel() as f64),
    };
    Ok(t)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = forward_primitive(&Primitive::Relu, &[&Tensor::vector(vec![-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let v = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let y = forward_primitive(&Primitive::MatMul, &[&Tensor::identity(3), &v]).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn conv_and_pool_shapes_follow_the_mnist_stack() {
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        let w = Tensor::zeros(&[10, 1, 5, 5]);
        let b = Tensor::zeros(&[10]);
        let y = forward_primitive(&Primitive::Conv2d, &[&x, &w, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 10, 24, 24]);
        let p = forward_primitive(&Primitive::MaxPool2, &[&y]).unwrap();
        assert_eq!(p.shape(), &[1, 10, 12, 12]);
        let w2 = Tensor::zeros(&[20, 10, 5, 5]);
        let y2 = forward_primitive(&Primitive::Conv2d, &[&p, &w2, &Tensor::zeros(&[20])]).unwrap();
        let p2 = forward_primitive(&Primitive::MaxPool2, &[&y2]).unwrap();
        let f = forward_primitive(&Primitive::Flatten, &[&p2]).unwrap();
        assert_eq!(f.shape(), &[1, 320]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 example, 2 channels, 4x4 input, 3 filters of 3x3.
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = forward_primitive(
            &Primitive::Conv2d,
            &[&t(&[1, 2, 4, 4], &x), &t(&[3, 2, 3, 3], &w), &Tensor::vector(b.clone())],
        )
        .unwrap();
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x[(c * 4 + oy + ky) * 4 + ox + kx];
                            }
                        }
                    }
                    let got = y.data()[(o * 2 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 5]);
        let b = Tensor::zeros(&[4]);
        let err = forward_primitive(&Primitive::Dense, &[&x, &w, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 5]") && msg.contains('3'), "{msg}");
        let err = forward_primitive(&Primitive::Conv2d, &[&Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1, 1, 5, 5]), &Tensor::zeros(&[1])]).unwrap_err();
        assert!(err.to_string().contains("3x3"));
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let x = t(&[1, 3], &[1000.0, -1000.0, 999.0]);
        let y = forward_primitive(&Primitive::LogSoftmax, &[&x]).unwrap();
        assert!(y.is_finite());
        let total: f64 = y.data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn margin_matches_definition() {
        let z = t(&[2, 3], &[3.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let m = forward_primitive(&Primitive::Margin(vec![0, 0]), &[&z]).unwrap();
        assert_eq!(m.data(), &[-2.0, 0.0]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let (_, saved) = forward(&Primitive::MaxPool2, &[&x]).unwrap();
        assert_eq!(indices(&saved), &[0]);
    }
}
