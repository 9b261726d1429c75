//! Differentiable operations recorded on an [`AutodiffTape`].

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::scalar::Scalar;
use super::tape::AutodiffTape;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Index value that makes [`AutodiffTape::gather`] emit zero.
pub const GATHER_ZERO: usize = usize::MAX;

/// LeakyReLU negative slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// `N x C x 1 x 1` spatial mean.
    GlobalAvg,
    /// `N x 1 x H x W` mean over channels.
    ChannelAvg,
    /// `N x 1 x H x W` max over channels; ties route to the first channel.
    ChannelMax,
}

/// Boolean mask applied inside a row softmax. Masked entries get exactly
/// zero probability, the same as an additive negative infinity.
///
/// The softmax input is viewed as `slices x rows x cols`; slice `s` uses
/// mask group `(s / repeat) % groups`.
#[derive(Clone, Debug)]
pub struct SoftmaxMask {
    pub mask: Arc<Vec<bool>>,
    pub groups: usize,
    pub rows: usize,
    pub cols: usize,
    pub repeat: usize,
}

impl SoftmaxMask {
    fn row(&self, global_row: usize) -> &[bool] {
        let slice = global_row / self.rows;
        let r = global_row % self.rows;
        let g = (slice / self.repeat) % self.groups;
        let start = (g * self.rows + r) * self.cols;
        &self.mask[start..start + self.cols]
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn sum_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl<T: Scalar> AutodiffTape<T> {
    fn broadcast_binary(
        &self,
        name: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: fn(T, T) -> T,
        dfa: fn(T, T, T) -> T,
        dfb: fn(T, T, T) -> T,
    ) -> Result<Tensor<T>> {
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::contract(
                name,
                format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
            )
        })?;
        let (ad, bd) = (Arc::clone(a.data_arc()), Arc::clone(b.data_arc()));
        if a.shape() == b.shape() {
            let data: Vec<T> = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(self.record(name, out_shape, data, &[a, b], move |g, needs| {
                let ga = needs[0].then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&x, &y))| dfa(g, x, y))
                        .collect()
                });
                let gb = needs[1].then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&x, &y))| dfb(g, x, y))
                        .collect()
                });
                vec![ga, gb]
            }));
        }
        let sa = kernels::broadcast_strides(a.shape(), &out_shape);
        let sb = kernels::broadcast_strides(b.shape(), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            data[o] = f(ad[ia], bd[ib]);
        });
        let shape = out_shape.clone();
        Ok(self.record(name, out_shape, data, &[a, b], move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::ZERO; ad.len()]);
            let mut gb = needs[1].then(|| vec![T::ZERO; bd.len()]);
            kernels::for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += dfa(g[o], ad[ia], bd[ib]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += dfb(g[o], ad[ia], bd[ib]);
                }
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.broadcast_binary("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn scale(&self, x: &Tensor<T>, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        let data = x.data().iter().map(|&v| v * c).collect();
        self.record("scale", x.shape().to_vec(), data, &[x], move |g, _| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == x.numel(),
            "reshape",
            "cannot view {:?} as {shape:?}",
            x.shape()
        );
        let data = x.data().to_vec();
        Ok(self.record("reshape", shape.to_vec(), data, &[x], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// Backward scatters (adds) into the source positions.
    pub fn gather(
        &self,
        x: &Tensor<T>,
        index: Arc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<Tensor<T>> {
        let numel: usize = out_shape.iter().product();
        ensure!(
            numel == index.len(),
            "gather",
            "index length {} does not match output shape {out_shape:?}",
            index.len()
        );
        let src = x.data();
        let mut data = Vec::with_capacity(numel);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(T::ZERO);
            } else {
                ensure!(i < src.len(), "gather", "index {i} out of bounds {}", src.len());
                data.push(src[i]);
            }
        }
        let n_src = src.len();
        Ok(self.record("gather", out_shape.to_vec(), data, &[x], move |g, _| {
            let mut gx = vec![T::ZERO; n_src];
            for (&i, &v) in index.iter().zip(g) {
                if i != GATHER_ZERO {
                    gx[i] += v;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = x.rank();
        ensure!(r >= 2, "transpose_last2", "rank {r} < 2");
        let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
        let batch = x.numel() / (m * n);
        let mut idx = Vec::with_capacity(x.numel());
        for b in 0..batch {
            for j in 0..n {
                for i in 0..m {
                    idx.push(b * m * n + i * n + j);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        self.gather(x, Arc::new(idx), &shape)
    }

    /// Concatenate along axis 1.
    pub fn concat_axis1(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ensure!(!parts.is_empty(), "concat", "no inputs");
        let first = parts[0].shape();
        ensure!(first.len() >= 2, "concat", "rank must be >= 2");
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        for p in parts {
            ensure!(
                p.rank() == first.len() && p.shape()[0] == outer && p.shape()[2..] == first[2..],
                "concat",
                "shape {:?} incompatible with {:?}",
                p.shape(),
                first
            );
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[1] = total;
        Ok(self.record("concat", shape, data, parts, move |g, needs| {
            let mut offset = 0;
            let mut outs: Vec<Option<Vec<T>>> = widths
                .iter()
                .zip(needs)
                .map(|(&w, &n)| n.then(|| Vec::with_capacity(outer * w * inner)))
                .collect();
            for o in 0..outer {
                for (gp, &w) in outs.iter_mut().zip(&widths) {
                    let len = w * inner;
                    if let Some(gp) = gp.as_mut() {
                        let start = o * total * inner + offset;
                        gp.extend_from_slice(&g[start..start + len]);
                    }
                    offset += len;
                }
                offset = 0;
            }
            outs
        }))
    }

    /// Batched `a @ b` (or `a @ b^T` with `trans_b`) over equal leading dims.
    fn matmul_impl(&self, a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let (ra, rb) = (a.rank(), b.rank());
        ensure!(
            ra >= 2 && ra == rb && a.shape()[..ra - 2] == b.shape()[..rb - 2],
            "matmul",
            "leading dims of {:?} and {:?} must match",
            a.shape(),
            b.shape()
        );
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (kb, n) = if trans_b {
            (b.shape()[rb - 1], b.shape()[rb - 2])
        } else {
            (b.shape()[rb - 2], b.shape()[rb - 1])
        };
        ensure!(
            k == kb,
            "matmul",
            "inner dims differ: {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if trans_b { "^T" } else { "" }
        );
        let batch = a.numel() / (m * k);
        let (ad, bd) = (Arc::clone(a.data_arc()), Arc::clone(b.data_arc()));
        let mut out = vec![T::ZERO; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = a.shape().to_vec();
        shape[ra - 1] = n;
        Ok(self.record("matmul", shape, out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::ZERO; batch * m * k];
                for i in 0..batch {
                    // dA = dC B^T (or dC B when b holds B^T)
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &bd[i * k * n..],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::ZERO; batch * k * n];
                for i in 0..batch {
                    if trans_b {
                        // d(B^T stored n x k) = dC^T A
                        kernels::gemm(
                            n,
                            m,
                            k,
                            &g[i * m * n..],
                            true,
                            &ad[i * m * k..],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    } else {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_nt(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(a, b, true)
    }

    /// Affine map over the last axis: `x @ w + b` with `w` of shape `in x out`.
    pub fn linear(&self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        ensure!(w.rank() == 2, "linear", "weight must be 2-D, got {:?}", w.shape());
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let r = x.rank();
        ensure!(
            x.shape()[r - 1] == cin,
            "linear",
            "input width {} does not match weight {:?}",
            x.shape()[r - 1],
            w.shape()
        );
        if let Some(b) = b {
            ensure!(b.shape() == [cout], "linear", "bias shape {:?} != [{cout}]", b.shape());
        }
        let rows = x.numel() / cin;
        let (xd, wd) = (Arc::clone(x.data_arc()), Arc::clone(w.data_arc()));
        let mut out = vec![T::ZERO; rows * cout];
        if let Some(b) = b {
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.data());
            }
        }
        kernels::gemm(rows, cin, cout, &xd, false, &wd, false, &mut out, b.is_some());
        let mut shape = x.shape().to_vec();
        shape[r - 1] = cout;
        let bias_dummy = Tensor::scalar(T::ZERO);
        let inputs: [&Tensor<T>; 3] = [x, w, b.unwrap_or(&bias_dummy)];
        Ok(self.record("linear", shape, out, &inputs, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::ZERO; rows * cin];
                kernels::gemm(rows, cout, cin, g, false, &wd, true, &mut gx, false);
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::ZERO; cin * cout];
                kernels::gemm(cin, rows, cout, &xd, true, g, false, &mut gw, false);
                gw
            });
            let gb = needs[2].then(|| {
                let mut gb = vec![T::ZERO; cout];
                for row in g.chunks(cout) {
                    sum_into(&mut gb, row);
                }
                gb
            });
            vec![gx, gw, gb]
        }))
    }

    /// 2-D convolution, NCHW input, `OutC x InC x k x k` weight.
    pub fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let [n, cin, h, wd] = x.dims4("conv2d")?;
        ensure!(w.rank() == 4, "conv2d", "weight must be 4-D, got {:?}", w.shape());
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        ensure!(kh == kw, "conv2d", "non-square kernel {kh}x{kw}");
        ensure!(
            wcin == cin,
            "conv2d",
            "input has {cin} channels but weight {:?} expects {wcin}",
            w.shape()
        );
        ensure!(stride > 0, "conv2d", "stride must be positive");
        ensure!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d",
            "kernel {kh} larger than padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        );
        if let Some(b) = b {
            ensure!(b.shape() == [cout], "conv2d", "bias shape {:?} != [{cout}]", b.shape());
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            stride,
            pad,
        };
        let (ho, wo) = g.out_hw();
        let out = kernels::conv2d_forward(x.data(), w.data(), b.map(|b| b.data()), &g);
        let (xd, wdat) = (Arc::clone(x.data_arc()), Arc::clone(w.data_arc()));
        let has_bias = b.is_some();
        let bias_dummy = Tensor::scalar(T::ZERO);
        let inputs: [&Tensor<T>; 3] = [x, w, b.unwrap_or(&bias_dummy)];
        Ok(self.record("conv2d", vec![n, cout, ho, wo], out, &inputs, move |gout, needs| {
            let (dx, dw, db) =
                kernels::conv2d_backward(&xd, &wdat, gout, &g, needs[0], needs[1]);
            vec![dx, dw, (needs[2] && has_bias).then_some(db)]
        }))
    }

    fn unary(
        &self,
        name: &'static str,
        x: &Tensor<T>,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = x.data().iter().map(|&v| T::from_f64(f(v.to_f64()))).collect();
        let xd = Arc::clone(x.data_arc());
        let yd = Arc::new(data.clone());
        self.record(name, x.shape().to_vec(), data, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(xd.iter().zip(yd.iter()))
                    .map(|(&g, (&x, &y))| g * T::from_f64(df(x.to_f64(), y.to_f64())))
                    .collect(),
            )]
        })
    }

    pub fn activation(&self, kind: Activation, x: &Tensor<T>) -> Tensor<T> {
        match kind {
            Activation::LeakyRelu(slope) => self.unary(
                "leaky_relu",
                x,
                move |v| if v >= 0.0 { v } else { slope * v },
                move |v, _| if v >= 0.0 { 1.0 } else { slope },
            ),
            Activation::Sigmoid => self.unary(
                "sigmoid",
                x,
                |v| 1.0 / (1.0 + (-v).exp()),
                |_, y| y * (1.0 - y),
            ),
            Activation::Gelu => self.unary("gelu", x, gelu_fwd, |v, _| gelu_grad(v)),
        }
    }

    pub fn leaky_relu(&self, x: &Tensor<T>) -> Tensor<T> {
        self.activation(Activation::LeakyRelu(LEAKY_SLOPE), x)
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn gelu(&self, x: &Tensor<T>) -> Tensor<T> {
        self.activation(Activation::Gelu, x)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.softmax_masked(x, None)
    }

    pub fn softmax_masked(&self, x: &Tensor<T>, mask: Option<&SoftmaxMask>) -> Result<Tensor<T>> {
        let cols = *x.shape().last().expect("non-empty shape");
        if let Some(m) = mask {
            ensure!(
                m.cols == cols && x.numel().is_multiple_of(m.rows * cols),
                "softmax",
                "mask {}x{} incompatible with input {:?}",
                m.rows,
                m.cols,
                x.shape()
            );
        }
        let y = match mask {
            Some(m) => {
                let f = |r: usize, c: usize| m.row(r)[c];
                kernels::softmax_rows(x.data(), cols, Some(&f))
            }
            None => kernels::softmax_rows(x.data(), cols, None),
        };
        let yd = Arc::new(y.clone());
        Ok(self.record("softmax", x.shape().to_vec(), y, &[x], move |g, _| {
            vec![Some(kernels::softmax_rows_backward(&yd, g, cols))]
        }))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let c = *x.shape().last().expect("non-empty shape");
        ensure!(
            gamma.shape() == [c] && beta.shape() == [c],
            "layer_norm",
            "affine params {:?}/{:?} must be [{c}]",
            gamma.shape(),
            beta.shape()
        );
        let (y, xhat, inv_std) =
            kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), c, T::from_f64(eps));
        let gd = Arc::clone(gamma.data_arc());
        Ok(self.record(
            "layer_norm",
            x.shape().to_vec(),
            y,
            &[x, gamma, beta],
            move |g, needs| {
                let (dx, dg, db) = kernels::layer_norm_rows_backward(&xhat, &inv_std, &gd, g, c);
                vec![
                    needs[0].then_some(dx),
                    needs[1].then_some(dg),
                    needs[2].then_some(db),
                ]
            },
        ))
    }

    pub fn pool(&self, kind: PoolKind, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4("pool")?;
        let hw = h * w;
        let src = Arc::clone(x.data_arc());
        match kind {
            PoolKind::GlobalAvg => {
                let inv = T::from_f64(1.0 / hw as f64);
                let data: Vec<T> = src
                    .chunks(hw)
                    .map(|p| {
                        let mut s = T::ZERO;
                        for &v in p {
                            s += v;
                        }
                        s * inv
                    })
                    .collect();
                Ok(self.record("global_avg", vec![n, c, 1, 1], data, &[x], move |g, _| {
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for &gv in g {
                        gx.extend(std::iter::repeat_n(gv * inv, hw));
                    }
                    vec![Some(gx)]
                }))
            }
            PoolKind::ChannelAvg => {
                let inv = T::from_f64(1.0 / c as f64);
                let mut data = vec![T::ZERO; n * hw];
                for b in 0..n {
                    for ch in 0..c {
                        sum_into(
                            &mut data[b * hw..(b + 1) * hw],
                            &src[(b * c + ch) * hw..(b * c + ch + 1) * hw],
                        );
                    }
                }
                data.iter_mut().for_each(|v| *v *= inv);
                Ok(self.record("channel_avg", vec![n, 1, h, w], data, &[x], move |g, _| {
                    let mut gx = vec![T::ZERO; n * c * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let dst = &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (d, &gv) in dst.iter_mut().zip(&g[b * hw..(b + 1) * hw]) {
                                *d = gv * inv;
                            }
                        }
                    }
                    vec![Some(gx)]
                }))
            }
            PoolKind::ChannelMax => {
                let mut data = vec![T::ZERO; n * hw];
                let mut arg = vec![0usize; n * hw];
                for b in 0..n {
                    for p in 0..hw {
                        let mut best = src[b * c * hw + p];
                        let mut bi = 0;
                        for ch in 1..c {
                            let v = src[(b * c + ch) * hw + p];
                            if v > best {
                                best = v;
                                bi = ch;
                            }
                        }
                        data[b * hw + p] = best;
                        arg[b * hw + p] = bi;
                    }
                }
                Ok(self.record("channel_max", vec![n, 1, h, w], data, &[x], move |g, _| {
                    let mut gx = vec![T::ZERO; n * c * hw];
                    for b in 0..n {
                        for p in 0..hw {
                            gx[(b * c + arg[b * hw + p]) * hw + p] += g[b * hw + p];
                        }
                    }
                    vec![Some(gx)]
                }))
            }
        }
    }

    /// `N x (C r^2) x H x W -> N x C x rH x rW`.
    pub fn pixel_shuffle(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        let [n, cr, h, w] = x.dims4("pixel_shuffle")?;
        ensure!(r > 0, "pixel_shuffle", "factor must be positive");
        ensure!(
            cr % (r * r) == 0,
            "pixel_shuffle",
            "{cr} channels not divisible by r^2 = {}",
            r * r
        );
        let c = cr / (r * r);
        self.gather(
            x,
            Arc::new(pixel_shuffle_index(n, c, h, w, r)),
            &[n, c, h * r, w * r],
        )
    }

    /// `N x C x rH x rW -> N x (C r^2) x H x W`, the inverse of
    /// [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        let [n, c, oh, ow] = x.dims4("pixel_unshuffle")?;
        ensure!(
            r > 0 && oh % r == 0 && ow % r == 0,
            "pixel_unshuffle",
            "spatial dims {oh}x{ow} not divisible by factor {r}"
        );
        let (h, w) = (oh / r, ow / r);
        self.gather(
            x,
            Arc::new(invert_permutation(&pixel_shuffle_index(n, c, h, w, r))),
            &[n, c * r * r, h, w],
        )
    }

    pub fn sum_all(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut s = T::ZERO;
        for &v in x.data() {
            s += v;
        }
        let n = x.numel();
        self.record("sum", vec![1], vec![s], &[x], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / x.numel() as f64)
    }

    /// Mean absolute difference; subgradient `sign(out - gt) / M`, 0 at ties.
    pub fn l1_loss(&self, out: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            out.shape() == gt.shape(),
            "l1_loss",
            "shape mismatch {:?} vs {:?}",
            out.shape(),
            gt.shape()
        );
        let m = out.numel();
        let mut s = T::ZERO;
        for (&a, &b) in out.data().iter().zip(gt.data()) {
            s += (a - b).abs();
        }
        let inv = T::from_f64(1.0 / m as f64);
        let (od, gd) = (Arc::clone(out.data_arc()), Arc::clone(gt.data_arc()));
        Ok(self.record("l1_loss", vec![1], vec![s * inv], &[out, gt], move |g, needs| {
            let sign: Vec<T> = od
                .iter()
                .zip(gd.iter())
                .map(|(&a, &b)| {
                    if a > b {
                        g[0] * inv
                    } else if a < b {
                        -(g[0] * inv)
                    } else {
                        T::ZERO
                    }
                })
                .collect();
            let gg = needs[1].then(|| sign.iter().map(|&v| -v).collect());
            vec![needs[0].then_some(sign), gg]
        }))
    }
}

/// Source index for every output element of a pixel shuffle.
pub fn pixel_shuffle_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let cr = c * r * r;
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                let (hy, a) = (y / r, y % r);
                for x in 0..ow {
                    let (wx, bb) = (x / r, x % r);
                    let src_c = ch * r * r + a * r + bb;
                    idx.push(((b * cr + src_c) * h + hy) * w + wx);
                }
            }
        }
    }
    idx
}

/// `inv[perm[i]] = i` for a permutation of `0..perm.len()`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Bicubic resize of the trailing two axes to `round(dim * scale)`.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    let r = img.rank();
    ensure!(r >= 2, "bicubic_resize", "need at least 2 dims, got {:?}", img.shape());
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    let (oh, ow) = ((h as f64 * scale).round(), (w as f64 * scale).round());
    ensure!(
        scale > 0.0 && oh >= 1.0 && ow >= 1.0,
        "bicubic_resize",
        "target dims {oh}x{ow} must be positive"
    );
    let (oh, ow) = (oh as usize, ow as usize);
    let planes = img.numel() / (h * w);
    let src = img.to_f64_vec();
    let out = kernels::resize_planes(&src, planes, h, w, oh, ow);
    let mut shape = img.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_f64(&shape, &out)
}
