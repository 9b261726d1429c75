//! Raw slice kernels behind the taped operations. Everything here is
//! single-threaded with a fixed reduction order.

use super::scalar::Scalar;

/// Row-major `m x k` times `k x n` into `c` (`m x n`).
///
/// `trans_a` means `a` is stored as `k x m`, `trans_b` that `b` is stored as
/// `n x k`. With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::ZERO);
        }
        return;
    }
    // SAFETY: bounds asserted above; strides describe row-major views.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
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

#[derive(Clone, Copy, Debug)]
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
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ck = g.cin * g.k * g.k;
    let mut out = vec![T::ZERO; g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; ck * plane]
    };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let on = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(b) = b {
            for (co, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(g.cout, ck, plane, w, false, cols_ref, false, on, b.is_some());
    }
    out
}

/// Returns `(dx, dw, db)`; `dw`/`db` are summed over the batch in order.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ck = g.cin * g.k * g.k;
    let img = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::ZERO; g.n * img]);
    let mut dw = need_dw.then(|| vec![T::ZERO; g.cout * ck]);
    let mut db = vec![T::ZERO; g.cout];
    let mut cols = vec![T::ZERO; if g.is_pointwise() { 0 } else { ck * plane }];
    let mut dcols = vec![T::ZERO; if need_dx { ck * plane } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * img..(n + 1) * img];
        let dn = &dout[n * g.cout * plane..(n + 1) * g.cout * plane];
        for (co, chunk) in dn.chunks(plane).enumerate() {
            let mut s = T::ZERO;
            for &v in chunk {
                s += v;
            }
            db[co] += s;
        }
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW (cout x ck) += dOut (cout x plane) * cols^T (plane x ck)
            gemm(g.cout, plane, ck, dn, false, cols_ref, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * img..(n + 1) * img];
            if g.is_pointwise() {
                gemm(ck, g.cout, plane, w, true, dn, false, dxn, true);
            } else {
                gemm(ck, g.cout, plane, w, true, dn, false, &mut dcols, false);
                col2im_add(&dcols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed inside `out` (zero on broadcast dims).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output index with the matching offsets into two operands.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < numel {
        let (mut ia, mut ib) = (oa, ob);
        for _ in 0..last {
            f(o, ia, ib);
            ia += la;
            ib += lb;
            o += 1;
        }
        // carry into the leading dims
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Row softmax; `masked(row, col)` entries get zero probability.
pub fn softmax_rows<T: Scalar>(
    x: &[T],
    cols: usize,
    masked: Option<&dyn Fn(usize, usize) -> bool>,
) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (r, (src, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = |j: usize| masked.is_none_or(|m| !m(r, j));
        let mut mx = T::from_f64(f64::NEG_INFINITY);
        for (j, &v) in src.iter().enumerate() {
            if allowed(j) && v > mx {
                mx = v;
            }
        }
        let mut sum = T::ZERO;
        for (j, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
            *d = if allowed(j) { (v - mx).exp() } else { T::ZERO };
            sum += *d;
        }
        let inv = T::ONE / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Backward of row softmax given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let mut dot = T::ZERO;
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for ((d, &a), &b) in dr.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    dx
}

/// Layer norm over rows of width `c`; returns `(y, xhat, inv_std)`.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; rows];
    let cn = T::from_f64(c as f64);
    for r in 0..rows {
        let src = &x[r * c..(r + 1) * c];
        let mut mean = T::ZERO;
        for &v in src {
            mean += v;
        }
        mean /= cn;
        let mut var = T::ZERO;
        for &v in src {
            let d = v - mean;
            var += d * d;
        }
        var /= cn;
        let is = T::ONE / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let h = (src[j] - mean) * is;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, inv_std)
}

pub fn layer_norm_rows_backward<T: Scalar>(
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; xhat.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let cn = T::from_f64(c as f64);
    let mut g = vec![T::ZERO; c];
    for (r, &is) in inv_std.iter().enumerate() {
        let h = &xhat[r * c..(r + 1) * c];
        let d = &dy[r * c..(r + 1) * c];
        let (mut sg, mut sgh) = (T::ZERO, T::ZERO);
        for j in 0..c {
            dgamma[j] += d[j] * h[j];
            dbeta[j] += d[j];
            g[j] = d[j] * gamma[j];
            sg += g[j];
            sgh += g[j] * h[j];
        }
        for j in 0..c {
            dx[r * c + j] = is * (g[j] - sg / cn - h[j] * sgh / cn);
        }
    }
    (dx, dgamma, dbeta)
}

/// Keys cubic convolution kernel.
#[inline]
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection of an index into `0..n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Per-output-sample `(first_input_index_weights)` for a 1-D bicubic resize
/// from `n_in` to `n_out` samples. Downscaling widens the kernel by the scale
/// factor (antialiasing); weights are normalized to sum to one.
pub fn resize_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    const A: f64 = -0.5;
    let scale = n_out as f64 / n_in as f64;
    let (kscale, support) = if scale < 1.0 {
        (scale, 2.0 / scale)
    } else {
        (1.0, 2.0)
    };
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let wgt = cubic_kernel((center - i as f64) * kscale, A);
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                let idx = reflect_index(i, n_in);
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resize of a stack of `planes` images, `h x w` each.
pub fn resize_planes(src: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if oh == h && ow == w {
        return src.to_vec();
    }
    let wy = resize_weights(h, oh);
    let wx = resize_weights(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, taps) in wx.iter().enumerate() {
                tmp[y * ow + ox] = taps.iter().map(|&(i, c)| s[y * w + i] * c).sum();
            }
        }
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, taps) in wy.iter().enumerate() {
            for ox in 0..ow {
                o[oy * ow + ox] = taps.iter().map(|&(i, c)| tmp[i * ow + ox] * c).sum();
            }
        }
    }
    out
}
