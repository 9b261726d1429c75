//! Window bookkeeping: partition/reverse with cyclic shift, overlapping
//! key/value windows, shift masks and relative-position index maps.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::numcore::{AutodiffTape, Scalar, SoftmaxMask, Tensor, GATHER_ZERO};

/// Token windows `(N * numWindows) x M^2 x C` plus what is needed to undo
/// the partition.
#[derive(Clone, Debug)]
pub struct WindowBatch<T: Scalar> {
    pub windows: Tensor<T>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl<T: Scalar> WindowBatch<T> {
    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Same metadata, different payload (e.g. attention output).
    pub fn with_windows(&self, windows: Tensor<T>) -> Self {
        WindowBatch {
            windows,
            ..self.clone()
        }
    }
}

fn partition_index(n: usize, c: usize, h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let (nwy, nwx) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..m {
                    let y = (wy * m + iy + shift) % h;
                    for ix in 0..m {
                        let x = (wx * m + ix + shift) % w;
                        for ch in 0..c {
                            idx.push(((b * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn reverse_index(n: usize, c: usize, h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let nwx = w / m;
    let per_window = m * m * c;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let ys = (y + h - shift % h) % h;
                let (wy, iy) = (ys / m, ys % m);
                for x in 0..w {
                    let xs = (x + w - shift % w) % w;
                    let (wx, ix) = (xs / m, xs % m);
                    let win = (b * (h / m) + wy) * nwx + wx;
                    idx.push(win * per_window + (iy * m + ix) * c + ch);
                }
            }
        }
    }
    idx
}

/// Cyclic shift by `(-shift, -shift)`, then tile into `M x M` token windows.
pub fn window_partition<T: Scalar>(
    tape: &AutodiffTape<T>,
    x: &Tensor<T>,
    window: usize,
    shift: usize,
) -> Result<WindowBatch<T>> {
    let [n, c, h, w] = x.dims4("window_partition")?;
    ensure!(
        window > 0 && h % window == 0 && w % window == 0,
        "window_partition",
        "feature dims {h}x{w} not divisible by window {window}"
    );
    ensure!(
        shift < window,
        "window_partition",
        "shift {shift} must be smaller than window {window}"
    );
    let nw = (h / window) * (w / window);
    let idx = partition_index(n, c, h, w, window, shift);
    let windows = tape.gather(x, Arc::new(idx), &[n * nw, window * window, c])?;
    Ok(WindowBatch {
        windows,
        batch: n,
        height: h,
        width: w,
        window,
        shift,
    })
}

/// Exact inverse of [`window_partition`], including the un-shift.
pub fn window_reverse<T: Scalar>(tape: &AutodiffTape<T>, wb: &WindowBatch<T>) -> Result<Tensor<T>> {
    let (n, h, w, m) = (wb.batch, wb.height, wb.width, wb.window);
    ensure!(
        m > 0 && h % m == 0 && w % m == 0,
        "window_reverse",
        "metadata {h}x{w} / window {m} inconsistent"
    );
    let shape = wb.windows.shape();
    ensure!(
        shape.len() == 3 && shape[0] == n * wb.num_windows() && shape[1] == m * m,
        "window_reverse",
        "windows {shape:?} do not match {n} images of {h}x{w} with window {m}"
    );
    let c = shape[2];
    let idx = reverse_index(n, c, h, w, m, wb.shift);
    tape.gather(&wb.windows, Arc::new(idx), &[n, c, h, w])
}

/// Overlapping `Mo x Mo` windows centered on each `M x M` tile, zero padded
/// at the borders: `(N * numWindows) x Mo^2 x C`.
pub fn overlap_windows<T: Scalar>(
    tape: &AutodiffTape<T>,
    x: &Tensor<T>,
    window: usize,
    overlap_window: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("overlap_windows")?;
    ensure!(
        h % window == 0 && w % window == 0,
        "overlap_windows",
        "feature dims {h}x{w} not divisible by window {window}"
    );
    ensure!(
        overlap_window >= window && (overlap_window - window).is_multiple_of(2),
        "overlap_windows",
        "overlap window {overlap_window} must exceed window {window} by an even amount"
    );
    let pad = (overlap_window - window) / 2;
    let mo = overlap_window;
    let (nwy, nwx) = (h / window, w / window);
    let mut idx = Vec::with_capacity(n * nwy * nwx * mo * mo * c);
    for b in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ky in 0..mo {
                    let y = (wy * window + ky) as isize - pad as isize;
                    for kx in 0..mo {
                        let xx = (wx * window + kx) as isize - pad as isize;
                        let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((b * c + ch) * h + y as usize) * w + xx as usize
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    tape.gather(x, Arc::new(idx), &[n * nwy * nwx, mo * mo, c])
}

/// `N x C x H x W -> N x (H W) x C`.
pub fn to_tokens<T: Scalar>(tape: &AutodiffTape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("to_tokens")?;
    let hw = h * w;
    let mut idx = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                idx.push((b * c + ch) * hw + p);
            }
        }
    }
    tape.gather(x, Arc::new(idx), &[n, hw, c])
}

/// `N x (H W) x C -> N x C x H x W`.
pub fn from_tokens<T: Scalar>(
    tape: &AutodiffTape<T>,
    t: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    ensure!(
        t.rank() == 3 && t.shape()[1] == h * w,
        "from_tokens",
        "tokens {:?} do not cover a {h}x{w} grid",
        t.shape()
    );
    let (n, c) = (t.shape()[0], t.shape()[2]);
    let hw = h * w;
    let mut idx = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                idx.push((b * hw + p) * c + ch);
            }
        }
    }
    tape.gather(t, Arc::new(idx), &[n, c, h, w])
}

/// Mask for shifted windows: token pairs that came from different regions
/// of the un-shifted image never attend to each other.
///
/// Returned as `numWindows x M^2 x M^2` (true = masked).
pub fn shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<bool> {
    let region = |coord: usize, size: usize| -> u8 {
        if coord < size - window {
            0
        } else if coord < size - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / window, w / window);
    let t = window * window;
    let mut mask = Vec::with_capacity(nwy * nwx * t * t);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<(u8, u8)> = (0..t)
                .map(|i| {
                    let (iy, ix) = (i / window, i % window);
                    (region(wy * window + iy, h), region(wx * window + ix, w))
                })
                .collect();
            for a in &labels {
                for b in &labels {
                    mask.push(a != b);
                }
            }
        }
    }
    mask
}

pub fn shift_softmax_mask(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    heads: usize,
) -> SoftmaxMask {
    let t = window * window;
    SoftmaxMask {
        mask: Arc::new(shift_mask(h, w, window, shift)),
        groups: (h / window) * (w / window),
        rows: t,
        cols: t,
        repeat: heads,
    }
}

/// Table rows for every (query, key) pair of an `Mq` query window against
/// an `Mk` key window sharing a center; the table has `(Mq + Mk - 1)^2`
/// rows.
pub fn relative_position_index(mq: usize, mk: usize) -> Vec<usize> {
    let side = mq + mk - 1;
    let mut idx = Vec::with_capacity(mq * mq * mk * mk);
    for qy in 0..mq {
        for qx in 0..mq {
            for ky in 0..mk {
                for kx in 0..mk {
                    let dy = ky + mq - 1 - qy;
                    let dx = kx + mq - 1 - qx;
                    idx.push(dy * side + dx);
                }
            }
        }
    }
    idx
}
