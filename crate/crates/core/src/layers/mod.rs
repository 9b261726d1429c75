//! Windowed attention layers on NCHW feature maps.
//!
//! Every layer keeps its parameter ids and reads values through a [`Ctx`],
//! so the same structure runs on a recording tape for training and on a
//! no-grad tape for inference.

mod attention;
mod blocks;
mod window;

pub use attention::{wmca, wmsa, RelativePositionBias, WindowAttention};
pub use blocks::{
    omca, GatingLayer, GuidanceLayer, GuidanceRole, OverlapCrossLayer, OverlapLayer, SwinLayer,
    MGL_DOUBLE_RESIDUAL,
};
pub use window::{
    from_tokens, overlap_windows, relative_position_index, shift_mask, shift_softmax_mask,
    to_tokens, window_partition, window_reverse, WindowBatch,
};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numcore::{AutodiffTape, Init, ParamId, ParamStore, Scalar, SeededRng, Tensor, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub overlap_ratio: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            embed_dim: 96,
            heads: 6,
            window: 8,
            overlap_ratio: 0.5,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.window == 0 {
            return Err(Error::Config("attention sizes must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        self.overlap_window().map(|_| ())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Key/value window side `(1 + beta) * M`; must be an integer that
    /// exceeds `M` by an even amount so the padding is symmetric.
    pub fn overlap_window(&self) -> Result<usize> {
        let exact = (1.0 + self.overlap_ratio) * self.window as f64;
        let mo = exact.round();
        ensure!(
            self.overlap_ratio >= 0.0 && (exact - mo).abs() < 1e-9,
            "overlap_window",
            "(1 + {}) * {} is not an integer",
            self.overlap_ratio,
            self.window
        );
        let mo = mo as usize;
        ensure!(
            (mo - self.window).is_multiple_of(2),
            "overlap_window",
            "overlap window {mo} and window {} differ by an odd amount",
            self.window
        );
        Ok(mo)
    }
}

/// Tape plus parameter store for one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a AutodiffTape<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a AutodiffTape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Tensor<T> {
        self.tape.param(self.store, id)
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Linear {
            w: store.register(format!("{prefix}.w"), &[cin, cout], Init::TruncNormal(0.02), rng),
            b: store.register(format!("{prefix}.b"), &[cout], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.tape.linear(x, &ctx.p(self.w), Some(&ctx.p(self.b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, prefix: &str, c: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{prefix}.gamma"), &[c], Init::Constant(1.0), rng),
            beta: store.register(format!("{prefix}.beta"), &[c], Init::Zeros, rng),
        }
    }

    /// Normalize over the last axis.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.tape
            .layer_norm(x, &ctx.p(self.gamma), &ctx.p(self.beta), LN_EPS)
    }

    /// Normalize an NCHW map over its channels.
    pub fn forward_nchw<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4("layer_norm")?;
        let t = self.forward(ctx, &to_tokens(ctx.tape, x)?)?;
        from_tokens(ctx.tape, &t, h, w)
    }
}

/// Token MLP: affine, GELU, affine.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Hidden width multiplier of the token MLP.
pub const MLP_RATIO: usize = 2;

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, prefix: &str, c: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{prefix}.fc1"), c, c * MLP_RATIO),
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), c * MLP_RATIO, c),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = ctx.tape.gelu(&self.fc1.forward(ctx, x)?);
        self.fc2.forward(ctx, &h)
    }

    /// `x + MLP(LN(x))` on an NCHW map.
    pub fn residual<T: Scalar>(&self, ctx: &Ctx<'_, T>, norm: &LayerNorm, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4("mlp")?;
        let t = to_tokens(ctx.tape, x)?;
        let y = self.forward(ctx, &norm.forward(ctx, &t)?)?;
        ctx.tape.add(x, &from_tokens(ctx.tape, &y, h, w)?)
    }
}

/// Square convolution with bias, "same" padding for odd kernels at stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let init = Init::FanIn {
            fan_in: cin * k * k,
            gain: std::f64::consts::FRAC_1_SQRT_2,
        };
        Conv2d {
            w: store.register(format!("{prefix}.w"), &[cout, cin, k, k], init, rng),
            b: store.register(format!("{prefix}.b"), &[cout], Init::Zeros, rng),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.tape
            .conv2d(x, &ctx.p(self.w), Some(&ctx.p(self.b)), self.stride, self.pad)
    }
}

/// Swin convention: no shift when the grid fits in a single window.
pub(crate) fn effective_shift(h: usize, w: usize, window: usize, shift: usize) -> usize {
    if h <= window || w <= window {
        0
    } else {
        shift
    }
}
