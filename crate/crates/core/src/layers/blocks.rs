//! Transformer layers: STL, MGL, GAL, OMCL and OTL.

use super::attention::WindowAttention;
use super::window::{overlap_windows, shift_softmax_mask, window_partition, window_reverse};
use super::{effective_shift, AttentionConfig, Conv2d, Ctx, LayerNorm, Mlp};
use crate::error::{ensure, Result};
use crate::numcore::{ParamStore, PoolKind, Scalar, SeededRng, SoftmaxMask, Tensor};

/// Keep the trailing `+ M_l` of the guidance-layer update.
pub const MGL_DOUBLE_RESIDUAL: bool = true;

fn same_grid<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        op,
        "feature maps {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// Windowed attention on NCHW maps with optional cyclic shift; returns the
/// attention output on the query grid.
fn shifted_attention<T: Scalar>(
    ctx: &Ctx<'_, T>,
    attn: &WindowAttention,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
    shift: usize,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = q.dims4("window_attention")?;
    let shift = effective_shift(h, w, window, shift);
    let mask: Option<SoftmaxMask> = (shift > 0).then(|| shift_softmax_mask(h, w, window, shift, attn.heads));
    let qw = window_partition(ctx.tape, q, window, shift)?;
    let kw = if std::ptr::eq(k, q) {
        qw.windows.clone()
    } else {
        window_partition(ctx.tape, k, window, shift)?.windows
    };
    let vw = if std::ptr::eq(v, k) {
        kw.clone()
    } else {
        window_partition(ctx.tape, v, window, shift)?.windows
    };
    let out = attn.forward(ctx, &qw.windows, &kw, &vw, mask.as_ref())?;
    window_reverse(ctx.tape, &qw.with_windows(out))
}

/// Swin transformer layer: `x + MSA(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct SwinLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shift: usize,
}

impl SwinLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cfg: &AttentionConfig,
        shift: usize,
    ) -> Self {
        let c = cfg.embed_dim;
        SwinLayer {
            norm1: LayerNorm::new(store, rng, &format!("{prefix}.norm1"), c),
            attn: WindowAttention::new(store, rng, &format!("{prefix}.attn"), cfg, cfg.window),
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), c),
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), c),
            window: cfg.window,
            shift,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward_nchw(ctx, x)?;
        let a = shifted_attention(ctx, &self.attn, &h, &h, &h, self.window, self.shift)?;
        let x1 = ctx.tape.add(x, &a)?;
        self.mlp.residual(ctx, &self.norm2, &x1)
    }
}

/// Which stream supplies queries/keys in a guidance layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceRole {
    /// Q, K from thermal `t`; V from the optical stream `m`.
    Agm,
    /// Q, K from the optical stream `m`; V from thermal `t`.
    Mogm,
}

/// Multimodal guidance layer:
/// `M' = MCA(LN(M), T) + M`, `M_next = MLP(LN(M')) + M' + M`.
#[derive(Clone, Debug)]
pub struct GuidanceLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub role: GuidanceRole,
    pub window: usize,
    pub shift: usize,
}

impl GuidanceLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cfg: &AttentionConfig,
        role: GuidanceRole,
        shift: usize,
    ) -> Self {
        let c = cfg.embed_dim;
        GuidanceLayer {
            norm1: LayerNorm::new(store, rng, &format!("{prefix}.norm1"), c),
            attn: WindowAttention::new(store, rng, &format!("{prefix}.attn"), cfg, cfg.window),
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), c),
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), c),
            role,
            window: cfg.window,
            shift,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, m: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
        same_grid("mgl", m, t)?;
        let lm = self.norm1.forward_nchw(ctx, m)?;
        let a = match self.role {
            GuidanceRole::Agm => shifted_attention(ctx, &self.attn, t, t, &lm, self.window, self.shift)?,
            GuidanceRole::Mogm => shifted_attention(ctx, &self.attn, &lm, &lm, t, self.window, self.shift)?,
        };
        let m1 = ctx.tape.add(&a, m)?;
        let out = self.mlp.residual(ctx, &self.norm2, &m1)?;
        if MGL_DOUBLE_RESIDUAL {
            ctx.tape.add(&out, m)
        } else {
            Ok(out)
        }
    }
}

/// Gating attention layer. With `Z_LN = LN(Z)`:
/// `Z' = MCA(LN(Z_LN), T) + sigmoid(Conv(avgpool(Z_LN))) * Z_LN + T`,
/// `Z_next = MLP(LN(Z')) + Z' + Z_LN`.
#[derive(Clone, Debug)]
pub struct GatingLayer {
    pub norm_in: LayerNorm,
    pub gate: Conv2d,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shift: usize,
}

impl GatingLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cfg: &AttentionConfig,
        shift: usize,
    ) -> Self {
        let c = cfg.embed_dim;
        GatingLayer {
            norm_in: LayerNorm::new(store, rng, &format!("{prefix}.norm_in"), c),
            gate: Conv2d::new(store, rng, &format!("{prefix}.gate"), c, c, 1, 1),
            norm1: LayerNorm::new(store, rng, &format!("{prefix}.norm1"), c),
            attn: WindowAttention::new(store, rng, &format!("{prefix}.attn"), cfg, cfg.window),
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), c),
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), c),
            window: cfg.window,
            shift,
        }
    }

    /// Channel gate `N x C x 1 x 1`, each entry in (0, 1).
    pub fn gate_values<T: Scalar>(&self, ctx: &Ctx<'_, T>, z_ln: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = ctx.tape.pool(PoolKind::GlobalAvg, z_ln)?;
        Ok(ctx.tape.sigmoid(&self.gate.forward(ctx, &pooled)?))
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, z: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
        same_grid("gal", z, t)?;
        let tape = ctx.tape;
        let z_ln = self.norm_in.forward_nchw(ctx, z)?;
        let gated = tape.mul(&self.gate_values(ctx, &z_ln)?, &z_ln)?;
        let v = self.norm1.forward_nchw(ctx, &z_ln)?;
        let a = shifted_attention(ctx, &self.attn, t, t, &v, self.window, self.shift)?;
        let z1 = tape.add(&tape.add(&a, &gated)?, t)?;
        let out = self.mlp.residual(ctx, &self.norm2, &z1)?;
        tape.add(&out, &z_ln)
    }
}

/// Overlapping cross-attention on NCHW maps: `M x M` query windows of `q`
/// against zero-padded `Mo x Mo` key/value windows of `kv`.
pub fn omca<T: Scalar>(
    ctx: &Ctx<'_, T>,
    attn: &WindowAttention,
    q: &Tensor<T>,
    kv: &Tensor<T>,
    window: usize,
    overlap_window: usize,
) -> Result<Tensor<T>> {
    same_grid("omca", q, kv)?;
    let qw = window_partition(ctx.tape, q, window, 0)?;
    let kvw = overlap_windows(ctx.tape, kv, window, overlap_window)?;
    let out = attn.forward(ctx, &qw.windows, &kvw, &kvw, None)?;
    window_reverse(ctx.tape, &qw.with_windows(out))
}

/// Overlapping multimodal cross-attention layer: optical queries `s`
/// against thermal keys/values from the stream `x`, residual on `x`.
#[derive(Clone, Debug)]
pub struct OverlapCrossLayer {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub overlap_window: usize,
}

impl OverlapCrossLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        let mo = cfg.overlap_window()?;
        Ok(OverlapCrossLayer {
            norm_q: LayerNorm::new(store, rng, &format!("{prefix}.norm_q"), c),
            norm_kv: LayerNorm::new(store, rng, &format!("{prefix}.norm_kv"), c),
            attn: WindowAttention::new(store, rng, &format!("{prefix}.attn"), cfg, mo),
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), c),
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), c),
            window: cfg.window,
            overlap_window: mo,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        let q = self.norm_q.forward_nchw(ctx, s)?;
        let kv = self.norm_kv.forward_nchw(ctx, x)?;
        let a = omca(ctx, &self.attn, &q, &kv, self.window, self.overlap_window)?;
        let x1 = ctx.tape.add(x, &a)?;
        self.mlp.residual(ctx, &self.norm2, &x1)
    }
}

/// Overlapping transformer layer: single-modality overlapping attention
/// with the Swin residual pattern.
#[derive(Clone, Debug)]
pub struct OverlapLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub overlap_window: usize,
}

impl OverlapLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        let mo = cfg.overlap_window()?;
        Ok(OverlapLayer {
            norm1: LayerNorm::new(store, rng, &format!("{prefix}.norm1"), c),
            attn: WindowAttention::new(store, rng, &format!("{prefix}.attn"), cfg, mo),
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), c),
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), c),
            window: cfg.window,
            overlap_window: mo,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward_nchw(ctx, x)?;
        let a = omca(ctx, &self.attn, &h, &h, self.window, self.overlap_window)?;
        let x1 = ctx.tape.add(x, &a)?;
        self.mlp.residual(ctx, &self.norm2, &x1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::AutodiffTape;

    fn cfg(c: usize, heads: usize, window: usize, beta: f64) -> AttentionConfig {
        AttentionConfig {
            embed_dim: c,
            heads,
            window,
            overlap_ratio: beta,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    fn zero_outputs(store: &mut ParamStore<f64>) {
        store.zero_where(|n| n.contains(".attn.proj.") || n.contains(".mlp.fc2."));
    }

    #[test]
    fn stl_is_identity_with_zeroed_outputs() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        let c = cfg(8, 2, 4, 0.5);
        let layers: Vec<SwinLayer> = (0..2)
            .map(|i| SwinLayer::new(&mut store, &mut rng, &format!("stl.{i}"), &c, [0, 2][i]))
            .collect();
        zero_outputs(&mut store);
        let tape = AutodiffTape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let x = random(&[1, 8, 8, 8], 2);
        for l in &layers {
            let y = l.forward(&ctx, &x).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn stl_changes_input_when_initialized() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        let l = SwinLayer::new(&mut store, &mut rng, "stl", &cfg(8, 2, 4, 0.5), 2);
        let tape = AutodiffTape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let x = random(&[2, 8, 8, 8], 2);
        let y = l.forward(&ctx, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_ne!(y.data(), x.data());
    }

    #[test]
    fn mgl_doubles_input_with_zeroed_outputs() {
        for role in [GuidanceRole::Agm, GuidanceRole::Mogm] {
            let mut store = ParamStore::new();
            let mut rng = SeededRng::new(4);
            let l = GuidanceLayer::new(&mut store, &mut rng, "mgl", &cfg(8, 2, 4, 0.5), role, 2);
            zero_outputs(&mut store);
            let tape = AutodiffTape::no_grad();
            let ctx = Ctx::new(&tape, &store);
            let m = random(&[1, 8, 8, 8], 5);
            let t = random(&[1, 8, 8, 8], 6);
            let y = l.forward(&ctx, &m, &t).unwrap();
            for (a, b) in y.data().iter().zip(m.data()) {
                assert_eq!(*a, 2.0 * b);
            }
            let small = random(&[1, 8, 4, 4], 6);
            assert!(l.forward(&ctx, &m, &small).is_err());
        }
    }

    #[test]
    fn gal_gate_half_with_zero_conv() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(7);
        let l = GatingLayer::new(&mut store, &mut rng, "gal", &cfg(8, 2, 4, 0.5), 0);
        let tape = AutodiffTape::no_grad();
        let z = random(&[1, 8, 8, 8], 8);
        let t = random(&[1, 8, 8, 8], 9);
        {
            let ctx = Ctx::new(&tape, &store);
            let g = l.gate_values(&ctx, &z).unwrap();
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        store.zero_where(|n| n.starts_with("gal.gate."));
        zero_outputs(&mut store);
        let ctx = Ctx::new(&tape, &store);
        let z_ln = l.norm_in.forward_nchw(&ctx, &z).unwrap();
        let g = l.gate_values(&ctx, &z_ln).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
        // with zero attention/MLP outputs: out = 0.5 Z_LN + T + Z_LN
        let y = l.forward(&ctx, &z, &t).unwrap();
        for ((o, zl), tv) in y.data().iter().zip(z_ln.data()).zip(t.data()) {
            assert!((o - (1.5 * zl + tv)).abs() < 1e-12);
        }
    }

    #[test]
    fn omca_without_overlap_matches_aligned_windows() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(11);
        let c = cfg(8, 2, 4, 0.0);
        let attn = WindowAttention::new(&mut store, &mut rng, "a", &c, 4);
        let tape = AutodiffTape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let q = random(&[1, 8, 8, 8], 12);
        let kv = random(&[1, 8, 8, 8], 13);
        let a = omca(&ctx, &attn, &q, &kv, 4, c.overlap_window().unwrap()).unwrap();
        let qw = window_partition(&tape, &q, 4, 0).unwrap();
        let kw = window_partition(&tape, &kv, 4, 0).unwrap();
        let b = super::super::wmca(&ctx, &attn, &qw, &kw, &kw, None).unwrap();
        let b = window_reverse(&tape, &b).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn omca_zero_keys_average_the_value_window() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(14);
        let c = cfg(4, 1, 4, 0.5);
        let mo = c.overlap_window().unwrap();
        assert_eq!(mo, 6);
        let attn = WindowAttention::new(&mut store, &mut rng, "a", &c, mo);
        let eye: Vec<f64> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
        store.set_value(attn.v.w, eye.clone()).unwrap();
        store.set_value(attn.proj.w, eye).unwrap();
        store.zero_where(|n| n.starts_with("a.k.") || n.starts_with("a.rpb"));
        let tape = AutodiffTape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let q = random(&[1, 4, 12, 12], 15);
        let kv = random(&[1, 4, 12, 12], 16);
        let out = omca(&ctx, &attn, &q, &kv, 4, mo).unwrap();
        // centre window (rows/cols 4..8) sees keys 3..9
        for ch in 0..4 {
            let mut sum = 0.0;
            for y in 3..9 {
                for x in 3..9 {
                    sum += kv.data()[(ch * 12 + y) * 12 + x];
                }
            }
            let mean = sum / 36.0;
            for y in 4..8 {
                for x in 4..8 {
                    assert!((out.data()[(ch * 12 + y) * 12 + x] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn overlap_key_window_size() {
        let c = cfg(96, 6, 8, 0.5);
        assert_eq!(c.overlap_window().unwrap(), 12);
        assert_eq!(relative_side(8, 12), 19);
        assert!(cfg(96, 6, 8, 0.3).overlap_window().is_err());
        assert!(cfg(96, 6, 8, 0.125).overlap_window().is_err());
        assert!(cfg(96, 5, 8, 0.5).validate().is_err());
    }

    fn relative_side(m: usize, mo: usize) -> usize {
        let idx = super::super::relative_position_index(m, mo);
        ((*idx.iter().max().unwrap() + 1) as f64).sqrt() as usize
    }

    #[test]
    fn otl_is_identity_with_zeroed_outputs() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(17);
        let c = cfg(8, 2, 4, 0.5);
        let otl = OverlapLayer::new(&mut store, &mut rng, "otl", &c).unwrap();
        let omcl = OverlapCrossLayer::new(&mut store, &mut rng, "omcl", &c).unwrap();
        zero_outputs(&mut store);
        let tape = AutodiffTape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let x = random(&[1, 8, 8, 8], 18);
        let s = random(&[1, 8, 8, 8], 19);
        assert_eq!(otl.forward(&ctx, &x).unwrap().data(), x.data());
        assert_eq!(omcl.forward(&ctx, &x, &s).unwrap().data(), x.data());
    }
}
