//! Windowed multi-head attention with a learned relative position bias.

use std::sync::Arc;

use super::window::{relative_position_index, WindowBatch};
use super::{AttentionConfig, Ctx, Linear};
use crate::error::{ensure, Result};
use crate::numcore::{AutodiffTape, Init, ParamId, ParamStore, Scalar, SeededRng, SoftmaxMask, Tensor};

/// Learned bias table plus the (query, key) -> row map.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub index: Arc<Vec<usize>>,
    pub heads: usize,
    pub query_window: usize,
    pub key_window: usize,
}

impl RelativePositionBias {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        heads: usize,
        query_window: usize,
        key_window: usize,
    ) -> Self {
        let side = query_window + key_window - 1;
        let table = store.register(name, &[side * side, heads], Init::TruncNormal(0.02), rng);
        let rows = relative_position_index(query_window, key_window);
        // expand to a head-major bias of shape heads x Nq x Nk
        let mut index = Vec::with_capacity(heads * rows.len());
        for h in 0..heads {
            index.extend(rows.iter().map(|&r| r * heads + h));
        }
        RelativePositionBias {
            table,
            index: Arc::new(index),
            heads,
            query_window,
            key_window,
        }
    }

    /// `1 x heads x Nq x Nk`, broadcast over windows.
    pub fn bias<T: Scalar>(&self, ctx: &Ctx<'_, T>) -> Result<Tensor<T>> {
        let table = ctx.p(self.table);
        let nq = self.query_window * self.query_window;
        let nk = self.key_window * self.key_window;
        ctx.tape
            .gather(&table, Arc::clone(&self.index), &[1, self.heads, nq, nk])
    }
}

/// Q/K/V/output projections and the bias of one attention block.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub bias: RelativePositionBias,
    pub heads: usize,
}

fn split_heads_index(b: usize, n: usize, heads: usize, hd: usize) -> Vec<usize> {
    let c = heads * hd;
    let mut idx = Vec::with_capacity(b * n * c);
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..n {
                for d in 0..hd {
                    idx.push((bi * n + t) * c + h * hd + d);
                }
            }
        }
    }
    idx
}

fn merge_heads_index(b: usize, n: usize, heads: usize, hd: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * n * heads * hd);
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                for d in 0..hd {
                    idx.push(((bi * heads + h) * n + t) * hd + d);
                }
            }
        }
    }
    idx
}

fn split_heads<T: Scalar>(tape: &AutodiffTape<T>, x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hd = c / heads;
    tape.gather(x, Arc::new(split_heads_index(b, n, heads, hd)), &[b, heads, n, hd])
}

fn merge_heads<T: Scalar>(tape: &AutodiffTape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, heads, n, hd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    tape.gather(x, Arc::new(merge_heads_index(b, n, heads, hd)), &[b, n, heads * hd])
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        cfg: &AttentionConfig,
        key_window: usize,
    ) -> Self {
        let c = cfg.embed_dim;
        WindowAttention {
            q: Linear::new(store, rng, &format!("{prefix}.q"), c, c),
            k: Linear::new(store, rng, &format!("{prefix}.k"), c, c),
            v: Linear::new(store, rng, &format!("{prefix}.v"), c, c),
            proj: Linear::new(store, rng, &format!("{prefix}.proj"), c, c),
            bias: RelativePositionBias::new(
                store,
                rng,
                &format!("{prefix}.rpb"),
                cfg.heads,
                cfg.window,
                key_window,
            ),
            heads: cfg.heads,
        }
    }

    /// Token windows in, token windows out: `B x Nq x C` queries against
    /// `B x Nk x C` keys and values.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        q_src: &Tensor<T>,
        k_src: &Tensor<T>,
        v_src: &Tensor<T>,
        mask: Option<&SoftmaxMask>,
    ) -> Result<Tensor<T>> {
        let tape = ctx.tape;
        for (what, t) in [("query", q_src), ("key", k_src), ("value", v_src)] {
            ensure!(t.rank() == 3, "attention", "{what} windows must be B x N x C, got {:?}", t.shape());
        }
        let (b, nq, c) = (q_src.shape()[0], q_src.shape()[1], q_src.shape()[2]);
        let nk = k_src.shape()[1];
        ensure!(
            c % self.heads == 0,
            "attention",
            "embed dim {c} not divisible by {} heads",
            self.heads
        );
        ensure!(
            k_src.shape() == v_src.shape() && k_src.shape()[0] == b && k_src.shape()[2] == c,
            "attention",
            "key {:?} / value {:?} incompatible with query {:?}",
            k_src.shape(),
            v_src.shape(),
            q_src.shape()
        );
        let nqb = self.bias.query_window * self.bias.query_window;
        let nkb = self.bias.key_window * self.bias.key_window;
        ensure!(
            nq == nqb && nk == nkb,
            "attention",
            "token counts {nq}/{nk} do not match bias windows {nqb}/{nkb}"
        );
        let hd = c / self.heads;
        let q = self.q.forward(ctx, q_src)?;
        let k = self.k.forward(ctx, k_src)?;
        let v = self.v.forward(ctx, v_src)?;
        let q = tape.scale(&split_heads(tape, &q, self.heads)?, 1.0 / (hd as f64).sqrt());
        let k = split_heads(tape, &k, self.heads)?;
        let v = split_heads(tape, &v, self.heads)?;
        let logits = tape.matmul_nt(&q, &k)?;
        let logits = tape.add(&logits, &self.bias.bias(ctx)?)?;
        let attn = tape.softmax_masked(&logits, mask)?;
        let out = merge_heads(tape, &tape.matmul(&attn, &v)?)?;
        self.proj.forward(ctx, &out)
    }
}

/// Windowed multi-head cross-attention; output is on the query windows.
pub fn wmca<T: Scalar>(
    ctx: &Ctx<'_, T>,
    attn: &WindowAttention,
    q_src: &WindowBatch<T>,
    k_src: &WindowBatch<T>,
    v_src: &WindowBatch<T>,
    mask: Option<&SoftmaxMask>,
) -> Result<WindowBatch<T>> {
    ensure!(
        q_src.windows.shape()[0] == k_src.windows.shape()[0],
        "wmca",
        "query and key window counts differ: {:?} vs {:?}",
        q_src.windows.shape(),
        k_src.windows.shape()
    );
    let out = attn.forward(ctx, &q_src.windows, &k_src.windows, &v_src.windows, mask)?;
    Ok(q_src.with_windows(out))
}

/// Windowed multi-head self-attention.
pub fn wmsa<T: Scalar>(
    ctx: &Ctx<'_, T>,
    attn: &WindowAttention,
    x: &WindowBatch<T>,
    mask: Option<&SoftmaxMask>,
) -> Result<WindowBatch<T>> {
    wmca(ctx, attn, x, x, x, mask)
}
