//! The guided thermal super-resolution network.
//!
//! Data flow for one forward pass (`x` thermal LR, `y` optical HR):
//! `F_init = shallow(x)`; guidance `S` from the optical branches (or the
//! plain backbone in stage-1 mode); `F_i = RMAG_i(F_{i-1}, S) + W_i F_init`;
//! output `head(F_last)`.

mod decomposer;

pub use decomposer::{
    enhance_batch, retinex_decompose_default, Decomposer, Decomposition, IdentityDecomposer,
    RetinexDecomposer,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::{Attribute, ImagePlane, ImageRGB};
use crate::layers::{
    AttentionConfig, Conv2d, Ctx, GatingLayer, GuidanceLayer, GuidanceRole, OverlapCrossLayer,
    OverlapLayer, SwinLayer, MLP_RATIO,
};
use crate::numcore::{AutodiffTape, Init, ParamId, ParamStore, PoolKind, Scalar, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GDNetConfig {
    pub scale: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub rmag_count: usize,
    pub stl_per_rmag: usize,
    pub nc_mgl: usize,
    pub li_mgl: usize,
    pub fo_gal: usize,
    pub backbone_k: usize,
    pub overlap_ratio: f64,
    pub upsample_mid_channels: usize,
}

impl GDNetConfig {
    pub fn paper(scale: usize) -> Self {
        GDNetConfig {
            scale,
            embed_dim: 96,
            heads: 6,
            window: 8,
            rmag_count: 4,
            stl_per_rmag: 6,
            nc_mgl: 2,
            li_mgl: 6,
            fo_gal: 4,
            backbone_k: if scale == 8 { 6 } else { 4 },
            overlap_ratio: 0.5,
            upsample_mid_channels: 32,
        }
    }

    pub fn tiny(scale: usize) -> Self {
        GDNetConfig {
            embed_dim: 32,
            heads: 4,
            rmag_count: 1,
            stl_per_rmag: 2,
            ..GDNetConfig::paper(scale)
        }
    }

    pub fn preset(preset: Preset, scale: usize) -> Self {
        match preset {
            Preset::Paper => GDNetConfig::paper(scale),
            Preset::Tiny => GDNetConfig::tiny(scale),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
            window: self.window,
            overlap_ratio: self.overlap_ratio,
        }
    }

    /// Strides of the backbone convolutions: 2, 1, 2, 1, ...
    pub fn backbone_strides(&self) -> Vec<usize> {
        (0..self.backbone_k).map(|i| if i % 2 == 0 { 2 } else { 1 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 4 && self.scale != 8 {
            return Err(Error::Config(format!("scale must be 4 or 8, got {}", self.scale)));
        }
        let counts = [
            ("rmag_count", self.rmag_count),
            ("stl_per_rmag", self.stl_per_rmag),
            ("nc_mgl", self.nc_mgl),
            ("li_mgl", self.li_mgl),
            ("fo_gal", self.fo_gal),
            ("backbone_k", self.backbone_k),
            ("upsample_mid_channels", self.upsample_mid_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let product: usize = self.backbone_strides().iter().product();
        if product != self.scale {
            return Err(Error::Config(format!(
                "backbone_k {} gives stride product {product}, expected scale {}",
                self.backbone_k, self.scale
            )));
        }
        self.attention().validate()
    }

    /// Closed-form parameter count; must equal what [`GDNet::new`]
    /// registers.
    pub fn expected_param_count(&self) -> Result<usize> {
        let c = self.embed_dim;
        let m = self.window;
        let mo = self.attention().overlap_window()?;
        let heads = self.heads;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let linear = |cin: usize, cout: usize| cin * cout + cout;
        let ln = 2 * c;
        let mlp = linear(c, MLP_RATIO * c) + linear(MLP_RATIO * c, c);
        let attn = |mk: usize| 4 * linear(c, c) + (m + mk - 1).pow(2) * heads;
        let stl = 2 * ln + attn(m) + mlp;
        let mgl = stl;
        let gal = 3 * ln + conv(c, c, 1) + attn(m) + mlp;
        let omcl = 3 * ln + attn(mo) + mlp;
        let otl = 2 * ln + attn(mo) + mlp;
        let backbone = conv(3, c, 3) + (self.backbone_k - 1) * conv(c, c, 3);
        let rmag = mgl + self.stl_per_rmag * stl + omcl + otl + conv(c, c, 3) + 1;
        let s = self.scale;
        let head = conv(c, self.upsample_mid_channels * s * s, 3) + conv(self.upsample_mid_channels, 1, 3);
        Ok(conv(1, c, 3)
            + backbone
            + self.nc_mgl * mgl
            + self.li_mgl * mgl
            + self.fo_gal * gal
            + conv(2, 3, 3)
            + conv(c, c, 3)
            + self.rmag_count * rmag
            + head)
    }
}

/// Which guidance feeds the reconstruction trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMode {
    /// `S = backbone(y)`; branches and fusion bypassed.
    Stage1,
    /// `S` = output of one attribute branch; fusion bypassed.
    Branch(Attribute),
    /// All three branches fused.
    Full,
}

/// Branch features on the LR grid.
#[derive(Clone, Debug)]
pub struct AgmOutput<T: Scalar> {
    pub f_n: Tensor<T>,
    pub f_l: Tensor<T>,
    pub f_f: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Afm {
    pub attn_conv: Conv2d,
    pub out_conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Rmag {
    pub mgl: GuidanceLayer,
    pub stls: Vec<SwinLayer>,
    pub omcl: OverlapCrossLayer,
    pub otl: OverlapLayer,
    pub conv: Conv2d,
    pub skip_scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct UpsampleHead {
    pub conv_pre: Conv2d,
    pub conv_out: Conv2d,
    pub scale: usize,
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GDNet {
    pub config: GDNetConfig,
    pub shallow: Conv2d,
    pub backbone: Backbone,
    pub nc: Vec<GuidanceLayer>,
    pub li: Vec<GuidanceLayer>,
    pub fo: Vec<GatingLayer>,
    pub afm: Afm,
    pub rmags: Vec<Rmag>,
    pub head: UpsampleHead,
    pub decomposer: Arc<dyn Decomposer>,
}

/// Swin-style alternating shift for the `i`-th layer of a stack.
fn alternating_shift(i: usize, window: usize) -> usize {
    if i % 2 == 1 {
        window / 2
    } else {
        0
    }
}

impl GDNet {
    /// Register every parameter in `store` (which should be empty) using
    /// `rng` for initialization.
    pub fn new<T: Scalar>(config: GDNetConfig, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let m = config.window;
        let acfg = config.attention();
        let shallow = Conv2d::new(store, rng, "shallow.conv", 1, c, 3, 1);
        let backbone = Backbone {
            convs: config
                .backbone_strides()
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let cin = if i == 0 { 3 } else { c };
                    Conv2d::new(store, rng, &format!("agm.backbone.{i}"), cin, c, 3, s)
                })
                .collect(),
        };
        let nc = (0..config.nc_mgl)
            .map(|j| {
                let name = format!("agm.nc.mgl.{j}");
                GuidanceLayer::new(store, rng, &name, &acfg, GuidanceRole::Agm, alternating_shift(j, m))
            })
            .collect();
        let li = (0..config.li_mgl)
            .map(|j| {
                let name = format!("agm.li.mgl.{j}");
                GuidanceLayer::new(store, rng, &name, &acfg, GuidanceRole::Agm, alternating_shift(j, m))
            })
            .collect();
        let fo = (0..config.fo_gal)
            .map(|j| GatingLayer::new(store, rng, &format!("agm.fo.gal.{j}"), &acfg, alternating_shift(j, m)))
            .collect();
        let afm = Afm {
            attn_conv: Conv2d::new(store, rng, "afm.attn_conv", 2, 3, 3, 1),
            out_conv: Conv2d::new(store, rng, "afm.out_conv", c, c, 3, 1),
        };
        let mut rmags = Vec::with_capacity(config.rmag_count);
        for i in 0..config.rmag_count {
            let p = format!("mogm.rmag.{i}");
            rmags.push(Rmag {
                mgl: GuidanceLayer::new(store, rng, &format!("{p}.mgl"), &acfg, GuidanceRole::Mogm, 0),
                stls: (0..config.stl_per_rmag)
                    .map(|k| SwinLayer::new(store, rng, &format!("{p}.stl.{k}"), &acfg, alternating_shift(k, m)))
                    .collect(),
                omcl: OverlapCrossLayer::new(store, rng, &format!("{p}.omcl"), &acfg)?,
                otl: OverlapLayer::new(store, rng, &format!("{p}.otl"), &acfg)?,
                conv: Conv2d::new(store, rng, &format!("{p}.conv"), c, c, 3, 1),
                skip_scale: store.register(format!("{p}.skip_scale"), &[1], Init::Constant(1.0), rng),
            });
        }
        let s = config.scale;
        let mid = config.upsample_mid_channels;
        let head = UpsampleHead {
            conv_pre: Conv2d::new(store, rng, "head.conv_pre", c, mid * s * s, 3, 1),
            conv_out: Conv2d::new(store, rng, "head.conv_out", mid, 1, 3, 1),
            scale: s,
        };
        Ok(GDNet {
            config,
            shallow,
            backbone,
            nc,
            li,
            fo,
            afm,
            rmags,
            head,
            decomposer: Arc::new(RetinexDecomposer::default()),
        })
    }

    pub fn with_decomposer(mut self, decomposer: Arc<dyn Decomposer>) -> Self {
        self.decomposer = decomposer;
        self
    }

    /// `F_init`: one 3x3 conv from the thermal plane to `embed_dim` channels.
    pub fn shallow_extract<T: Scalar>(&self, ctx: &Ctx<'_, T>, x_lr: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, _, _] = x_lr.dims4("shallow_extract")?;
        ensure!(c == 1, "shallow_extract", "thermal input must have 1 channel, got {c}");
        self.shallow.forward(ctx, x_lr)
    }

    /// Optical image to the LR grid: strided conv + LeakyReLU stack.
    pub fn backbone_forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = y.dims4("backbone")?;
        let s = self.config.scale;
        ensure!(c == 3, "backbone", "optical input must have 3 channels, got {c}");
        ensure!(
            h % s == 0 && w % s == 0,
            "backbone",
            "optical dims {h}x{w} not divisible by scale {s}"
        );
        let mut x = y.clone();
        for conv in &self.backbone.convs {
            x = ctx.tape.leaky_relu(&conv.forward(ctx, &x)?);
        }
        Ok(x)
    }

    pub fn nc_forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, y: &Tensor<T>, f_init: &Tensor<T>) -> Result<Tensor<T>> {
        let mut m = self.backbone_forward(ctx, y)?;
        for l in &self.nc {
            m = l.forward(ctx, &m, f_init)?;
        }
        Ok(m)
    }

    pub fn li_forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, y: &Tensor<T>, f_init: &Tensor<T>) -> Result<Tensor<T>> {
        let enhanced = enhance_batch(self.decomposer.as_ref(), y)?;
        let mut m = self.backbone_forward(ctx, &enhanced)?;
        for l in &self.li {
            m = l.forward(ctx, &m, f_init)?;
        }
        Ok(m)
    }

    pub fn fo_forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, y: &Tensor<T>, f_init: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = self.backbone_forward(ctx, y)?;
        for l in &self.fo {
            z = l.forward(ctx, &z, f_init)?;
        }
        Ok(z)
    }

    pub fn agm_forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, y: &Tensor<T>, f_init: &Tensor<T>) -> Result<AgmOutput<T>> {
        Ok(AgmOutput {
            f_n: self.nc_forward(ctx, y, f_init)?,
            f_l: self.li_forward(ctx, y, f_init)?,
            f_f: self.fo_forward(ctx, y, f_init)?,
        })
    }

    /// Spatial weights `N x 3 x h x w` (one map per branch), each in (0, 1).
    pub fn afm_maps<T: Scalar>(&self, ctx: &Ctx<'_, T>, agm: &AgmOutput<T>) -> Result<Tensor<T>> {
        let tape = ctx.tape;
        ensure!(
            agm.f_n.shape() == agm.f_l.shape() && agm.f_n.shape() == agm.f_f.shape(),
            "afm",
            "branch shapes differ: {:?} {:?} {:?}",
            agm.f_n.shape(),
            agm.f_l.shape(),
            agm.f_f.shape()
        );
        let optic = tape.concat_axis1(&[&agm.f_n, &agm.f_l, &agm.f_f])?;
        let avg = tape.pool(PoolKind::ChannelAvg, &optic)?;
        let max = tape.pool(PoolKind::ChannelMax, &optic)?;
        let desc = tape.concat_axis1(&[&avg, &max])?;
        Ok(tape.sigmoid(&self.afm.attn_conv.forward(ctx, &desc)?))
    }

    /// `S = Conv(sum_k map_k * F_k)`.
    pub fn afm_fuse<T: Scalar>(&self, ctx: &Ctx<'_, T>, agm: &AgmOutput<T>) -> Result<Tensor<T>> {
        let tape = ctx.tape;
        let maps = self.afm_maps(ctx, agm)?;
        let [n, _, h, w] = maps.dims4("afm")?;
        let hw = h * w;
        let mut fused: Option<Tensor<T>> = None;
        for (k, f) in [&agm.f_n, &agm.f_l, &agm.f_f].into_iter().enumerate() {
            let idx: Vec<usize> = (0..n)
                .flat_map(|b| ((b * 3 + k) * hw)..((b * 3 + k) * hw + hw))
                .collect();
            let map = tape.gather(&maps, Arc::new(idx), &[n, 1, h, w])?;
            let term = tape.mul(&map, f)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(&acc, &term)?,
            });
        }
        self.afm.out_conv.forward(ctx, &fused.expect("three branches"))
    }

    /// One residual multimodal attention group.
    pub fn rmag_forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        i: usize,
        f_prev: &Tensor<T>,
        s: &Tensor<T>,
        f_init: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = self
            .rmags
            .get(i)
            .ok_or_else(|| Error::contract("rmag_forward", format!("no group {i}")))?;
        let tape = ctx.tape;
        let mut x = g.mgl.forward(ctx, s, f_prev)?;
        for stl in &g.stls {
            x = stl.forward(ctx, &x)?;
        }
        x = g.omcl.forward(ctx, &x, s)?;
        x = g.otl.forward(ctx, &x)?;
        x = g.conv.forward(ctx, &x)?;
        let skip = tape.mul(&ctx.p(g.skip_scale), f_init)?;
        tape.add(&x, &skip)
    }

    /// `Conv(pixel_shuffle(Conv(F)))`.
    pub fn upsample_head<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.head.conv_pre.forward(ctx, f)?;
        let x = ctx.tape.pixel_shuffle(&x, self.head.scale)?;
        self.head.conv_out.forward(ctx, &x)
    }

    /// Guidance features for the requested mode.
    pub fn guidance<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        y: &Tensor<T>,
        f_init: &Tensor<T>,
        mode: StageMode,
    ) -> Result<Tensor<T>> {
        match mode {
            StageMode::Stage1 => self.backbone_forward(ctx, y),
            StageMode::Branch(Attribute::Normal) => self.nc_forward(ctx, y, f_init),
            StageMode::Branch(Attribute::LowLight) => self.li_forward(ctx, y, f_init),
            StageMode::Branch(Attribute::Fog) => self.fo_forward(ctx, y, f_init),
            StageMode::Full => {
                let agm = self.agm_forward(ctx, y, f_init)?;
                self.afm_fuse(ctx, &agm)
            }
        }
    }

    /// SR thermal `N x 1 x (h scale) x (w scale)`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x_lr: &Tensor<T>,
        y: &Tensor<T>,
        mode: StageMode,
    ) -> Result<Tensor<T>> {
        let [n, _, h, w] = x_lr.dims4("gdnet_forward")?;
        let [ny, _, hy, wy] = y.dims4("gdnet_forward")?;
        let s = self.config.scale;
        ensure!(
            n == ny && hy == h * s && wy == w * s,
            "gdnet_forward",
            "optical {:?} does not match thermal {:?} at scale {s}",
            y.shape(),
            x_lr.shape()
        );
        let m = self.config.window;
        ensure!(
            h % m == 0 && w % m == 0,
            "gdnet_forward",
            "LR dims {h}x{w} must be multiples of window {m}"
        );
        let f_init = self.shallow_extract(ctx, x_lr)?;
        let guide = self.guidance(ctx, y, &f_init, mode)?;
        let mut f = f_init.clone();
        for i in 0..self.rmags.len() {
            f = self.rmag_forward(ctx, i, &f, &guide, &f_init)?;
        }
        self.upsample_head(ctx, &f)
    }

    /// Inference on one image pair without recording; output clamped to
    /// [0, 1].
    pub fn super_resolve<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        lr: &ImagePlane,
        optical: &ImageRGB,
        mode: StageMode,
    ) -> Result<ImagePlane> {
        let tape = AutodiffTape::no_grad();
        let ctx = Ctx::new(&tape, store);
        let out = self.forward(&ctx, &lr.to_tensor(), &optical.to_tensor(), mode)?;
        ImagePlane::from_tensor(&out)
    }
}

/// Parameter-name prefixes of each module group.
pub mod groups {
    pub const SHALLOW: &str = "shallow.";
    pub const BACKBONE: &str = "agm.backbone.";
    pub const NC: &str = "agm.nc.";
    pub const LI: &str = "agm.li.";
    pub const FO: &str = "agm.fo.";
    pub const AFM: &str = "afm.";
    pub const MOGM: &str = "mogm.";
    pub const HEAD: &str = "head.";
    pub const ALL: [&str; 8] = [SHALLOW, BACKBONE, NC, LI, FO, AFM, MOGM, HEAD];
}
