//! Convolutional building blocks: EfficientNet MBConv with squeeze-excite
//! (Modules 1-3) and the Res_CBAM refinement block (Module 5).

use fgi_tensor::nn::{BatchNorm2d, Conv2d, Ctx, Linear};
use fgi_tensor::ops::{Conv2dOptions, PoolKind, PoolWindow};
use fgi_tensor::{Element, ParamStore, Rng, Var};

use crate::error::{config_err, Result};

/// SE bottleneck width as a fraction of the block's input channels.
pub const SE_RATIO: f64 = 0.25;
/// Channel-attention MLP reduction ratio and minimum hidden width.
pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_MIN_HIDDEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct MBConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    pub se_ratio: f64,
}

impl MBConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        Self { in_ch, out_ch, expansion, kernel, stride, se_ratio: SE_RATIO }
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }

    pub fn expanded(&self) -> usize {
        self.in_ch * self.expansion
    }

    pub fn se_channels(&self) -> usize {
        ((self.in_ch as f64 * self.se_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(config_err(format!("mbconv channels must be positive: {self:?}")));
        }
        if self.expansion == 0 {
            return Err(config_err(format!("mbconv expansion must be ≥ 1: {self:?}")));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(config_err(format!("mbconv kernel must be odd: {self:?}")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(config_err(format!("mbconv stride must be 1 or 2: {self:?}")));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return Err(config_err(format!("mbconv se_ratio must lie in (0, 1]: {self:?}")));
        }
        Ok(())
    }
}

fn expect_channels<T: Element>(x: &Var<'_, T>, c: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != c {
        return Err(config_err(format!("{what} expects [N,{c},H,W], got {s:?}")));
    }
    Ok(())
}

fn global<T: Element>(x: Var<'_, T>, kind: PoolKind) -> Result<Var<'_, T>> {
    Ok(x.pool2d(kind, PoolWindow::Global)?)
}

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub channels: usize,
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, reduced: usize, rng: &mut Rng) -> Result<Self> {
        if reduced == 0 {
            return Err(config_err(format!("{name}: squeeze-excite needs ≥ 1 reduced channel")));
        }
        Ok(Self {
            channels,
            reduce: Linear::kaiming(store, &format!("{name}.reduce"), channels, reduced, rng)?,
            expand: Linear::kaiming(store, &format!("{name}.expand"), reduced, channels, rng)?,
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels(&x, self.channels, "squeeze_excite")?;
        let n = x.shape()[0];
        let p = global(x, PoolKind::Avg)?.reshape(&[n, self.channels])?;
        let gate = self.expand.forward(ctx, self.reduce.forward(ctx, p)?.silu())?.sigmoid();
        Ok(x.mul(gate.reshape(&[n, self.channels, 1, 1])?)?)
    }
}

/// Conv + batch norm, optionally followed by SiLU.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOptions,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, conv_name, cin, cout, kernel, opts, false, rng)?,
            bn: BatchNorm2d::new(store, bn_name, cout)?,
        })
    }

    fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>, act: bool) -> Result<Var<'g, T>> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x)?)?;
        Ok(if act { y.silu() } else { y })
    }
}

/// Mobile inverted bottleneck: expand, depthwise, squeeze-excite, project.
#[derive(Clone, Debug)]
pub struct MBConv {
    pub spec: MBConvSpec,
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    pub se: SqueezeExcite,
    project: ConvBn,
}

impl MBConv {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, spec: &MBConvSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mid = spec.expanded();
        let pointwise = Conv2dOptions::default();
        let expand = (spec.expansion != 1)
            .then(|| ConvBn::new(store, &format!("{name}.expand_conv"), &format!("{name}.bn0"), spec.in_ch, mid, 1, pointwise, rng))
            .transpose()?;
        let dw_opts = Conv2dOptions::default().stride(spec.stride).padding(spec.kernel / 2).groups(mid);
        let depthwise = ConvBn::new(store, &format!("{name}.depthwise_conv"), &format!("{name}.bn1"), mid, mid, spec.kernel, dw_opts, rng)?;
        let se = SqueezeExcite::new(store, &format!("{name}.se"), mid, spec.se_channels(), rng)?;
        let project = ConvBn::new(store, &format!("{name}.project_conv"), &format!("{name}.bn2"), mid, spec.out_ch, 1, pointwise, rng)?;
        Ok(Self { spec: spec.clone(), expand, depthwise, se, project })
    }

    pub fn project_weight(&self) -> fgi_tensor::ParamId {
        self.project.conv.weight
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels(&x, self.spec.in_ch, "mbconv")?;
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(ctx, y, true)?;
        }
        y = self.depthwise.forward(ctx, y, true)?;
        y = self.se.forward(ctx, y)?;
        y = self.project.forward(ctx, y, false)?;
        if self.spec.has_skip() {
            y = y.add(x)?;
        }
        Ok(y)
    }
}

/// `M_s = σ(conv7×7([mean_c(F); max_c(F)]))`, shape `[N,1,H,W]`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, rng: &mut Rng) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), 2, 1, 7, Conv2dOptions::default().padding(3), true, rng)?;
        Ok(Self { conv })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let pooled = f.channel_pool()?;
        Ok(self.conv.forward(ctx, pooled)?.sigmoid())
    }
}

/// `M_c = σ(MLP(avg(F)) + MLP(max(F)))` with one shared MLP, shape `[N,C,1,1]`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn hidden(channels: usize) -> usize {
        (channels / CBAM_REDUCTION).max(CBAM_MIN_HIDDEN)
    }

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = Self::hidden(channels);
        Ok(Self {
            channels,
            fc1: Linear::kaiming(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Linear::kaiming(store, &format!("{name}.fc2"), hidden, channels, rng)?,
        })
    }

    fn mlp<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, p: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.fc2.forward(ctx, self.fc1.forward(ctx, p)?.relu())?)
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels(&f, self.channels, "channel_attention")?;
        let (n, c) = (f.shape()[0], self.channels);
        let avg = self.mlp(ctx, global(f, PoolKind::Avg)?.reshape(&[n, c])?)?;
        let max = self.mlp(ctx, global(f, PoolKind::Max)?.reshape(&[n, c])?)?;
        Ok(avg.add(max)?.sigmoid().reshape(&[n, c, 1, 1])?)
    }
}

/// Depthwise 3×3 followed by pointwise 1×1, both with bias and no norm.
#[derive(Clone, Debug)]
pub struct DwSeparable {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DwSeparable {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        let dw = Conv2dOptions::default().padding(1).groups(channels);
        Ok(Self {
            depthwise: Conv2d::new(store, &format!("{name}.depthwise"), channels, channels, 3, dw, true, rng)?,
            pointwise: Conv2d::new(store, &format!("{name}.pointwise"), channels, channels, 1, Conv2dOptions::default(), true, rng)?,
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.depthwise.forward(ctx, x)?;
        Ok(self.pointwise.forward(ctx, y)?)
    }
}

/// Module 5: `F_out = dwsep_a(F_in) + M_s(F'')⊗F''` where
/// `F'' = M_c(F')⊗F'` and `F' = dwsep_b(F_in)`.
#[derive(Clone, Debug)]
pub struct ResCbam {
    pub channels: usize,
    /// `None` for the "- Residual" ablation.
    pub residual: Option<DwSeparable>,
    pub transform: DwSeparable,
    pub channel_attention: ChannelAttention,
    pub spatial_attention: SpatialAttention,
}

impl ResCbam {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, residual: bool, rng: &mut Rng) -> Result<Self> {
        let residual = residual.then(|| DwSeparable::new(store, &format!("{name}.res"), channels, rng)).transpose()?;
        Ok(Self {
            channels,
            residual,
            transform: DwSeparable::new(store, &format!("{name}.dwsep"), channels, rng)?,
            channel_attention: ChannelAttention::new(store, &format!("{name}.channel_attn"), channels, rng)?,
            spatial_attention: SpatialAttention::new(store, &format!("{name}.spatial_attn"), rng)?,
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, f_in: Var<'g, T>) -> Result<Var<'g, T>> {
        expect_channels(&f_in, self.channels, "res_cbam")?;
        let f1 = self.transform.forward(ctx, f_in)?;
        let f2 = f1.mul(self.channel_attention.forward(ctx, f1)?)?;
        let f3 = f2.mul(self.spatial_attention.forward(ctx, f2)?)?;
        match &self.residual {
            Some(res) => Ok(res.forward(ctx, f_in)?.add(f3)?),
            None => Ok(f3),
        }
    }
}
