//! FGI-Net assembly, parameter/FLOP accounting and ablations.

use std::collections::BTreeSet;
use std::str::FromStr;

use fgi_tensor::nn::{BatchNorm2d, Conv2d, Ctx, Linear};
use fgi_tensor::ops::{Conv2dOptions, PoolKind, PoolWindow};
use fgi_tensor::{Element, Graph, ParamStore, Rng, Tensor, Var};
use rand::SeedableRng;

use crate::attention::{GlobalInteraction, ReduceDownsample, WindowAttnConfig};
use crate::blocks::{MBConv, MBConvSpec, ResCbam};
use crate::config::KvDoc;
use crate::error::{config_err, usage_err, Error, Result};

/// Channels and total downsampling of the last stage before reduction.
pub const STAGE3_CHANNELS: usize = 112;
pub const STAGE3_STRIDE: usize = 16;
/// Channels and total downsampling after reduce-and-downsample.
pub const REDUCED_CHANNELS: usize = 96;
pub const REDUCED_STRIDE: usize = 32;
pub const HEAD_HIDDEN: usize = 32;
pub const OUT_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub blocks: Vec<MBConvSpec>,
    /// Module 4 placed after the blocks.
    pub attention: WindowAttnConfig,
}

impl StageConfig {
    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_ch)
    }

    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Drops the residual branch of Res_CBAM.
    pub residual_off: bool,
    /// Replaces Res_CBAM with the identity.
    pub res_cbam_off: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationTarget {
    Residual,
    ResCbam,
}

impl AblationTarget {
    pub const ALL: [AblationTarget; 2] = [AblationTarget::Residual, AblationTarget::ResCbam];

    pub fn name(self) -> &'static str {
        match self {
            AblationTarget::Residual => "residual",
            AblationTarget::ResCbam => "res_cbam",
        }
    }
}

impl FromStr for AblationTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(AblationTarget::Residual),
            "res_cbam" | "res-cbam" => Ok(AblationTarget::ResCbam),
            other => Err(usage_err(format!("unknown ablation `{other}` (expected residual or res_cbam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// (H, W) the counters and checkpoints refer to.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub reduce_channels: usize,
    pub final_attention: WindowAttnConfig,
    pub head_hidden: usize,
    pub out_dim: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// EfficientNet-B0 truncated after its 112-channel stage, window 7
    /// everywhere.
    pub fn reference() -> Self {
        let b = MBConvSpec::new;
        let attn = |dim, heads| WindowAttnConfig::new(dim, heads, 7);
        Self {
            input_size: (224, 224),
            in_channels: 3,
            stem_channels: 32,
            stem_stride: 2,
            stages: vec![
                StageConfig { blocks: vec![b(32, 16, 1, 3, 1), b(16, 24, 6, 3, 2), b(24, 24, 6, 3, 1)], attention: attn(24, 2) },
                StageConfig { blocks: vec![b(24, 40, 6, 5, 2), b(40, 40, 6, 5, 1)], attention: attn(40, 2) },
                StageConfig {
                    blocks: vec![
                        b(40, 80, 6, 3, 2),
                        b(80, 80, 6, 3, 1),
                        b(80, 80, 6, 3, 1),
                        b(80, 112, 6, 5, 1),
                        b(112, 112, 6, 5, 1),
                        b(112, 112, 6, 5, 1),
                    ],
                    attention: attn(112, 4),
                },
            ],
            reduce_channels: REDUCED_CHANNELS,
            final_attention: attn(REDUCED_CHANNELS, 4),
            head_hidden: HEAD_HIDDEN,
            out_dim: OUT_DIM,
            ablation: Ablation::default(),
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h < REDUCED_STRIDE || w < REDUCED_STRIDE {
            return Err(config_err(format!("input_size {h}x{w} is below the {REDUCED_STRIDE}-pixel minimum")));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stem_stride == 0 {
            return Err(config_err("stem channels and stride must be positive"));
        }
        if self.stages.is_empty() {
            return Err(config_err("at least one stage is required"));
        }
        let mut ch = self.stem_channels;
        let mut stride = self.stem_stride;
        for (i, stage) in self.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            if stage.blocks.is_empty() {
                return Err(config_err(format!("{name} has no blocks")));
            }
            for (j, b) in stage.blocks.iter().enumerate() {
                b.validate()?;
                if b.in_ch != ch {
                    return Err(config_err(format!("{name}.block{j} expects {} input channels but receives {ch}", b.in_ch)));
                }
                ch = b.out_ch;
            }
            stride *= stage.stride();
            stage.attention.validate()?;
            if stage.attention.dim != ch {
                return Err(config_err(format!("{name}.attention.dim = {} but the stage outputs {ch} channels", stage.attention.dim)));
            }
        }
        if ch != STAGE3_CHANNELS || stride != STAGE3_STRIDE {
            return Err(config_err(format!(
                "last stage must output {STAGE3_CHANNELS} channels at {STAGE3_STRIDE}x downsampling, got {ch} at {stride}x"
            )));
        }
        if self.reduce_channels != REDUCED_CHANNELS {
            return Err(config_err(format!("reduce.channels must be {REDUCED_CHANNELS}, got {}", self.reduce_channels)));
        }
        self.final_attention.validate()?;
        if self.final_attention.dim != self.reduce_channels {
            return Err(config_err(format!(
                "global_attn.dim = {} but reduction outputs {} channels",
                self.final_attention.dim, self.reduce_channels
            )));
        }
        if self.head_hidden != HEAD_HIDDEN || self.out_dim != OUT_DIM {
            return Err(config_err(format!(
                "head must be {}→{HEAD_HIDDEN}→{OUT_DIM}, got hidden {} and output {}",
                self.reduce_channels, self.head_hidden, self.out_dim
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("input.height", self.input_size.0);
        d.set("input.width", self.input_size.1);
        d.set("input.channels", self.in_channels);
        d.set("stem.channels", self.stem_channels);
        d.set("stem.stride", self.stem_stride);
        d.set("stages", self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            d.set(&format!("{p}.blocks"), s.blocks.len());
            for (j, b) in s.blocks.iter().enumerate() {
                let q = format!("{p}.block{j}");
                d.set(&format!("{q}.in"), b.in_ch);
                d.set(&format!("{q}.out"), b.out_ch);
                d.set(&format!("{q}.expansion"), b.expansion);
                d.set(&format!("{q}.kernel"), b.kernel);
                d.set(&format!("{q}.stride"), b.stride);
                d.set(&format!("{q}.se_ratio"), b.se_ratio);
            }
            attn_to_kv(&mut d, &format!("{p}.attention"), &s.attention);
        }
        d.set("reduce.channels", self.reduce_channels);
        attn_to_kv(&mut d, "global_attn", &self.final_attention);
        d.set("head.hidden", self.head_hidden);
        d.set("head.out", self.out_dim);
        d.set("ablation.residual_off", self.ablation.residual_off);
        d.set("ablation.res_cbam_off", self.ablation.res_cbam_off);
        d
    }

    /// Parses a complete document as written by [`ModelConfig::to_kv`].
    pub fn from_kv(d: &KvDoc) -> Result<Self> {
        let n_stages: usize = d.req("stages")?;
        let mut stages = Vec::with_capacity(n_stages);
        for i in 1..=n_stages {
            let p = format!("stage{i}");
            let n_blocks: usize = d.req(&format!("{p}.blocks"))?;
            let blocks = (0..n_blocks)
                .map(|j| {
                    let q = format!("{p}.block{j}");
                    Ok(MBConvSpec {
                        in_ch: d.req(&format!("{q}.in"))?,
                        out_ch: d.req(&format!("{q}.out"))?,
                        expansion: d.req(&format!("{q}.expansion"))?,
                        kernel: d.req(&format!("{q}.kernel"))?,
                        stride: d.req(&format!("{q}.stride"))?,
                        se_ratio: d.req(&format!("{q}.se_ratio"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageConfig { blocks, attention: attn_from_kv(d, &format!("{p}.attention"))? });
        }
        let cfg = Self {
            input_size: (d.req("input.height")?, d.req("input.width")?),
            in_channels: d.req("input.channels")?,
            stem_channels: d.req("stem.channels")?,
            stem_stride: d.req("stem.stride")?,
            stages,
            reduce_channels: d.req("reduce.channels")?,
            final_attention: attn_from_kv(d, "global_attn")?,
            head_hidden: d.req("head.hidden")?,
            out_dim: d.req("head.out")?,
            ablation: Ablation {
                residual_off: d.req("ablation.residual_off")?,
                res_cbam_off: d.req("ablation.res_cbam_off")?,
            },
        };
        let known: BTreeSet<String> = cfg.to_kv().keys().map(str::to_string).collect();
        if let Some(k) = d.keys().find(|k| !known.contains(*k)) {
            return Err(config_err(format!("unknown model config key `{k}`")));
        }
        Ok(cfg)
    }

    /// Applies a partial document on top of the reference config. Giving
    /// `stageN.blocks` replaces that stage's whole block list.
    pub fn from_overrides(overrides: &KvDoc) -> Result<Self> {
        let mut d = Self::reference().to_kv();
        for key in overrides.keys() {
            if let Some(stage) = key.strip_suffix(".blocks") {
                d.remove_prefix(&format!("{stage}.block"));
            }
        }
        d.merge(overrides);
        Self::from_kv(&d)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&KvDoc::parse(text)?)
    }
}

fn attn_to_kv(d: &mut KvDoc, p: &str, a: &WindowAttnConfig) {
    d.set(&format!("{p}.dim"), a.dim);
    d.set(&format!("{p}.heads"), a.heads);
    d.set(&format!("{p}.window"), a.window);
    d.set(&format!("{p}.shift"), a.shift);
    d.set(&format!("{p}.mlp_ratio"), a.mlp_ratio);
    d.set(&format!("{p}.relative_bias"), a.use_relative_bias);
}

fn attn_from_kv(d: &KvDoc, p: &str) -> Result<WindowAttnConfig> {
    Ok(WindowAttnConfig {
        dim: d.req(&format!("{p}.dim"))?,
        heads: d.req(&format!("{p}.heads"))?,
        window: d.req(&format!("{p}.window"))?,
        shift: d.req(&format!("{p}.shift"))?,
        mlp_ratio: d.req(&format!("{p}.mlp_ratio"))?,
        use_relative_bias: d.req(&format!("{p}.relative_bias"))?,
    })
}

/// Returns a copy of `config` with one Res_CBAM component removed.
pub fn apply_ablation(config: &ModelConfig, which: AblationTarget) -> ModelConfig {
    let mut c = config.clone();
    match which {
        AblationTarget::Residual => c.ablation.residual_off = true,
        AblationTarget::ResCbam => c.ablation.res_cbam_off = true,
    }
    c
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<MBConv>,
    attention: GlobalInteraction,
}

#[derive(Clone, Debug)]
struct Layers {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Stage>,
    reduce: ReduceDownsample,
    global_attn: GlobalInteraction,
    res_cbam: Option<ResCbam>,
    head_fc1: Linear,
    head_fc2: Linear,
}

/// Intermediate feature maps of one forward pass.
pub struct Taps<'g, T> {
    /// Output of each stage (after its Module 4 and dropout).
    pub stages: Vec<Var<'g, T>>,
    /// Output of reduce-and-downsample.
    pub reduced: Var<'g, T>,
    /// Output of Res_CBAM (or its input when ablated away).
    pub refined: Var<'g, T>,
    pub output: Var<'g, T>,
}

/// A built model: the config, its named parameters and the layer wiring.
#[derive(Clone, Debug)]
pub struct FgiNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layers: Layers,
}

impl<T: Element> FgiNet<T> {
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let stem_opts = Conv2dOptions::default().stride(config.stem_stride).padding(1);
        let stem_conv = Conv2d::new(s, "stem.conv", config.in_channels, config.stem_channels, 3, stem_opts, false, rng)?;
        let stem_bn = BatchNorm2d::new(s, "stem.bn", config.stem_channels)?;
        let mut stages = Vec::new();
        for (i, sc) in config.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            let blocks = sc
                .blocks
                .iter()
                .enumerate()
                .map(|(j, spec)| MBConv::new(s, &format!("{p}.block{j}"), spec, rng))
                .collect::<Result<Vec<_>>>()?;
            let attention = GlobalInteraction::new(s, &format!("{p}.attn"), &sc.attention, rng)?;
            stages.push(Stage { blocks, attention });
        }
        let last = config.stages.last().map_or(0, StageConfig::out_channels);
        let reduce = ReduceDownsample::new(s, "reduce", last, config.reduce_channels, rng)?;
        let global_attn = GlobalInteraction::new(s, "global_attn", &config.final_attention, rng)?;
        let res_cbam = (!config.ablation.res_cbam_off)
            .then(|| ResCbam::new(s, "res_cbam", config.reduce_channels, !config.ablation.residual_off, rng))
            .transpose()?;
        let head_fc1 = Linear::kaiming(s, "head.fc1", config.reduce_channels, config.head_hidden, rng)?;
        let head_fc2 = Linear::kaiming(s, "head.fc2", config.head_hidden, config.out_dim, rng)?;
        let layers = Layers { stem_conv, stem_bn, stages, reduce, global_attn, res_cbam, head_fc1, head_fc2 };
        Ok(Self { config: config.clone(), store, layers })
    }

    pub fn build_seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, &mut Rng::seed_from_u64(seed))
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> FgiNet<U> {
        FgiNet { config: self.config.clone(), store: self.store.cast(), layers: self.layers.clone() }
    }

    /// Full forward pass returning every tap. `dropout` holds one rate per
    /// stage, or is empty for none; rates only act when `ctx.training`.
    pub fn forward_taps<'g>(&self, ctx: &Ctx<'g, '_, T>, images: Var<'g, T>, dropout: &[f64]) -> Result<Taps<'g, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(config_err(format!("FGI-Net expects images [N,{},H,W], got {s:?}", self.config.in_channels)));
        }
        if !dropout.is_empty() && dropout.len() != self.layers.stages.len() {
            return Err(config_err(format!("{} dropout rates for {} stages", dropout.len(), self.layers.stages.len())));
        }
        let g = ctx.graph;
        let l = &self.layers;
        let mut x = {
            let _s = g.scope("stem");
            let y = l.stem_bn.forward(ctx, l.stem_conv.forward(ctx, images)?)?.silu();
            y.ensure_finite("stem")?
        };
        let mut stage_taps = Vec::new();
        for (i, stage) in l.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let _s = g.scope(&name);
            for (j, block) in stage.blocks.iter().enumerate() {
                let _b = g.scope(&format!("block{j}"));
                x = block.forward(ctx, x)?;
            }
            {
                let _a = g.scope("attn");
                x = stage.attention.forward(ctx, x)?;
            }
            if let Some(&p) = dropout.get(i) {
                x = ctx.dropout(x, p)?;
            }
            x = x.ensure_finite(&name)?;
            stage_taps.push(x);
        }
        let reduced = {
            let _s = g.scope("reduce");
            l.reduce.forward(ctx, x)?.ensure_finite("reduce")?
        };
        let x = {
            let _s = g.scope("global_attn");
            l.global_attn.forward(ctx, reduced)?.ensure_finite("global_attn")?
        };
        let refined = match &l.res_cbam {
            Some(m) => {
                let _s = g.scope("res_cbam");
                m.forward(ctx, x)?.ensure_finite("res_cbam")?
            }
            None => x,
        };
        let output = {
            let _s = g.scope("head");
            let n = refined.shape()[0];
            let pooled = refined.pool2d(PoolKind::Avg, PoolWindow::Global)?.reshape(&[n, self.config.reduce_channels])?;
            let hidden = l.head_fc1.forward(ctx, pooled)?.relu();
            l.head_fc2.forward(ctx, hidden)?.ensure_finite("head")?
        };
        Ok(Taps { stages: stage_taps, reduced, refined, output })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_, T>, images: Var<'g, T>, dropout: &[f64]) -> Result<Var<'g, T>> {
        Ok(self.forward_taps(ctx, images, dropout)?.output)
    }

    /// Eval-mode prediction `[N,3]` for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.store);
        let out = self.forward(&ctx, g.constant(images.clone()), &[])?;
        Ok((*out.value()).clone())
    }

    pub fn param_names(&self) -> BTreeSet<String> {
        self.store.params().iter().map(|p| p.name.clone()).collect()
    }

    pub fn count_params(&self) -> ParamReport {
        ParamReport::of(&self.store, 1)
    }

    /// Multiply-accumulates of one eval forward on a single `h×w` image.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<FlopReport> {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.store);
        let x = g.constant(Tensor::zeros(&[1, self.config.in_channels, h, w]));
        self.forward(&ctx, x, &[])?;
        Ok(FlopReport { by_scope: g.macs_by_scope().into_iter().collect() })
    }
}

/// First `depth` dot-separated components of a name.
fn prefix(name: &str, depth: usize) -> String {
    name.split('.').take(depth).collect::<Vec<_>>().join(".")
}

/// Parameter totals grouped by name prefix, in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

impl ParamReport {
    pub fn of<T: Element>(store: &ParamStore<T>, depth: usize) -> Self {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for p in store.params() {
            let key = prefix(&p.name, depth);
            let n = p.value.numel();
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some(slot) => slot.1 += n,
                None => groups.push((key, n)),
            }
        }
        Self { total: store.num_params(), groups }
    }

    pub fn get(&self, group: &str) -> usize {
        self.groups.iter().find(|(k, _)| k == group).map_or(0, |(_, n)| *n)
    }
}

/// Sum of parameter sizes whose name starts with `prefix`.
pub fn param_subtotal<T: Element>(store: &ParamStore<T>, prefix: &str) -> usize {
    store.params().iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    /// MACs keyed by dotted scope path, sorted by path.
    pub by_scope: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.by_scope.iter().map(|(_, m)| m).sum()
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs() as f64 / 1e9
    }

    /// MACs grouped by the first `depth` path components.
    pub fn grouped(&self, depth: usize) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for (k, m) in &self.by_scope {
            let key = prefix(k, depth);
            match out.iter_mut().find(|(g, _)| *g == key) {
                Some(slot) => slot.1 += m,
                None => out.push((key, *m)),
            }
        }
        out
    }
}

/// FLOP report of a freshly built model; the count does not depend on the
/// parameter values.
pub fn count_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    FgiNet::<f32>::build_seeded(config, 0)?.count_flops(h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_validates_and_round_trips() {
        let c = ModelConfig::reference();
        c.validate().unwrap();
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn anchor_violations_name_the_constraint() {
        let mut c = ModelConfig::reference();
        c.stages[2].blocks.pop();
        c.stages[2].blocks.last_mut().unwrap().out_ch = 96;
        c.stages[2].attention.dim = 96;
        assert!(c.validate().unwrap_err().to_string().contains("112"));
        let mut c = ModelConfig::reference();
        c.stages[1].blocks[1].in_ch = 24;
        assert!(c.validate().unwrap_err().to_string().contains("stage2.block1"));
        let mut c = ModelConfig::reference();
        c.head_hidden = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides() {
        let c = ModelConfig::from_overrides(&KvDoc::parse("input.height = 64\ninput.width = 64").unwrap()).unwrap();
        assert_eq!(c.input_size, (64, 64));
        assert!(ModelConfig::from_overrides(&KvDoc::parse("stage9.foo = 1").unwrap()).is_err());
        let two_blocks = "stage2.blocks = 1\nstage2.block0.in = 24\nstage2.block0.out = 40\nstage2.block0.expansion = 6\n\
                          stage2.block0.kernel = 5\nstage2.block0.stride = 2\nstage2.block0.se_ratio = 0.25";
        let c = ModelConfig::from_overrides(&KvDoc::parse(two_blocks).unwrap()).unwrap();
        assert_eq!(c.stages[1].blocks.len(), 1);
    }

    #[test]
    fn ablation_names() {
        assert_eq!("residual".parse::<AblationTarget>().unwrap(), AblationTarget::Residual);
        assert_eq!("res_cbam".parse::<AblationTarget>().unwrap(), AblationTarget::ResCbam);
        assert!("dropout".parse::<AblationTarget>().is_err());
        let base = ModelConfig::reference();
        let a = apply_ablation(&base, AblationTarget::ResCbam);
        assert!(a.ablation.res_cbam_off && !base.ablation.res_cbam_off);
    }
}
