//! Finite-difference gradient checks of every layer and block, plus the
//! whole model through the L1 loss. Run in 64-bit precision.

use fgi_tensor::gradcheck::{GradCheck, GradCheckReport};
use fgi_tensor::nn::{BatchNorm2d, Conv2d, Ctx, LayerNorm, Linear};
use fgi_tensor::ops::{Conv2dOptions, PoolKind, PoolWindow};
use fgi_tensor::{ParamStore, Rng, Tensor, Var};
use rand::SeedableRng;

use crate::attention::{ReduceDownsample, SwinBlock, WindowAttnConfig};
use crate::blocks::{ChannelAttention, MBConv, MBConvSpec, ResCbam, SpatialAttention, SqueezeExcite};
use crate::error::{usage_err, Result};
use crate::model::{FgiNet, ModelConfig};
use crate::training::l1_loss;

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

/// Carries block errors through the tensor-level gradient checker.
fn lift<V>(r: Result<V>) -> fgi_tensor::Result<V> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        crate::Error::Numeric(d) => fgi_tensor::Error::Numeric { location: "block".into(), detail: d },
        other => fgi_tensor::Error::Usage(other.to_string()),
    })
}

type Case = fn(u64) -> Result<GradCheckReport>;

/// `Σ y ⊙ r` with a fixed random `r`, so no output direction cancels.
fn project<'g>(ctx: &Ctx<'g, '_, f64>, y: Var<'g, f64>, seed: u64) -> fgi_tensor::Result<Var<'g, f64>> {
    let mut rng = Rng::seed_from_u64(seed ^ 0xa5a5);
    let r = Tensor::rand_uniform(&y.shape(), -1.0, 1.0, &mut rng);
    Ok(y.mul(ctx.graph.constant(r))?.sum_all())
}

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.5, 1.5, &mut Rng::seed_from_u64(seed))
}

fn check(seed: u64, training: bool) -> GradCheck {
    GradCheck { seed, training, ..GradCheck::default() }
}

/// Re-draws every parameter uniformly so zero-initialized biases and unit
/// norm scales are exercised away from their special values.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    for id in store.param_ids().collect::<Vec<_>>() {
        let shape = store.param(id).value.shape().to_vec();
        *store.value_mut(id) = Tensor::rand_uniform(&shape, -0.8, 0.8, &mut rng);
    }
}

fn conv_case(seed: u64, cin: usize, cout: usize, k: usize, opts: Conv2dOptions, hw: usize) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", cin, cout, k, opts, true, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, false).run(&store, &[input(&[2, cin, hw, hw], seed)], |ctx, v| {
        let y = conv.forward(ctx, v[0])?;
        project(ctx, y, seed)
    })?)
}

fn conv_standard(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 3, 4, 3, Conv2dOptions::default().stride(2).padding(1), 7)
}

fn conv_pointwise(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 5, 3, 1, Conv2dOptions::default(), 4)
}

fn conv_depthwise_k3(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 4, 4, 3, Conv2dOptions::default().padding(1).groups(4), 5)
}

fn conv_depthwise_k5_s2(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 3, 3, 5, Conv2dOptions::default().stride(2).padding(2).groups(3), 7)
}

fn conv_grouped(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 4, 6, 3, Conv2dOptions::default().padding(1).groups(2), 4)
}

fn conv_7x7(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 2, 1, 7, Conv2dOptions::default().padding(3), 5)
}

fn pooling(seed: u64) -> Result<GradCheckReport> {
    let store = ParamStore::new();
    Ok(check(seed, false).run(&store, &[input(&[2, 3, 4, 6], seed)], |ctx, v| {
        let x = v[0];
        let a = x.pool2d(PoolKind::Avg, PoolWindow::Global)?;
        let m = x.pool2d(PoolKind::Max, PoolWindow::Global)?;
        let w = x.pool2d(PoolKind::Max, PoolWindow::Size(2, 3))?;
        let c = x.channel_pool()?;
        let s = project(ctx, a, seed)?.add(project(ctx, m, seed + 1)?)?;
        Ok(s.add(project(ctx, w, seed + 2)?)?.add(project(ctx, c, seed + 3)?)?)
    })?)
}

fn linear_and_activations(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fc = Linear::kaiming(&mut store, "fc", 6, 5, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, false).run(&store, &[input(&[3, 6], seed)], |ctx, v| {
        let y = fc.forward(ctx, v[0])?;
        let parts = [y.sigmoid(), y.silu(), y.relu(), y.gelu_tanh(), y.softmax_last()];
        let mut loss = project(ctx, parts[0], seed)?;
        for (i, p) in parts.into_iter().enumerate().skip(1) {
            loss = loss.add(project(ctx, p, seed + i as u64)?)?;
        }
        Ok(loss)
    })?)
}

fn norms(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3)?;
    let ln = LayerNorm::new(&mut store, "ln", 5)?;
    randomize(&mut store, seed);
    let inputs = [input(&[2, 3, 3, 3], seed), input(&[4, 5], seed + 1)];
    let train = check(seed, true).run(&store, &inputs, |ctx, v| {
        let a = project(ctx, bn.forward(ctx, v[0])?, seed)?;
        Ok(a.add(project(ctx, ln.forward(ctx, v[1])?, seed + 1)?)?)
    })?;
    let eval = check(seed, false).run(&store, &inputs, |ctx, v| {
        let a = project(ctx, bn.forward(ctx, v[0])?, seed)?;
        Ok(a.add(project(ctx, ln.forward(ctx, v[1])?, seed + 1)?)?)
    })?;
    Ok(if train.max_rel_error >= eval.max_rel_error { train } else { eval })
}

fn squeeze_excite(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let se = SqueezeExcite::new(&mut store, "se", 6, 2, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, false).run(&store, &[input(&[2, 6, 3, 3], seed)], |ctx, v| {
        let y = lift(se.forward(ctx, v[0]))?;
        project(ctx, y, seed)
    })?)
}

fn mbconv_case(seed: u64, spec: MBConvSpec) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = MBConv::new(&mut store, "mb", &spec, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, true).run(&store, &[input(&[2, spec.in_ch, 5, 5], seed)], |ctx, v| {
        let y = lift(block.forward(ctx, v[0]))?;
        project(ctx, y, seed)
    })?)
}

fn mbconv_e1(seed: u64) -> Result<GradCheckReport> {
    mbconv_case(seed, MBConvSpec::new(4, 3, 1, 3, 1))
}

fn mbconv_e6_s2(seed: u64) -> Result<GradCheckReport> {
    mbconv_case(seed, MBConvSpec::new(2, 3, 6, 5, 2))
}

fn mbconv_skip(seed: u64) -> Result<GradCheckReport> {
    mbconv_case(seed, MBConvSpec::new(3, 3, 6, 3, 1))
}

fn swin_case(seed: u64, shift: usize, hw: usize) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = WindowAttnConfig::new(4, 2, 3);
    let block = SwinBlock::new(&mut store, "swin", &cfg, shift, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, false).run(&store, &[input(&[2, 4, hw, hw], seed)], |ctx, v| {
        let y = lift(block.forward(ctx, v[0]))?;
        project(ctx, y, seed)
    })?)
}

fn w_msa(seed: u64) -> Result<GradCheckReport> {
    swin_case(seed, 0, 6)
}

/// Shifted windows on a map that needs padding (5 → 6).
fn sw_msa(seed: u64) -> Result<GradCheckReport> {
    swin_case(seed, 1, 5)
}

fn reduce_downsample(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let r = ReduceDownsample::new(&mut store, "reduce", 5, 4, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, true).run(&store, &[input(&[2, 5, 4, 4], seed)], |ctx, v| {
        let y = lift(r.forward(ctx, v[0]))?;
        project(ctx, y, seed)
    })?)
}

fn cbam_maps(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut store, "ca", 6, &mut rng)?;
    let sa = SpatialAttention::new(&mut store, "sa", &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, false).run(&store, &[input(&[2, 6, 4, 4], seed)], |ctx, v| {
        let a = project(ctx, lift(ca.forward(ctx, v[0]))?, seed)?;
        Ok(a.add(project(ctx, lift(sa.forward(ctx, v[0]))?, seed + 1)?)?)
    })?)
}

fn res_cbam_case(seed: u64, residual: bool) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = ResCbam::new(&mut store, "m5", 6, residual, &mut rng)?;
    randomize(&mut store, seed);
    Ok(check(seed, false).run(&store, &[input(&[2, 6, 4, 4], seed)], |ctx, v| {
        let y = lift(m.forward(ctx, v[0]))?;
        project(ctx, y, seed)
    })?)
}

fn res_cbam(seed: u64) -> Result<GradCheckReport> {
    res_cbam_case(seed, true)
}

fn res_cbam_no_residual(seed: u64) -> Result<GradCheckReport> {
    res_cbam_case(seed, false)
}

/// Reference architecture at 32×32 through the L1 loss, probing one
/// parameter tensor from every top-level module plus the images.
fn full_model(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig::reference().with_input_size(32, 32);
    let net = FgiNet::<f64>::build_seeded(&config, seed)?;
    let probe = [
        "stem.conv.weight",
        "stage1.block0.depthwise_conv.weight",
        "stage1.attn.block1.attn.relative_bias",
        "stage2.block1.se.reduce.weight",
        "stage3.block5.project_conv.weight",
        "stage3.attn.block0.attn.qkv.weight",
        "reduce.conv.weight",
        "global_attn.block1.mlp.fc1.weight",
        "res_cbam.res.pointwise.weight",
        "res_cbam.spatial_attn.conv.weight",
        "head.fc2.weight",
    ];
    let only = probe
        .iter()
        .map(|n| net.store.find_param(n).ok_or_else(|| usage_err(format!("missing probe parameter {n}"))))
        .collect::<Result<Vec<_>>>()?;
    let target = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut Rng::seed_from_u64(seed + 1));
    let gc = GradCheck { seed, training: true, probes_per_tensor: 3, only: Some(only), ..GradCheck::default() };
    Ok(gc.run(&net.store, &[input(&[2, 3, 32, 32], seed)], |ctx, v| {
        let y = lift(net.forward(ctx, v[0], &[]))?;
        lift(l1_loss(y, ctx.graph.constant(target.clone())))
    })?)
}

pub const CASES: &[(&str, Case)] = &[
    ("conv2d 3x3 stride 2", conv_standard),
    ("conv2d pointwise", conv_pointwise),
    ("conv2d depthwise 3x3", conv_depthwise_k3),
    ("conv2d depthwise 5x5 stride 2", conv_depthwise_k5_s2),
    ("conv2d grouped", conv_grouped),
    ("conv2d 7x7 spatial", conv_7x7),
    ("pooling", pooling),
    ("linear + activations", linear_and_activations),
    ("batch/layer norm", norms),
    ("squeeze-excite", squeeze_excite),
    ("mbconv e1", mbconv_e1),
    ("mbconv e6 stride 2", mbconv_e6_s2),
    ("mbconv skip", mbconv_skip),
    ("w-msa", w_msa),
    ("sw-msa (padded)", sw_msa),
    ("reduce-and-downsample", reduce_downsample),
    ("channel/spatial attention", cbam_maps),
    ("res_cbam", res_cbam),
    ("res_cbam without residual", res_cbam_no_residual),
    ("full model + L1", full_model),
];

pub fn run_case(name: &str, seed: u64) -> Result<CaseResult> {
    let (name, case) = CASES.iter().find(|(n, _)| *n == name).ok_or_else(|| usage_err(format!("unknown gradient case `{name}`")))?;
    Ok(CaseResult { name, seed, report: case(seed)? })
}

/// Every case for every seed, in table order.
pub fn run_suite(seeds: &[u64], mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (name, case) in CASES {
            let r = CaseResult { name, seed, report: case(seed)? };
            on_case(&r);
            out.push(r);
        }
    }
    Ok(out)
}
