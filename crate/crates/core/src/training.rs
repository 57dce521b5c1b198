//! L1 regression on gaze vectors with Adam/AdamW, a warmed-up cyclical
//! learning rate and per-stage linearly decaying dropout.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use fgi_tensor::nn::{Ctx, BN_MOMENTUM};
use fgi_tensor::{Element, Graph, ParamStore, Rng, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::config::KvDoc;
use crate::data::GazeDataset;
use crate::error::{config_err, usage_err, Error, Result};
use crate::eval::{evaluate, make_folds, FoldResult, Protocol};
use crate::model::{FgiNet, ModelConfig};

/// Mean absolute difference; the subgradient at 0 is 0.
pub fn l1_loss<'g, T: Element>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    if pred.shape() != target.shape() {
        return Err(usage_err(format!("l1_loss shape mismatch: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    Ok(pred.sub(target)?.abs().mean_all())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(config_err(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    PretrainEth,
    Gaze360,
    Mpii,
    EyeDiap,
    RtGene,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::PretrainEth, Preset::Gaze360, Preset::Mpii, Preset::EyeDiap, Preset::RtGene];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PretrainEth => "pretrain-eth",
            Preset::Gaze360 => "gaze360",
            Preset::Mpii => "mpii",
            Preset::EyeDiap => "eyediap",
            Preset::RtGene => "rtgene",
        }
    }

    /// Cross-validation protocol used with the dataset, if any.
    pub fn protocol(self) -> Option<Protocol> {
        match self {
            Preset::Mpii => Some(Protocol::LeaveOneSubjectOut),
            Preset::EyeDiap => Some(Protocol::KFold(4)),
            Preset::RtGene => Some(Protocol::KFold(3)),
            Preset::PretrainEth | Preset::Gaze360 => None,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            usage_err(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub optimizer: OptimizerKind,
    pub betas: (f64, f64),
    pub eps: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Epochs per half-cycle of the triangular schedule.
    pub clr_step_size: f64,
    pub warmup_epochs: f64,
    /// `(factor, every)`: the schedule is multiplied by
    /// `factor^floor(epoch / every)`.
    pub decay: Option<(f64, usize)>,
    /// Decoupled weight decay, AdamW only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stage dropout rates at epoch 0.
    pub dropout_base: Vec<f64>,
    pub seed: u64,
}

/// Peak learning rate of every fine-tuning preset.
const FINETUNE_LR: f64 = 0.0005;

impl TrainPlan {
    pub fn preset(p: Preset) -> Self {
        let finetune = |batch_size, epochs| TrainPlan {
            optimizer: OptimizerKind::Adam,
            betas: (0.88, 0.999),
            eps: 1e-8,
            base_lr: FINETUNE_LR,
            max_lr: FINETUNE_LR,
            clr_step_size: 5.0,
            warmup_epochs: 5.0,
            decay: None,
            weight_decay: 0.0,
            batch_size,
            epochs,
            dropout_base: vec![0.0; 3],
            seed: 0,
        };
        match p {
            Preset::PretrainEth => TrainPlan {
                optimizer: OptimizerKind::AdamW,
                betas: (0.88, 0.99),
                eps: 1e-8,
                base_lr: 0.0001,
                max_lr: 0.0005,
                clr_step_size: 5.0,
                warmup_epochs: 3.0,
                decay: Some((0.5, 10)),
                weight_decay: 0.01,
                batch_size: 64,
                epochs: 30,
                dropout_base: vec![0.0; 3],
                seed: 0,
            },
            Preset::Gaze360 => finetune(32, 60),
            Preset::Mpii => TrainPlan { decay: Some((0.5, 60)), ..finetune(64, 80) },
            Preset::EyeDiap => TrainPlan { dropout_base: vec![0.09, 0.06, 0.03], ..finetune(12, 50) },
            Preset::RtGene => finetune(32, 50),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.base_lr) && positive(self.max_lr) && self.base_lr <= self.max_lr) {
            return Err(config_err(format!("need 0 < base_lr ≤ max_lr, got {} and {}", self.base_lr, self.max_lr)));
        }
        if !(self.clr_step_size >= 1.0) {
            return Err(config_err(format!("clr_step_size must be ≥ 1, got {}", self.clr_step_size)));
        }
        if !(self.warmup_epochs >= 0.0) {
            return Err(config_err("warmup_epochs must be ≥ 0"));
        }
        if let Some((f, every)) = self.decay {
            if !(positive(f) && every >= 1) {
                return Err(config_err(format!("decay needs a positive factor and step ≥ 1, got ({f}, {every})")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !positive(self.eps) {
            return Err(config_err(format!("betas must lie in [0,1) and eps > 0, got {:?} / {}", self.betas, self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be ≥ 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err("batch_size and epochs must be ≥ 1"));
        }
        if let Some(p) = self.dropout_base.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(config_err(format!("dropout rate {p} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("train.optimizer", self.optimizer);
        d.set("train.beta1", self.betas.0);
        d.set("train.beta2", self.betas.1);
        d.set("train.eps", self.eps);
        d.set("train.base_lr", self.base_lr);
        d.set("train.max_lr", self.max_lr);
        d.set("train.clr_step_size", self.clr_step_size);
        d.set("train.warmup_epochs", self.warmup_epochs);
        let (factor, every) = self.decay.unwrap_or((1.0, 0));
        d.set("train.decay_factor", factor);
        d.set("train.decay_step", every);
        d.set("train.weight_decay", self.weight_decay);
        d.set("train.batch_size", self.batch_size);
        d.set("train.epochs", self.epochs);
        let rates: Vec<String> = self.dropout_base.iter().map(f64::to_string).collect();
        d.set("train.dropout", rates.join(","));
        d.set("train.seed", self.seed);
        d
    }

    /// Reads `train.*` keys from `d` on top of `self`.
    pub fn with_overrides(&self, d: &KvDoc) -> Result<Self> {
        let mut p = self.clone();
        p.optimizer = d.opt("train.optimizer", p.optimizer)?;
        p.betas = (d.opt("train.beta1", p.betas.0)?, d.opt("train.beta2", p.betas.1)?);
        p.eps = d.opt("train.eps", p.eps)?;
        p.base_lr = d.opt("train.base_lr", p.base_lr)?;
        p.max_lr = d.opt("train.max_lr", p.max_lr)?;
        p.clr_step_size = d.opt("train.clr_step_size", p.clr_step_size)?;
        p.warmup_epochs = d.opt("train.warmup_epochs", p.warmup_epochs)?;
        let (f0, s0) = p.decay.unwrap_or((1.0, 0));
        let (factor, every) = (d.opt("train.decay_factor", f0)?, d.opt("train.decay_step", s0)?);
        p.decay = (every > 0).then_some((factor, every));
        p.weight_decay = d.opt("train.weight_decay", p.weight_decay)?;
        p.batch_size = d.opt("train.batch_size", p.batch_size)?;
        p.epochs = d.opt("train.epochs", p.epochs)?;
        if let Some(raw) = d.get("train.dropout") {
            p.dropout_base = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| config_err(format!("train.dropout: cannot parse {s:?}"))))
                .collect::<Result<_>>()?;
        }
        p.seed = d.opt("train.seed", p.seed)?;
        let known = p.to_kv();
        if let Some(k) = d.keys().filter(|k| k.starts_with("train.")).find(|k| !known.contains(k)) {
            return Err(config_err(format!("unknown training key `{k}`")));
        }
        p.validate()?;
        Ok(p)
    }
}

fn triangular(plan: &TrainPlan, epoch: f64) -> f64 {
    let step = plan.clr_step_size;
    let cycle = (1.0 + epoch / (2.0 * step)).floor();
    let x = (epoch / step - 2.0 * cycle + 1.0).abs();
    plan.base_lr + (plan.max_lr - plan.base_lr) * (1.0 - x).max(0.0)
}

fn decay_scale(plan: &TrainPlan, epoch: f64) -> f64 {
    match plan.decay {
        Some((factor, every)) => factor.powf((epoch / every as f64).floor()),
        None => 1.0,
    }
}

/// Learning rate at a (fractional) epoch: linear warmup from 0 to the
/// scheduled value at the warmup end, then decayed triangular CLR.
pub fn lr_at(plan: &TrainPlan, epoch: f64) -> f64 {
    let scheduled = |e: f64| triangular(plan, e) * decay_scale(plan, e);
    if epoch < plan.warmup_epochs {
        scheduled(plan.warmup_epochs) * epoch / plan.warmup_epochs
    } else {
        scheduled(epoch)
    }
}

/// Stage dropout rates decayed linearly from `base` to 0 at `total_epochs`.
pub fn dropout_rate_at(base: &[f64], epoch: usize, total_epochs: usize) -> Vec<f64> {
    let remaining = 1.0 - epoch.min(total_epochs) as f64 / total_epochs.max(1) as f64;
    base.iter().map(|b| b * remaining).collect()
}

/// Adam with bias correction; AdamW additionally shrinks parameters by
/// `lr·wd` before the Adam step.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self { kind, betas, eps, weight_decay, steps: 0, moments: Vec::new() }
    }

    pub fn from_plan(plan: &TrainPlan) -> Self {
        Self::new(plan.optimizer, plan.betas, plan.eps, plan.weight_decay)
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(usage_err(format!("learning rate must be positive, got {lr}")));
        }
        self.steps += 1;
        let (b1, b2) = self.betas;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = match self.kind {
            OptimizerKind::AdamW if self.weight_decay > 0.0 => Some(lr * self.weight_decay),
            _ => None,
        };
        let ids: Vec<_> = store.param_ids().collect();
        self.moments.resize(ids.len(), None);
        for id in ids {
            let Some(grad) = store.param_mut(id).grad.take() else { continue };
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let value = store.value_mut(id);
            let iter = value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data());
            for (((p, m), v), &g) in iter {
                let g = g.to_f64c();
                let mut pf = p.to_f64c();
                if let Some(d) = decay {
                    pf -= d * pf;
                }
                let mf = b1 * m.to_f64c() + (1.0 - b1) * g;
                let vf = b2 * v.to_f64c() + (1.0 - b2) * g * g;
                *m = T::of(mf);
                *v = T::of(vf);
                pf -= lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *p = T::of(pf);
            }
            store.param_mut(id).grad = Some(grad);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// `lr_at(plan, epoch)`, the rate of the epoch's last batch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_angular_error_deg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_angular_error_deg\n");
        for r in &self.epochs {
            let val = r.val_angular_error_deg.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Shuffled batches of `order`; a trailing single sample joins the previous
/// batch so batch norm always sees two values per channel.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Trains `net` on `train`, evaluating on `val` after every epoch.
pub fn fit(
    net: &mut FgiNet<f32>,
    train: &GazeDataset,
    val: Option<&GazeDataset>,
    plan: &TrainPlan,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    plan.validate()?;
    if train.len() < 2 {
        return Err(usage_err(format!("training needs at least 2 samples, got {}", train.len())));
    }
    let stages = net.config.stages.len();
    if !plan.dropout_base.is_empty() && plan.dropout_base.len() != stages {
        return Err(config_err(format!("{} dropout rates for {stages} stages", plan.dropout_base.len())));
    }
    let mut rng = Rng::seed_from_u64(plan.seed);
    let mut opt = Optimizer::from_plan(plan);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    for epoch in 0..plan.epochs {
        let rates = dropout_rate_at(&plan.dropout_base, epoch, plan.epochs);
        order.shuffle(&mut rng);
        let batches = batches(&order, plan.batch_size);
        let nb = batches.len();
        let mut loss_sum = 0.0;
        for (i, idx) in batches.into_iter().enumerate() {
            let lr = lr_at(plan, epoch as f64 + (i + 1) as f64 / nb as f64);
            let (images, targets) = train.batch(idx)?;
            let graph = Graph::new();
            let ctx = Ctx::new(&graph, &net.store, true, Rng::seed_from_u64(rng.random()));
            let pred = net.forward(&ctx, graph.constant(images), &rates).map_err(|e| match e {
                Error::Tensor(fgi_tensor::Error::Numeric { location, detail }) => {
                    Error::Numeric(format!("epoch {} batch {}: non-finite values in {location}: {detail}", epoch + 1, i + 1))
                }
                other => other,
            })?;
            let loss = l1_loss(pred, graph.constant(targets))?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {} batch {}: loss is {value}", epoch + 1, i + 1)));
            }
            loss_sum += value * idx.len() as f64;
            let grads = graph.backward(loss)?;
            let bn = ctx.take_bn_updates();
            drop(ctx);
            net.store.zero_grad();
            net.store.accumulate(&grads);
            drop(grads);
            opt.step(&mut net.store, lr)?;
            net.store.apply_bn_updates(&bn, BN_MOMENTUM);
        }
        let val_err = val.map(|v| evaluate(net, v).map(|r| r.mean_deg)).transpose()?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: lr_at(plan, (epoch + 1) as f64),
            train_loss: loss_sum / train.len() as f64,
            val_angular_error_deg: val_err,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    net.store.zero_grad();
    Ok(history)
}

/// Builds, trains and evaluates one model per fold.
pub fn cross_validate(
    config: &ModelConfig,
    ds: &GazeDataset,
    protocol: Protocol,
    plan: &TrainPlan,
    mut on_fold: impl FnMut(&FoldResult),
) -> Result<Vec<FoldResult>> {
    let folds = make_folds(ds, protocol, plan.seed)?;
    let mut results = Vec::new();
    for fold in folds {
        let mut net = FgiNet::build_seeded(config, plan.seed)?;
        fit(&mut net, &ds.subset(&fold.train), None, plan, |_| {})?;
        let report = evaluate(&net, &ds.subset(&fold.test))?;
        let r = FoldResult { fold: fold.label, n_test: fold.test.len(), mean_error_deg: report.mean_deg };
        on_fold(&r);
        results.push(r);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            TrainPlan::preset(p).validate().unwrap();
        }
        assert!("imagenet".parse::<Preset>().is_err());
    }

    #[test]
    fn plan_kv_round_trip() {
        for p in Preset::ALL {
            let plan = TrainPlan::preset(p);
            let back = TrainPlan::preset(Preset::Gaze360).with_overrides(&plan.to_kv()).unwrap();
            assert_eq!(back, plan);
        }
        let bad = KvDoc::parse("train.epoch = 3").unwrap();
        assert!(TrainPlan::preset(Preset::Mpii).with_overrides(&bad).is_err());
    }

    #[test]
    fn singleton_tail_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), [4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn l1_examples() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(l1_loss(p, z).unwrap().value().item(), 2.0);
        assert_eq!(l1_loss(p, p).unwrap().value().item(), 0.0);
        assert!(l1_loss(p, g.constant(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap()).unwrap();
        store.param_mut(id).grad = Some(Tensor::zeros(&[2]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, (0.88, 0.999), 1e-8, 0.0);
        opt.step(&mut store, 0.01).unwrap();
        assert_eq!(store.param(id).value.data(), &[0.5, -1.5]);
        assert!(opt.step(&mut store, 0.0).is_err());
    }
}
