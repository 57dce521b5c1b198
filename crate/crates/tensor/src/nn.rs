//! Parameterized layers and the per-forward context they run in.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng as _;

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::ops::{BatchStats, Conv2dOptions};
use crate::param::{BufferId, ParamId, ParamStore};
use crate::Rng;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// State shared by all layers during one forward pass.
pub struct Ctx<'g, 'a, T> {
    pub graph: &'g Graph<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    /// Batch norm uses running statistics even when `training` is set.
    pub freeze_norm: bool,
    rng: RefCell<Rng>,
    overrides: HashMap<ParamId, Var<'g, T>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

/// Running-statistics update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub stats: BatchStats<T>,
}

impl<'g, 'a, T: Element> Ctx<'g, 'a, T> {
    pub fn new(graph: &'g Graph<T>, store: &'a ParamStore<T>, training: bool, rng: Rng) -> Self {
        Self {
            graph,
            store,
            training,
            freeze_norm: false,
            rng: RefCell::new(rng),
            overrides: HashMap::new(),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval(graph: &'g Graph<T>, store: &'a ParamStore<T>) -> Self {
        use rand::SeedableRng;
        Self::new(graph, store, false, Rng::seed_from_u64(0))
    }

    /// Substitutes `var` wherever parameter `id` would be read.
    pub fn override_param(&mut self, id: ParamId, var: Var<'g, T>) {
        self.overrides.insert(id, var);
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        match self.overrides.get(&id) {
            Some(v) => *v,
            None => self.store.var(self.graph, id),
        }
    }

    pub fn dropout(&self, x: Var<'g, T>, p: f64) -> Result<Var<'g, T>> {
        x.dropout(p, self.training, &mut *self.rng.borrow_mut())
    }

    pub fn next_seed(&self) -> u64 {
        self.rng.borrow_mut().random()
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }
}

impl<T: Element> ParamStore<T> {
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (buf, stat) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var_unbiased)] {
                self.buffer_mut(buf)
                    .data_mut()
                    .iter_mut()
                    .zip(stat.data())
                    .for_each(|(r, &s)| *r = keep * *r + m * s);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOptions,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cin_g = cin / opts.groups.max(1);
        let fan_in = cin_g * kernel * kernel;
        let weight = store.add_param(
            &format!("{name}.weight"),
            Init::KaimingUniform { fan_in }.tensor(&[cout, cin_g, kernel, kernel], rng),
        )?;
        let bias = bias
            .then(|| store.add_param(&format!("{name}.bias"), Init::Zeros.tensor(&[cout], rng)))
            .transpose()?;
        Ok(Self { weight, bias, opts })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add_param(&format!("{name}.weight"), init.tensor(&[dout, din], rng))?;
        let bias = bias
            .then(|| store.add_param(&format!("{name}.bias"), Init::Zeros.tensor(&[dout], rng)))
            .transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn kaiming<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::new(store, name, din, dout, true, Init::KaimingUniform { fan_in: din }, rng)
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        use crate::Tensor;
        Ok(Self {
            gamma: store.add_param(&format!("{name}.weight"), Tensor::ones(&[channels]))?,
            beta: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let batch_stats = ctx.training && !ctx.freeze_norm;
        let (y, stats) = x.batch_norm2d(
            ctx.param(self.gamma),
            ctx.param(self.beta),
            (ctx.store.buffer(self.running_mean), ctx.store.buffer(self.running_var)),
            batch_stats,
            NORM_EPS,
        )?;
        if let Some(stats) = stats {
            ctx.bn_updates.borrow_mut().push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        use crate::Tensor;
        Ok(Self {
            gamma: store.add_param(&format!("{name}.weight"), Tensor::ones(&[dim]))?,
            beta: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), NORM_EPS)
    }
}
