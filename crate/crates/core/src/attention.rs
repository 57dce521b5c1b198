//! Shifted-window multi-head self-attention ("Module 4") and the
//! reduce-and-downsample step that precedes the final global interaction.

use std::sync::Arc;

use fgi_tensor::init::Init;
use fgi_tensor::nn::{BatchNorm2d, Conv2d, Ctx, LayerNorm, Linear};
use fgi_tensor::ops::Conv2dOptions;
use fgi_tensor::{Element, ParamStore, Rng, Tensor, Var};

use crate::error::{config_err, Result};

/// Additive mask value separating tokens from different pre-shift regions.
pub const MASK_NEG: f64 = -1e9;
const PROJ_INIT: Init = Init::TruncNormal { std: 0.02 };

#[derive(Clone, Debug, PartialEq)]
pub struct WindowAttnConfig {
    pub dim: usize,
    pub heads: usize,
    /// Side of the square window, in feature-map cells.
    pub window: usize,
    /// Shift of the SW-MSA block; 0 disables shifting.
    pub shift: usize,
    pub mlp_ratio: usize,
    pub use_relative_bias: bool,
}

impl WindowAttnConfig {
    /// One W-MSA/SW-MSA pair with shift `window/2`.
    pub fn new(dim: usize, heads: usize, window: usize) -> Self {
        Self { dim, heads, window, shift: window / 2, mlp_ratio: 2, use_relative_bias: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(config_err(format!("attention dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.window == 0 || self.shift >= self.window {
            return Err(config_err(format!("need 0 ≤ shift ({}) < window ({})", self.shift, self.window)));
        }
        if self.mlp_ratio == 0 {
            return Err(config_err("mlp_ratio must be ≥ 1"));
        }
        Ok(())
    }
}

/// Window side and shift actually used on an `h×w` map: a window that
/// covers the whole map becomes a single window and is never shifted.
pub fn effective_window(h: usize, w: usize, window: usize, shift: usize) -> (usize, usize) {
    if h <= window && w <= window {
        (h.max(w), 0)
    } else {
        (window, shift)
    }
}

/// Symmetric zero padding (top, bottom, left, right) up to window multiples.
pub fn window_padding(h: usize, w: usize, window: usize) -> (usize, usize, usize, usize) {
    let ph = h.div_ceil(window) * window - h;
    let pw = w.div_ceil(window) * window - w;
    (ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)
}

fn partition_index(n: usize, c: usize, h: usize, w: usize, window: usize) -> Vec<usize> {
    let (nh, nw) = (h / window, w / window);
    let l = window * window;
    let mut index = vec![0; n * c * h * w];
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                let win = (b * nh + wy) * nw + wx;
                for iy in 0..window {
                    for ix in 0..window {
                        let t = iy * window + ix;
                        let (y, x) = (wy * window + iy, wx * window + ix);
                        for ch in 0..c {
                            index[(win * l + t) * c + ch] = ((b * c + ch) * h + y) * w + x;
                        }
                    }
                }
            }
        }
    }
    index
}

/// `[N,C,H,W] → [N·(H/w)·(W/w), w², C]`, windows in row-major order.
pub fn window_partition<'g, T: Element>(x: Var<'g, T>, window: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(config_err(format!("window_partition expects NCHW, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(config_err(format!("feature map {h}x{w} is not divisible by window {window}; pad first")));
    }
    let index = partition_index(n, c, h, w, window);
    let windows = n * (h / window) * (w / window);
    Ok(x.gather(&[windows, window * window, c], Arc::new(index))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'g, T: Element>(windows: Var<'g, T>, window: usize, n: usize, h: usize, w: usize) -> Result<Var<'g, T>> {
    let s = windows.shape();
    if s.len() != 3 || window == 0 || h % window != 0 || w % window != 0 || s[0] != n * (h / window) * (w / window) || s[1] != window * window {
        return Err(config_err(format!("window_reverse: {s:?} does not tile a {n}x?x{h}x{w} map with window {window}")));
    }
    let c = s[2];
    let forward = partition_index(n, c, h, w, window);
    let mut index = vec![0; forward.len()];
    for (out_pos, &src) in forward.iter().enumerate() {
        index[src] = out_pos;
    }
    Ok(windows.gather(&[n, c, h, w], Arc::new(index))?)
}

/// Toroidal roll of the spatial axes by `(dy, dx)`.
pub fn cyclic_shift<'g, T: Element>(x: Var<'g, T>, dy: isize, dx: isize) -> Result<Var<'g, T>> {
    Ok(x.roll2d(dy, dx)?)
}

/// Additive attention mask `[num_windows, w², w²]` for a map rolled by
/// `−shift`: 0 where both tokens come from the same pre-shift region,
/// [`MASK_NEG`] otherwise. All zeros when `shift == 0`.
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> Tensor<f64> {
    let (nh, nw) = (h / window, w / window);
    let l = window * window;
    let mut mask = Tensor::zeros(&[nh * nw, l, l]);
    if shift == 0 {
        return mask;
    }
    let region = |pos: usize, extent: usize| -> usize {
        if pos < extent - window {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    let data = mask.data_mut();
    for wy in 0..nh {
        for wx in 0..nw {
            let win = wy * nw + wx;
            let labels: Vec<usize> = (0..l)
                .map(|t| {
                    let (y, x) = (wy * window + t / window, wx * window + t % window);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for i in 0..l {
                for j in 0..l {
                    if labels[i] != labels[j] {
                        data[(win * l + i) * l + j] = MASK_NEG;
                    }
                }
            }
        }
    }
    mask
}

/// Gather map from a `[(2w−1)², heads]` bias table to `[heads, L, L]` for an
/// effective window `we ≤ w`.
fn relative_bias_index(window: usize, effective: usize, heads: usize) -> Vec<usize> {
    let l = effective * effective;
    let span = 2 * window - 1;
    let mut index = vec![0; heads * l * l];
    for i in 0..l {
        for j in 0..l {
            let dy = (i / effective) as isize - (j / effective) as isize + window as isize - 1;
            let dx = (i % effective) as isize - (j % effective) as isize + window as isize - 1;
            let cell = dy as usize * span + dx as usize;
            for hd in 0..heads {
                index[(hd * l + i) * l + j] = cell * heads + hd;
            }
        }
    }
    index
}

/// Multi-head self-attention inside each window.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub relative_bias: Option<fgi_tensor::ParamId>,
}

impl WindowAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: &WindowAttnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.dim;
        let qkv = Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, PROJ_INIT, rng)?;
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, true, PROJ_INIT, rng)?;
        let span = 2 * cfg.window - 1;
        let relative_bias = cfg
            .use_relative_bias
            .then(|| store.add_param(&format!("{name}.relative_bias"), PROJ_INIT.tensor(&[span * span, cfg.heads], rng)))
            .transpose()?;
        Ok(Self { dim, heads: cfg.heads, window: cfg.window, qkv, proj, relative_bias })
    }

    /// `tokens`: `[N·nW, L, C]` windows of an `N`-image batch; `mask`:
    /// optional `[nW, L, L]` additive mask.
    pub fn forward<'g, T: Element>(
        &self,
        ctx: &Ctx<'g, '_, T>,
        tokens: Var<'g, T>,
        effective_window: usize,
        mask: Option<&Tensor<f64>>,
    ) -> Result<Var<'g, T>> {
        let s = tokens.shape();
        let (b, l, c) = (s[0], s[1], s[2]);
        if c != self.dim || l != effective_window * effective_window || effective_window > self.window {
            return Err(config_err(format!(
                "window attention (dim {}, window {}) got tokens {s:?} for window {effective_window}",
                self.dim, self.window
            )));
        }
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, tokens)?.reshape(&[b, l, 3, h, d])?.permute(&[2, 0, 3, 1, 4])?;
        let q = qkv.select_leading(0)?.reshape(&[b * h, l, d])?.scale(1.0 / (d as f64).sqrt());
        let k = qkv.select_leading(1)?.reshape(&[b * h, l, d])?;
        let v = qkv.select_leading(2)?.reshape(&[b * h, l, d])?;
        let mut scores = q.bmm(k, false, true)?.reshape(&[b, h, l, l])?;
        if let Some(table) = self.relative_bias {
            let index = relative_bias_index(self.window, effective_window, h);
            let bias = ctx.param(table).gather(&[h, l, l], Arc::new(index))?;
            scores = scores.add(bias)?;
        }
        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            if b % nw != 0 || mask.shape()[1] != l {
                return Err(config_err(format!("mask {:?} does not match {b} windows of {l} tokens", mask.shape())));
            }
            let m = ctx.graph.constant(mask.cast::<T>().reshaped(&[1, nw, 1, l, l])?);
            scores = scores.reshape(&[b / nw, nw, h, l, l])?.add(m)?;
        }
        let attn = scores.reshape(&[b * h, l, l])?.softmax_last();
        let out = attn.bmm(v, false, false)?.reshape(&[b, h, l, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, c])?;
        Ok(self.proj.forward(ctx, out)?)
    }
}

/// Pre-norm transformer block over an NCHW map with (shifted) window
/// attention and a two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub shift: usize,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: &WindowAttnConfig, shift: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = cfg.dim * cfg.mlp_ratio;
        Ok(Self {
            shift,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            attn: WindowAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), cfg.dim, hidden, true, PROJ_INIT, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, cfg.dim, true, PROJ_INIT, rng)?,
        })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.attn.dim {
            return Err(config_err(format!("swin block for {} channels got {s:?}", self.attn.dim)));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let (window, shift) = effective_window(h, w, self.attn.window, self.shift);
        let (pt, pb, pl, pr) = window_padding(h, w, window);
        let (hp, wp) = (h + pt + pb, w + pl + pr);

        let t = self.norm1.forward(ctx, x.permute(&[0, 2, 3, 1])?)?.permute(&[0, 3, 1, 2])?;
        let mut t = if pt + pb + pl + pr > 0 { t.pad2d(pt, pb, pl, pr)? } else { t };
        let mask = (shift > 0).then(|| shifted_window_mask(hp, wp, window, shift));
        if shift > 0 {
            t = cyclic_shift(t, -(shift as isize), -(shift as isize))?;
        }
        let windows = window_partition(t, window)?;
        let attended = self.attn.forward(ctx, windows, window, mask.as_ref())?;
        let mut t = window_reverse(attended, window, n, hp, wp)?;
        if shift > 0 {
            t = cyclic_shift(t, shift as isize, shift as isize)?;
        }
        if hp != h || wp != w {
            t = t.crop2d(pt, pl, h, w)?;
        }
        let x = x.add(t)?;

        let m = self.norm2.forward(ctx, x.permute(&[0, 2, 3, 1])?)?;
        let m = self.fc2.forward(ctx, self.fc1.forward(ctx, m)?.gelu_tanh())?;
        Ok(x.add(m.permute(&[0, 3, 1, 2])?)?)
    }
}

/// "Module 4": an unshifted block followed by a shifted one.
#[derive(Clone, Debug)]
pub struct GlobalInteraction {
    pub config: WindowAttnConfig,
    pub blocks: [SwinBlock; 2],
}

impl GlobalInteraction {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: &WindowAttnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w_msa = SwinBlock::new(store, &format!("{name}.block0"), cfg, 0, rng)?;
        let sw_msa = SwinBlock::new(store, &format!("{name}.block1"), cfg, cfg.shift, rng)?;
        Ok(Self { config: cfg.clone(), blocks: [w_msa, sw_msa] })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.blocks[0].forward(ctx, x)?;
        self.blocks[1].forward(ctx, x)
    }
}

/// 2×2 stride-2 convolution (with bias) followed by batch norm.
#[derive(Clone, Debug)]
pub struct ReduceDownsample {
    pub in_ch: usize,
    pub out_ch: usize,
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl ReduceDownsample {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut Rng) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 2, Conv2dOptions::default().stride(2), true, rng)?;
        let norm = BatchNorm2d::new(store, &format!("{name}.bn"), out_ch)?;
        Ok(Self { in_ch, out_ch, conv, norm })
    }

    pub fn forward<'g, T: Element>(&self, ctx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch || s[2] < 2 || s[3] < 2 {
            return Err(config_err(format!("reduce_and_downsample expects [N,{},H≥2,W≥2], got {s:?}", self.in_ch)));
        }
        let y = self.conv.forward(ctx, x)?;
        Ok(self.norm.forward(ctx, y)?)
    }
}
