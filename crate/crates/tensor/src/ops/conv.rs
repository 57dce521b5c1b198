//! 2-D convolution (cross-correlation) over NCHW tensors.
//!
//! Grouped convolutions go through im2col + GEMM per group; groups with a
//! single input channel (depthwise) use a direct loop.

use crate::element::{gemm, Element, MatRef};
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0), groups: 1 }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// `floor((size + 2·pad − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit the padded input.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox·sw + kj − pw` is in range.
    fn ox_range(&self, kj: usize) -> (usize, usize) {
        col_range(self.w, self.wo, self.sw, self.pw, kj)
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

fn col_range(w: usize, wo: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    // ox·s + k ≥ p  and  ox·s + k − p ≤ w − 1
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if w + p > k { ((w - 1 + p - k) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], geo: &Geometry, cols: &mut [T]) {
    let (h, w, p) = (geo.h, geo.w, geo.p());
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..geo.cin_g() {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = geo.ox_range(kj);
                for oy in 0..geo.ho {
                    let iy = (oy * geo.sh + ki) as isize - geo.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..];
                    let out = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    for ox in lo..hi {
                        out[ox] = src[ox * geo.sw + kj - geo.pw];
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], geo: &Geometry, gx: &mut [T]) {
    let (h, w, p) = (geo.h, geo.w, geo.p());
    for c in 0..geo.cin_g() {
        let plane = &mut gx[c * h * w..(c + 1) * h * w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = geo.ox_range(kj);
                for oy in 0..geo.ho {
                    let iy = (oy * geo.sh + ki) as isize - geo.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..];
                    let s = &src[oy * geo.wo..(oy + 1) * geo.wo];
                    for ox in lo..hi {
                        dst[ox * geo.sw + kj - geo.pw] += s[ox];
                    }
                }
            }
        }
    }
}

/// Depthwise forward for one output plane: `out += conv(plane, kernel)`.
fn depthwise_plane<T: Element>(plane: &[T], kernel: &[T], geo: &Geometry, out: &mut [T]) {
    for ki in 0..geo.kh {
        for kj in 0..geo.kw {
            let wv = kernel[ki * geo.kw + kj];
            let (lo, hi) = geo.ox_range(kj);
            for oy in 0..geo.ho {
                let iy = (oy * geo.sh + ki) as isize - geo.ph as isize;
                if iy < 0 || iy >= geo.h as isize {
                    continue;
                }
                let src = &plane[iy as usize * geo.w..];
                let dst = &mut out[oy * geo.wo..(oy + 1) * geo.wo];
                for ox in lo..hi {
                    dst[ox] += wv * src[ox * geo.sw + kj - geo.pw];
                }
            }
        }
    }
}

/// Depthwise backward for one output plane, accumulating into the input
/// gradient plane and the kernel gradient.
fn depthwise_plane_backward<T: Element>(
    plane: &[T],
    kernel: &[T],
    grad_out: &[T],
    geo: &Geometry,
    grad_plane: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
) {
    let mut grad_plane = grad_plane;
    let mut grad_kernel = grad_kernel;
    for ki in 0..geo.kh {
        for kj in 0..geo.kw {
            let wv = kernel[ki * geo.kw + kj];
            let (lo, hi) = geo.ox_range(kj);
            let mut gw = T::zero();
            for oy in 0..geo.ho {
                let iy = (oy * geo.sh + ki) as isize - geo.ph as isize;
                if iy < 0 || iy >= geo.h as isize {
                    continue;
                }
                let base = iy as usize * geo.w;
                let g = &grad_out[oy * geo.wo..(oy + 1) * geo.wo];
                if grad_kernel.is_some() {
                    let src = &plane[base..];
                    for ox in lo..hi {
                        gw += g[ox] * src[ox * geo.sw + kj - geo.pw];
                    }
                }
                if let Some(gp) = grad_plane.as_deref_mut() {
                    let dst = &mut gp[base..];
                    for ox in lo..hi {
                        dst[ox * geo.sw + kj - geo.pw] += wv * g[ox];
                    }
                }
            }
            if let Some(gk) = grad_kernel.as_deref_mut() {
                gk[ki * geo.kw + kj] += gw;
            }
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Convolution of an NCHW input with a `[Cout, Cin/groups, kh, kw]`
    /// kernel.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, opts: Conv2dOptions) -> Result<Var<'g, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let bv = bias.map(|b| b.value());
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(config_err(format!("conv2d expects rank-4 input and weight, got {:?} and {:?}", xv.shape(), wv.shape())));
        }
        let (n, cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, cin_g, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let groups = opts.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(config_err(format!("groups={groups} must divide Cin={cin} and Cout={cout}")));
        }
        if cin / groups != cin_g {
            return Err(config_err(format!(
                "weight {:?} expects {cin_g} input channels per group, input has {cin} channels in {groups} groups",
                wv.shape()
            )));
        }
        if let Some(b) = &bv {
            if b.shape() != [cout] {
                return Err(config_err(format!("conv2d bias {:?} expected [{cout}]", b.shape())));
            }
        }
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        let (Some(ho), Some(wo)) = (conv2d_output_size(h, kh, sh, ph), conv2d_output_size(w, kw, sw, pw)) else {
            return Err(config_err(format!(
                "kernel {kh}x{kw} (stride {sh}x{sw}) does not fit input {h}x{w} padded by {ph}x{pw}"
            )));
        };
        let geo = Geometry { n, cin, h, w, cout, kh, kw, ho, wo, sh, sw, ph, pw, groups };
        let out = conv_forward(xv.data(), wv.data(), bv.as_deref().map(|b| b.data()), &geo);
        self.graph.add_macs((n * cout * ho * wo * cin_g * kh * kw) as u64);
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph.push(
            value,
            &inputs,
            Box::new(move |g, need| {
                let (gx, gw) = conv_backward(xv.data(), wv.data(), g.data(), &geo, need[0], need[1]);
                let mut grads = vec![
                    gx.map(|d| Tensor::from_vec(xv.shape(), d).expect("grad shape")),
                    gw.map(|d| Tensor::from_vec(wv.shape(), d).expect("grad shape")),
                ];
                if need.len() > 2 {
                    let p = geo.p();
                    let mut gb = vec![T::zero(); geo.cout];
                    for (i, plane) in g.data().chunks(p).enumerate() {
                        gb[i % geo.cout] += plane.iter().copied().sum::<T>();
                    }
                    grads.push(Some(Tensor::from_vec(&[geo.cout], gb).expect("grad shape")));
                }
                grads
            }),
        ))
    }
}

fn conv_forward<T: Element>(x: &[T], wt: &[T], bias: Option<&[T]>, geo: &Geometry) -> Vec<T> {
    let (p, k) = (geo.p(), geo.k());
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let in_plane = geo.h * geo.w;
    let mut out = vec![T::zero(); geo.n * geo.cout * p];
    let mut cols = if cin_g > 1 && !geo.pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
    for b in 0..geo.n {
        for grp in 0..geo.groups {
            let xg = &x[(b * geo.cin + grp * cin_g) * in_plane..(b * geo.cin + (grp + 1) * cin_g) * in_plane];
            let wg = &wt[grp * cout_g * k..(grp + 1) * cout_g * k];
            let og = &mut out[(b * geo.cout + grp * cout_g) * p..(b * geo.cout + (grp + 1) * cout_g) * p];
            if cin_g == 1 {
                for (co, oplane) in og.chunks_mut(p).enumerate() {
                    depthwise_plane(xg, &wg[co * k..(co + 1) * k], geo, oplane);
                }
            } else if geo.pointwise() {
                gemm(MatRef::new(wg, cout_g, k), MatRef::new(xg, k, p), og, false);
            } else {
                im2col(xg, geo, &mut cols);
                gemm(MatRef::new(wg, cout_g, k), MatRef::new(&cols, k, p), og, false);
            }
        }
        if let Some(bias) = bias {
            for (co, oplane) in out[b * geo.cout * p..(b + 1) * geo.cout * p].chunks_mut(p).enumerate() {
                oplane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

fn conv_backward<T: Element>(
    x: &[T],
    wt: &[T],
    g: &[T],
    geo: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (p, k) = (geo.p(), geo.k());
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let in_plane = geo.h * geo.w;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); wt.len()]);
    let im2col_path = cin_g > 1 && !geo.pointwise();
    let mut cols = if im2col_path { vec![T::zero(); k * p] } else { Vec::new() };
    let mut gcols = if im2col_path && need_x { vec![T::zero(); k * p] } else { Vec::new() };
    for b in 0..geo.n {
        for grp in 0..geo.groups {
            let xr = (b * geo.cin + grp * cin_g) * in_plane..(b * geo.cin + (grp + 1) * cin_g) * in_plane;
            let xg = &x[xr.clone()];
            let wr = grp * cout_g * k..(grp + 1) * cout_g * k;
            let wg = &wt[wr.clone()];
            let gg = &g[(b * geo.cout + grp * cout_g) * p..(b * geo.cout + (grp + 1) * cout_g) * p];
            if cin_g == 1 {
                for co in 0..cout_g {
                    depthwise_plane_backward(
                        xg,
                        &wg[co * k..(co + 1) * k],
                        &gg[co * p..(co + 1) * p],
                        geo,
                        gx.as_mut().map(|v| &mut v[xr.clone()]),
                        gw.as_mut().map(|v| &mut v[wr.start + co * k..wr.start + (co + 1) * k]),
                    );
                }
            } else if geo.pointwise() {
                if let Some(gw) = gw.as_mut() {
                    gemm(MatRef::new(gg, cout_g, p), MatRef::new(xg, k, p).t(), &mut gw[wr.clone()], true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(MatRef::new(wg, cout_g, k).t(), MatRef::new(gg, cout_g, p), &mut gx[xr.clone()], true);
                }
            } else {
                if let Some(gw) = gw.as_mut() {
                    im2col(xg, geo, &mut cols);
                    gemm(MatRef::new(gg, cout_g, p), MatRef::new(&cols, k, p).t(), &mut gw[wr.clone()], true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(MatRef::new(wg, cout_g, k).t(), MatRef::new(gg, cout_g, p), &mut gcols, false);
                    col2im(&gcols, geo, &mut gx[xr.clone()]);
                }
            }
        }
    }
    (gx, gw)
}
