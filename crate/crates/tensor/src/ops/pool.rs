use crate::element::Element;
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Non-overlapping pooling window (stride equals the window).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolWindow {
    Global,
    Size(usize, usize),
}

impl<'g, T: Element> Var<'g, T> {
    /// Spatial pooling of an NCHW tensor. Max routes its gradient to the
    /// first maximal element of each window in row-major order.
    pub fn pool2d(self, kind: PoolKind, window: PoolWindow) -> Result<Var<'g, T>> {
        let xv = self.value();
        if xv.rank() != 4 {
            return Err(config_err(format!("pool2d expects NCHW input, got {:?}", xv.shape())));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (kh, kw) = match window {
            PoolWindow::Global => (h, w),
            PoolWindow::Size(a, b) => (a, b),
        };
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(config_err(format!("pool window {kh}x{kw} does not fit input {h}x{w}")));
        }
        let (ho, wo) = (h / kh, w / kw);
        let area = T::of((kh * kw) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; if kind == PoolKind::Max { out.len() } else { 0 }];
        for (plane_idx, plane) in xv.data().chunks(h * w).enumerate() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = plane_idx * ho * wo + oy * wo + ox;
                    match kind {
                        PoolKind::Avg => {
                            let mut s = T::zero();
                            for y in oy * kh..(oy + 1) * kh {
                                s += plane[y * w + ox * kw..y * w + (ox + 1) * kw].iter().copied().sum::<T>();
                            }
                            out[o] = s / area;
                        }
                        PoolKind::Max => {
                            let mut best = oy * kh * w + ox * kw;
                            for y in oy * kh..(oy + 1) * kh {
                                for x in ox * kw..(ox + 1) * kw {
                                    if plane[y * w + x] > plane[best] {
                                        best = y * w + x;
                                    }
                                }
                            }
                            out[o] = plane[best];
                            argmax[o] = plane_idx * h * w + best;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.graph.push(
            value,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n * c * h * w];
                match kind {
                    PoolKind::Avg => {
                        for (plane_idx, gplane) in g.data().chunks(ho * wo).enumerate() {
                            let dst = &mut gx[plane_idx * h * w..(plane_idx + 1) * h * w];
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let share = gplane[oy * wo + ox] / area;
                                    for y in oy * kh..(oy + 1) * kh {
                                        dst[y * w + ox * kw..y * w + (ox + 1) * kw].iter_mut().for_each(|v| *v += share);
                                    }
                                }
                            }
                        }
                    }
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += g.data()[o];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx).expect("grad shape"))]
            }),
        ))
    }

    /// Per-pixel mean and max across channels: `[N,C,H,W] → [N,2,H,W]`.
    pub fn channel_pool(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        if xv.rank() != 4 || xv.shape()[1] == 0 {
            return Err(config_err(format!("channel_pool expects NCHW input with C ≥ 1, got {:?}", xv.shape())));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let hw = h * w;
        let mut out = vec![T::zero(); n * 2 * hw];
        let mut argmax = vec![0usize; n * hw];
        let inv_c = T::one() / T::of(c as f64);
        let x = xv.data();
        for b in 0..n {
            let (mean, max) = out[b * 2 * hw..(b + 1) * 2 * hw].split_at_mut(hw);
            max.copy_from_slice(&x[b * c * hw..b * c * hw + hw]);
            let am = &mut argmax[b * hw..(b + 1) * hw];
            am.iter_mut().enumerate().for_each(|(i, a)| *a = b * c * hw + i);
            for ch in 0..c {
                let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for i in 0..hw {
                    mean[i] += plane[i];
                    if plane[i] > max[i] {
                        max[i] = plane[i];
                        am[i] = (b * c + ch) * hw + i;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v *= inv_c);
        }
        let value = Tensor::from_vec(&[n, 2, h, w], out)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.graph.push(
            value,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n * c * hw];
                let gd = g.data();
                for b in 0..n {
                    let gmean = &gd[b * 2 * hw..b * 2 * hw + hw];
                    let gmax = &gd[b * 2 * hw + hw..(b + 1) * 2 * hw];
                    for ch in 0..c {
                        let dst = &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        dst.iter_mut().zip(gmean).for_each(|(d, &gm)| *d += gm * inv_c);
                    }
                    for i in 0..hw {
                        gx[argmax[b * hw + i]] += gmax[i];
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx).expect("grad shape"))]
            }),
        ))
    }
}
