use crate::element::Element;
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Per-channel batch mean and unbiased variance from a training-mode
/// batch-norm pass, used to update running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var_unbiased: Tensor<T>,
}

impl<'g, T: Element> Var<'g, T> {
    /// Batch normalization over the channel axis of an NCHW tensor.
    ///
    /// In training mode the batch statistics are used and returned; in eval
    /// mode only `running` (mean, variance) is used.
    pub fn batch_norm2d(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running: (&Tensor<T>, &Tensor<T>),
        training: bool,
        eps: f64,
    ) -> Result<(Var<'g, T>, Option<BatchStats<T>>)> {
        let xv = self.value();
        if xv.rank() != 4 {
            return Err(config_err(format!("batch_norm2d expects NCHW input, got {:?}", xv.shape())));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (gv, bv) = (gamma.value(), beta.value());
        for (what, t) in [("gamma", &*gv), ("beta", &*bv), ("running mean", running.0), ("running var", running.1)] {
            if t.shape() != [c] {
                return Err(config_err(format!("batch_norm2d {what} {:?} expected [{c}]", t.shape())));
            }
        }
        let hw = h * w;
        let m = n * hw;
        if training && m < 2 {
            return Err(config_err("batch_norm2d training needs more than one value per channel"));
        }
        let x = xv.data();
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    mean[ch] += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
            }
            let mf = T::of(m as f64);
            mean.iter_mut().for_each(|v| *v /= mf);
            for b in 0..n {
                for ch in 0..c {
                    let mu = mean[ch];
                    var[ch] += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= mf);
            (mean, var)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
                for ((xh, o), &xi) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                    *xh = (xi - mu) * is;
                    *o = ga * *xh + be;
                }
            }
        }
        let stats = training.then(|| {
            let correction = T::of(m as f64 / (m as f64 - 1.0));
            BatchStats {
                mean: Tensor::from_vec(&[c], mean.clone()).expect("stats shape"),
                var_unbiased: Tensor::from_vec(&[c], var.iter().map(|&v| v * correction).collect()).expect("stats shape"),
            }
        });
        let value = Tensor::from_vec(xv.shape(), out)?;
        let shape = xv.shape().to_vec();
        let var = self.graph.push(
            value,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&gi, &xh) in gd[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * xh;
                        }
                    }
                }
                let gx = need[0].then(|| {
                    let mut gx = vec![T::zero(); gd.len()];
                    let mf = T::of(m as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            let scale = gv.data()[ch] * inv_std[ch];
                            for ((o, &gi), &xh) in gx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                                *o = if training {
                                    scale * (gi - sum_g[ch] / mf - xh * sum_gx[ch] / mf)
                                } else {
                                    scale * gi
                                };
                            }
                        }
                    }
                    Tensor::from_vec(&shape, gx).expect("grad shape")
                });
                vec![
                    gx,
                    Some(Tensor::from_vec(&[c], sum_gx).expect("grad shape")),
                    Some(Tensor::from_vec(&[c], sum_g).expect("grad shape")),
                ]
            }),
        );
        Ok((var, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let xv = self.value();
        let d = *xv.shape().last().ok_or_else(|| config_err("layer_norm input must have rank ≥ 1"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(config_err(format!(
                "layer_norm parameters {:?}/{:?} do not match last extent {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let eps = T::of(eps);
        let df = T::of(d as f64);
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let shape = xv.shape().to_vec();
        Ok(self.graph.push(
            value,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = need[0].then(|| vec![T::zero(); gd.len()]);
                let mut gh = vec![T::zero(); d];
                for r in 0..rows {
                    let grow = &gd[r * d..(r + 1) * d];
                    let xrow = &xhat[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        ggamma[j] += grow[j] * xrow[j];
                        gbeta[j] += grow[j];
                        gh[j] = grow[j] * gv.data()[j];
                        s1 += gh[j];
                        s2 += gh[j] * xrow[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gh[j] - s1 / df - xrow[j] * s2 / df);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::from_vec(&shape, v).expect("grad shape")),
                    Some(Tensor::from_vec(&[d], ggamma).expect("grad shape")),
                    Some(Tensor::from_vec(&[d], gbeta).expect("grad shape")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn batch_norm_of_standardized_batch_is_near_identity() {
        // one channel, four values with mean 0 and biased variance 1
        let g = Graph::<f64>::new();
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (rm, rv) = (Tensor::zeros(&[1]), Tensor::ones(&[1]));
        let (y, stats) = g
            .constant(x.clone())
            .batch_norm2d(g.constant(Tensor::ones(&[1])), g.constant(Tensor::zeros(&[1])), (&rm, &rv), true, 1e-5)
            .unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (o, i) in y.value().data().iter().zip(x.data()) {
            assert!((o - i * expected).abs() < 1e-12);
            assert!((o - i).abs() < 1e-5);
        }
        let stats = stats.unwrap();
        assert_eq!(stats.mean.data(), &[0.0]);
        assert!((stats.var_unbiased.data()[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats_only() {
        let g = Graph::<f64>::new();
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![3.0, 5.0]).unwrap();
        let (rm, rv) = (Tensor::full(&[1], 1.0), Tensor::full(&[1], 4.0));
        let (y, stats) = g
            .constant(x)
            .batch_norm2d(g.constant(Tensor::ones(&[1])), g.constant(Tensor::zeros(&[1])), (&rm, &rv), false, 0.0)
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(y.value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let g = Graph::<f64>::new();
        let y = g
            .constant(Tensor::full(&[3, 4], 2.5))
            .layer_norm(g.constant(Tensor::ones(&[4])), g.constant(Tensor::zeros(&[4])), 1e-5)
            .unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }
}
