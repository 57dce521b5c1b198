use crate::element::{gemm, Element, MatRef};
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

fn mat<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    let r = MatRef::new(data, rows, cols);
    if transposed {
        r.t()
    } else {
        r
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Affine map over the last axis: `x·Wᵀ + b` with `W` of shape
    /// `[out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let xs = xv.shape().to_vec();
        let din = *xs.last().ok_or_else(|| config_err("linear input must have rank ≥ 1"))?;
        if wv.rank() != 2 || wv.shape()[1] != din {
            return Err(config_err(format!(
                "linear weight {:?} does not accept input with last extent {din}",
                wv.shape()
            )));
        }
        let dout = wv.shape()[0];
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [dout] {
                return Err(config_err(format!("linear bias {:?} expected [{dout}]", b.shape())));
            }
        }
        let rows = xv.numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        gemm(MatRef::new(xv.data(), rows, din), MatRef::new(wv.data(), dout, din).t(), &mut out, false);
        if let Some(b) = &bv {
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(b.data()).for_each(|(o, &bi)| *o += bi);
            }
        }
        self.graph.add_macs((rows * din * dout) as u64);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank ≥ 1") = dout;
        let value = Tensor::from_vec(&out_shape, out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.graph.push(
            value,
            &inputs,
            Box::new(move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut gx = vec![T::zero(); rows * din];
                    gemm(MatRef::new(gd, rows, dout), MatRef::new(wv.data(), dout, din), &mut gx, false);
                    Tensor::from_vec(&xs, gx).expect("grad shape")
                });
                let gw = need[1].then(|| {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(MatRef::new(gd, rows, dout).t(), MatRef::new(xv.data(), rows, din), &mut gw, false);
                    Tensor::from_vec(&[dout, din], gw).expect("grad shape")
                });
                let mut grads = vec![gx, gw];
                if need.len() > 2 {
                    let mut gb = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    grads.push(Some(Tensor::from_vec(&[dout], gb).expect("grad shape")));
                }
                grads
            }),
        ))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]` rank-3 tensors,
    /// with either operand optionally transposed in its last two axes.
    pub fn bmm(self, other: Var<'g, T>, transpose_a: bool, transpose_b: bool) -> Result<Var<'g, T>> {
        let (av, bv) = (self.value(), other.value());
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(config_err(format!("bmm needs matching rank-3 operands, got {:?} and {:?}", av.shape(), bv.shape())));
        }
        let batch = av.shape()[0];
        let (ar, ac) = (av.shape()[1], av.shape()[2]);
        let (br, bc) = (bv.shape()[1], bv.shape()[2]);
        let (m, k) = if transpose_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(config_err(format!("bmm inner extents differ: {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                mat(&av.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac, transpose_a),
                mat(&bv.data()[i * br * bc..(i + 1) * br * bc], br, bc, transpose_b),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.graph.add_macs((batch * m * k * n) as u64);
        let value = Tensor::from_vec(&[batch, m, n], out)?;
        Ok(self.graph.push(
            value,
            &[self, other],
            Box::new(move |g, need| {
                let gd = g.data();
                let gc = |i: usize| MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                let ga = need[0].then(|| {
                    let mut ga = vec![T::zero(); batch * ar * ac];
                    for i in 0..batch {
                        let b_op = mat(&bv.data()[i * br * bc..(i + 1) * br * bc], br, bc, transpose_b);
                        let dst = &mut ga[i * ar * ac..(i + 1) * ar * ac];
                        if transpose_a {
                            // A is stored k×m, so dA = (gC·opBᵀ)ᵀ = opB·gCᵀ.
                            gemm(b_op, gc(i).t(), dst, false);
                        } else {
                            gemm(gc(i), b_op.t(), dst, false);
                        }
                    }
                    Tensor::from_vec(av.shape(), ga).expect("grad shape")
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![T::zero(); batch * br * bc];
                    for i in 0..batch {
                        let a_op = mat(&av.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac, transpose_a);
                        let dst = &mut gb[i * br * bc..(i + 1) * br * bc];
                        if transpose_b {
                            gemm(gc(i).t(), a_op, dst, false);
                        } else {
                            gemm(a_op.t(), gc(i), dst, false);
                        }
                    }
                    Tensor::from_vec(bv.shape(), gb).expect("grad shape")
                });
                vec![ga, gb]
            }),
        ))
    }
}
