use std::sync::Arc;

use crate::element::Element;
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(config_err(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed in the index space of `out_shape`; broadcast
/// axes get stride 0.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = crate::tensor::strides_of(shape);
    (0..rank)
        .map(|i| {
            if i + shape.len() < rank {
                0
            } else {
                let j = i + shape.len() - rank;
                if shape[j] == 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ja, jb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    for o in 0..outer {
        let base_out = o * inner;
        for j in 0..inner {
            f(base_out + j, base_a + j * ja, base_b + j * jb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * out_shape[d];
            base_b -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn binary<'g, T: Element>(a: Var<'g, T>, b: Var<'g, T>, kind: BinaryKind) -> Result<Var<'g, T>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    let sa = aligned_strides(av.shape(), &out_shape);
    let sb = aligned_strides(bv.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    {
        let (x, y) = (av.data(), bv.data());
        if av.shape() == bv.shape() {
            for ((o, &p), &q) in out.iter_mut().zip(x).zip(y) {
                *o = match kind {
                    BinaryKind::Add => p + q,
                    BinaryKind::Sub => p - q,
                    BinaryKind::Mul => p * q,
                };
            }
        } else {
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
                out[i] = match kind {
                    BinaryKind::Add => x[ia] + y[ib],
                    BinaryKind::Sub => x[ia] - y[ib],
                    BinaryKind::Mul => x[ia] * y[ib],
                };
            });
        }
    }
    let value = Tensor::from_vec(&out_shape, out)?;
    let graph = a.graph;
    Ok(graph.push(
        value,
        &[a, b],
        Box::new(move |g, need| {
            let gd = g.data();
            let mut ga = need[0].then(|| vec![T::zero(); av.numel()]);
            let mut gb = need[1].then(|| vec![T::zero(); bv.numel()]);
            let (x, y) = (av.data(), bv.data());
            for_each_broadcast(g.shape(), &sa, &sb, |i, ia, ib| {
                let gi = gd[i];
                let (da, db) = match kind {
                    BinaryKind::Add => (gi, gi),
                    BinaryKind::Sub => (gi, -gi),
                    BinaryKind::Mul => (gi * y[ib], gi * x[ia]),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            vec![
                ga.map(|d| Tensor::from_vec(av.shape(), d).expect("grad shape")),
                gb.map(|d| Tensor::from_vec(bv.shape(), d).expect("grad shape")),
            ]
        }),
    ))
}

/// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
fn unary<'g, T: Element>(
    x: Var<'g, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'g, T> {
    let xv = x.value();
    let yv = Arc::new(xv.map(f));
    let y_saved = Arc::clone(&yv);
    x.graph.push(
        yv,
        &[x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(y_saved.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), data).expect("grad shape"))]
        }),
    )
}

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Broadcasting addition.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinaryKind::Add)
    }

    /// Broadcasting subtraction.
    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinaryKind::Sub)
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        binary(self, other, BinaryKind::Mul)
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    /// |x|, with subgradient 0 at the kink.
    pub fn abs(self) -> Var<'g, T> {
        unary(
            self,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        unary(self, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// x·sigmoid(x).
    pub fn silu(self) -> Var<'g, T> {
        unary(
            self,
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn gelu_tanh(self) -> Var<'g, T> {
        // 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        unary(
            self,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::of(3.0) * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph.push(
            Tensor::scalar(xv.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(self) -> Var<'g, T> {
        let xv = self.value();
        let n = T::of(xv.numel() as f64);
        let shape = xv.shape().to_vec();
        self.graph.push(
            Tensor::scalar(xv.sum() / n),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'g, T> {
        let xv = self.value();
        let cols = *xv.shape().last().unwrap_or(&1);
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(cols.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let yv = Arc::new(Tensor::from_vec(xv.shape(), y).expect("softmax shape"));
        let y_saved = Arc::clone(&yv);
        self.graph.push(
            yv,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); g.numel()];
                for ((gxr, gr), yr) in gx
                    .chunks_mut(cols.max(1))
                    .zip(g.data().chunks(cols.max(1)))
                    .zip(y_saved.data().chunks(cols.max(1)))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(Tensor::from_vec(g.shape(), gx).expect("grad shape"))]
            }),
        )
    }
}
