use rand::Rng;

use crate::element::Element;
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Element> Var<'g, T> {
    /// Inverted dropout: in training, zero each element with probability `p`
    /// and scale survivors by `1/(1−p)`. Eval mode (or `p == 0`) returns the
    /// input node itself.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, training: bool, rng: &mut R) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err(format!("dropout probability {p} must lie in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let xv = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.graph.push(
            value,
            &[self],
            Box::new(move |g, _| {
                let data = g.data().iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
                vec![Some(Tensor::from_vec(g.shape(), data).expect("grad shape"))]
            }),
        ))
    }
}
