use std::sync::Arc;

use crate::element::Element;
use crate::error::{config_err, Result};
use crate::graph::Var;
use crate::tensor::{strides_of, Tensor};

/// Index value in a gather map that produces a zero.
pub const GATHER_ZERO: usize = usize::MAX;

impl<'g, T: Element> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let value = Tensor::from_vec(shape, xv.data().to_vec())?;
        let in_shape = xv.shape().to_vec();
        Ok(self.graph.push(
            value,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_vec(&in_shape, g.data().to_vec()).expect("grad shape"))]),
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    /// The backward pass scatter-adds, so repeated indices are allowed.
    pub fn gather(self, out_shape: &[usize], index: Arc<Vec<usize>>) -> Result<Var<'g, T>> {
        let xv = self.value();
        let numel: usize = out_shape.iter().product();
        if index.len() != numel {
            return Err(config_err(format!("gather map has {} entries for shape {out_shape:?}", index.len())));
        }
        if let Some(bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= xv.numel()) {
            return Err(config_err(format!("gather index {bad} out of range for {} elements", xv.numel())));
        }
        let x = xv.data();
        let out = index.iter().map(|&i| if i == GATHER_ZERO { T::zero() } else { x[i] }).collect();
        let value = Tensor::from_vec(out_shape, out)?;
        let in_shape = xv.shape().to_vec();
        let in_numel = xv.numel();
        Ok(self.graph.push(
            value,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); in_numel];
                for (&i, &gi) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        gx[i] += gi;
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx).expect("grad shape"))]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let (out_shape, index) = permute_index(&shape, axes)?;
        self.gather(&out_shape, Arc::new(index))
    }

    /// Toroidal roll of the two trailing (spatial) axes:
    /// `out[.., y, x] = in[.., (y − dy) mod H, (x − dx) mod W]`.
    pub fn roll2d(self, dy: isize, dx: isize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(config_err(format!("roll2d needs rank ≥ 2, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let mut index = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                    index.push(p * h * w + sy * w + sx);
                }
            }
        }
        self.gather(&shape, Arc::new(index))
    }

    /// Zero padding of the two trailing axes by (top, bottom, left, right).
    pub fn pad2d(self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(config_err(format!("pad2d needs rank ≥ 2, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ho, wo) = (h + top + bottom, w + left + right);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let mut index = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for y in 0..ho {
                for x in 0..wo {
                    let inside = y >= top && y < top + h && x >= left && x < left + w;
                    index.push(if inside { p * h * w + (y - top) * w + (x - left) } else { GATHER_ZERO });
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.gather(&out_shape, Arc::new(index))
    }

    /// Crops the two trailing axes to `h × w` starting at `(top, left)`.
    pub fn crop2d(self, top: usize, left: usize, h: usize, w: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(config_err(format!("crop2d needs rank ≥ 2, got {shape:?}")));
        }
        let (hi, wi) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if top + h > hi || left + w > wi {
            return Err(config_err(format!("crop {h}x{w} at ({top},{left}) exceeds {hi}x{wi}")));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let mut index = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    index.push(p * hi * wi + (y + top) * wi + x + left);
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = h;
        out_shape[r - 1] = w;
        self.gather(&out_shape, Arc::new(index))
    }

    /// Slice `i` of the leading axis, dropping that axis.
    pub fn select_leading(self, i: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.is_empty() || i >= shape[0] {
            return Err(config_err(format!("select_leading({i}) on shape {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let index: Vec<usize> = (i * inner..(i + 1) * inner).collect();
        self.gather(&shape[1..], Arc::new(index))
    }
}

/// Output shape and gather map of an axis permutation.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(config_err(format!("invalid permutation {axes:?} for rank {rank}")));
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    if numel == 0 {
        return Ok((out_shape, index));
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        index.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Ok((out_shape, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn permute_transposes() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap());
        let y = x.permute(&[1, 0]).unwrap().value();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0., 3., 1., 4., 2., 5.]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let g = Graph::<f32>::new();
        let t = Tensor::from_vec(&[1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let x = g.constant(t.clone());
        let y = x.pad2d(1, 2, 0, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 5, 4]);
        assert_eq!(*y.crop2d(1, 0, 2, 3).unwrap().value(), t);
    }

    #[test]
    fn select_leading_slices() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap());
        assert_eq!(x.select_leading(1).unwrap().value().data(), &[2., 3.]);
    }
}
