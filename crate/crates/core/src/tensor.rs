//! Dense row-major f64 tensors. Feature maps use NCHW layout.

use ndarray::Array2;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                format!("{numel} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(batch, channels, height, width)` of a 4D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err("4D tensor (N, C, H, W)", &self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(&self.shape, &other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contiguous data of batch item `n` in a 4D tensor.
    pub fn item(&self, n: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    /// Stacks 2D images into an `N x 1 x H x W` batch.
    pub fn from_images(images: &[&Array2<f64>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w) = first.dim();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.dim() != (h, w) {
                return Err(shape_err((h, w), img.dim()));
            }
            data.extend(img.iter().copied());
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    /// Copies channel `c` of batch item `n` out as an `H x W` array.
    pub fn channel_plane(&self, n: usize, c: usize) -> Result<Array2<f64>> {
        let (_, ch, h, w) = self.dims4()?;
        let start = (n * ch + c) * h * w;
        Ok(Array2::from_shape_vec((h, w), self.data[start..start + h * w].to_vec())
            .expect("plane length matches"))
    }
}

/// Source taps for half-pixel bilinear resampling along one axis:
/// `(lower index, upper index, weight of upper)` per output position.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a single `h x w` plane into `out` (`oh x ow`).
pub(crate) fn resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    out: &mut [f64],
    ys: &[(usize, usize, f64)],
    xs: &[(usize, usize, f64)],
) {
    let ow = xs.len();
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        let row = &mut out[oy * ow..(oy + 1) * ow];
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
            let bottom = r1[x0] * (1.0 - lx) + r1[x1] * lx;
            row[ox] = top * (1.0 - ly) + bottom * ly;
        }
    }
    debug_assert_eq!(src.len(), h * w);
}

/// Adjoint of [`resize_plane`]: scatters `grad_out` back onto the source grid.
pub(crate) fn resize_plane_backward(
    grad_out: &[f64],
    w: usize,
    grad_src: &mut [f64],
    ys: &[(usize, usize, f64)],
    xs: &[(usize, usize, f64)],
) {
    let ow = xs.len();
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            grad_src[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
            grad_src[y0 * w + x1] += g * (1.0 - ly) * lx;
            grad_src[y1 * w + x0] += g * ly * (1.0 - lx);
            grad_src[y1 * w + x1] += g * ly * lx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let taps = bilinear_taps(5, 5);
        for (i, &(a, _, l)) in taps.iter().enumerate() {
            assert_eq!(a, i);
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        let taps = bilinear_taps(4, 2);
        assert_eq!(taps, vec![(0, 1, 0.5), (2, 3, 0.5)]);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        // <R x, y> == <x, R^T y>
        let (h, w, oh, ow) = (3, 4, 7, 5);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let ys = bilinear_taps(h, oh);
        let xs = bilinear_taps(w, ow);
        let mut rx = vec![0.0; oh * ow];
        resize_plane(&x, h, w, &mut rx, &ys, &xs);
        let mut rty = vec![0.0; h * w];
        resize_plane_backward(&y, w, &mut rty, &ys, &xs);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
