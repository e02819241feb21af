//! Regular-grid scalar and vector fields.
//!
//! Data is stored row-major with the last axis varying fastest. All
//! coordinates are in voxel units. Sampling clamps to the grid edge;
//! Gaussian smoothing zero-pads.

use crate::error::{Error, Result};

/// Extents of a 2D or 3D voxel grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    dims: Vec<usize>,
}

impl GridShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::InvalidShape(format!(
                "dimensionality must be 2 or 3, got {}",
                dims.len()
            )));
        }
        if let Some(axis) = dims.iter().position(|&n| n < 2) {
            return Err(Error::InvalidShape(format!(
                "extent on axis {axis} is {} (must be >= 2)",
                dims[axis]
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.dims)
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for a in (0..self.dims.len()).rev() {
            idx[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// True when the voxel lies on any face of the grid.
    pub fn on_boundary(&self, idx: &[usize]) -> bool {
        idx.iter()
            .zip(&self.dims)
            .any(|(&i, &n)| i == 0 || i + 1 == n)
    }

    /// True when every coordinate is at least `margin` voxels from every face.
    pub fn is_interior(&self, idx: &[usize], margin: usize) -> bool {
        idx.iter()
            .zip(&self.dims)
            .all(|(&i, &n)| i >= margin && i + margin < n)
    }

    pub fn scaled(&self, num: usize, den: usize) -> Result<Self> {
        let dims: Vec<usize> = self.dims.iter().map(|&n| n * num / den).collect();
        GridShape::new(&dims)
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Real-valued field on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    shape: GridShape,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match grid of {} voxels",
                data.len(),
                shape.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar field data".into()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: GridShape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn filled(shape: &GridShape, value: f64) -> Self {
        Self {
            data: vec![value; shape.len()],
            shape: shape.clone(),
        }
    }

    pub fn zeros(shape: &GridShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: &GridShape, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let data = (0..shape.len()).map(|i| f(&shape.unravel(i))).collect();
        Self {
            shape: shape.clone(),
            data,
        }
    }

    pub fn shape(&self) -> &GridShape {
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

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.shape.ravel(idx)]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a*self + b*other`.
    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::mismatch(self.shape.dims(), other.shape.dims()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Self::from_raw(self.shape.clone(), data))
    }

    /// Multilinear interpolation at a continuous voxel coordinate, clamped
    /// to the grid edge.
    pub fn sample_linear(&self, p: &[f64]) -> Result<f64> {
        if p.len() != self.shape.ndim() {
            return Err(Error::mismatch(&[p.len()], &[self.shape.ndim()]));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCoordinate);
        }
        Ok(sample_raw(&self.data, self.shape.dims(), p))
    }

    /// Separable Gaussian convolution with zero padding. The kernel is
    /// truncated at `ceil(3 sigma)` and normalized to unit mass per axis.
    pub fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidSigma);
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let dims = self.shape.dims().to_vec();
        let mut data = self.data.clone();
        for axis in 0..dims.len() {
            data = map_lines(&data, &dims, axis, dims[axis], |src, dst| {
                let n = src.len() as isize;
                for (o, out) in dst.iter_mut().enumerate() {
                    let o = o as isize;
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let i = o + k as isize - radius;
                        if i >= 0 && i < n {
                            acc += w * src[i as usize];
                        }
                    }
                    *out = acc;
                }
            });
        }
        Ok(Self::from_raw(self.shape.clone(), data))
    }

    /// Mean over non-overlapping 2^d blocks.
    pub fn downsample2(&self) -> Result<Self> {
        let dims = self.shape.dims();
        if let Some(axis) = dims.iter().position(|n| n % 2 != 0) {
            return Err(Error::OddExtent {
                axis,
                extent: dims[axis],
            });
        }
        let shape = GridShape::new(&dims.iter().map(|n| n / 2).collect::<Vec<_>>())?;
        let data = downsample2_raw(&self.data, dims);
        Ok(Self::from_raw(shape, data))
    }

    /// Multilinear upsampling to doubled extents, corners aligned.
    pub fn upsample2(&self) -> Self {
        let dims = self.shape.dims();
        let shape = GridShape {
            dims: dims.iter().map(|n| n * 2).collect(),
        };
        Self::from_raw(shape, upsample2_raw(&self.data, dims))
    }

    /// Per-axis derivative by central differences in the interior and
    /// one-sided differences on the faces.
    pub fn partial(&self, axis: usize) -> Self {
        Self::from_raw(
            self.shape.clone(),
            central_diff_raw(&self.data, self.shape.dims(), axis),
        )
    }
}

/// Field of d-vectors on a d-dimensional grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    shape: GridShape,
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self> {
        let shape = components
            .first()
            .ok_or_else(|| Error::InvalidShape("vector field without components".into()))?
            .shape()
            .clone();
        if components.len() != shape.ndim() {
            return Err(Error::InvalidShape(format!(
                "{} components on a {}-dimensional grid",
                components.len(),
                shape.ndim()
            )));
        }
        for c in &components {
            if c.shape() != &shape {
                return Err(Error::mismatch(c.shape().dims(), shape.dims()));
            }
        }
        Ok(Self { shape, components })
    }

    pub fn zeros(shape: &GridShape) -> Self {
        Self {
            shape: shape.clone(),
            components: (0..shape.ndim())
                .map(|_| ScalarField::zeros(shape))
                .collect(),
        }
    }

    /// Builds a field from a closure returning the vector at each voxel.
    pub fn from_fn(shape: &GridShape, mut f: impl FnMut(&[usize]) -> Vec<f64>) -> Self {
        let d = shape.ndim();
        let mut comps = vec![Vec::with_capacity(shape.len()); d];
        for i in 0..shape.len() {
            let v = f(&shape.unravel(i));
            for a in 0..d {
                comps[a].push(v[a]);
            }
        }
        Self {
            shape: shape.clone(),
            components: comps
                .into_iter()
                .map(|c| ScalarField::from_raw(shape.clone(), c))
                .collect(),
        }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn component(&self, axis: usize) -> &ScalarField {
        &self.components[axis]
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [ScalarField] {
        &mut self.components
    }

    pub fn into_components(self) -> Vec<ScalarField> {
        self.components
    }

    /// Vector at a voxel.
    pub fn at(&self, flat: usize) -> Vec<f64> {
        self.components.iter().map(|c| c.data[flat]).collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            components: self.components.iter().map(|c| c.map(|v| v * s)).collect(),
        }
    }

    pub fn axpby(&self, a: f64, other: &VectorField, b: f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::mismatch(self.shape.dims(), other.shape.dims()));
        }
        let components = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(x, y)| x.axpby(a, y, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape: self.shape.clone(),
            components,
        })
    }

    /// Largest Euclidean vector norm over the grid.
    pub fn max_norm(&self) -> f64 {
        (0..self.shape.len())
            .map(|i| self.at(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Mean Euclidean vector norm over the grid.
    pub fn mean_norm(&self) -> f64 {
        (0..self.shape.len())
            .map(|i| self.at(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / self.shape.len() as f64
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Applies a 1D transform to every line of `src` along `axis`. `n_out` is
/// the output extent along that axis.
pub(crate) fn map_lines(
    src: &[f64],
    dims: &[usize],
    axis: usize,
    n_out: usize,
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> Vec<f64> {
    let n_in = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut dst = vec![0.0; outer * n_out * inner];
    let mut line_in = vec![0.0; n_in];
    let mut line_out = vec![0.0; n_out];
    for o in 0..outer {
        for i in 0..inner {
            let base_in = o * n_in * inner + i;
            for (k, v) in line_in.iter_mut().enumerate() {
                *v = src[base_in + k * inner];
            }
            f(&line_in, &mut line_out);
            let base_out = o * n_out * inner + i;
            for (k, v) in line_out.iter().enumerate() {
                dst[base_out + k * inner] = *v;
            }
        }
    }
    dst
}

/// Linear interpolation weights for align-corners resampling from `n_in`
/// to `n_out` samples: `(lower index, upper weight)`.
fn resample_weights(n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
    (0..n_out)
        .map(|o| {
            let p = if n_out > 1 {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let i0 = (p.floor() as usize).min(n_in.saturating_sub(2));
            (i0, p - i0 as f64)
        })
        .collect()
}

/// Upsamples every spatial axis (axes `skip..`) by two. Leading `skip`
/// axes (channels) are left alone.
pub(crate) fn upsample2_axes(src: &[f64], dims: &[usize], skip: usize) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut cur_dims = dims.to_vec();
    for axis in skip..dims.len() {
        let n_in = cur_dims[axis];
        let wts = resample_weights(n_in, 2 * n_in);
        cur = map_lines(&cur, &cur_dims, axis, 2 * n_in, |s, d| {
            for (o, &(i0, t)) in wts.iter().enumerate() {
                d[o] = (1.0 - t) * s[i0] + t * s[i0 + 1];
            }
        });
        cur_dims[axis] = 2 * n_in;
    }
    cur
}

/// Adjoint of [`upsample2_axes`]; `dims` are the coarse extents.
pub(crate) fn upsample2_axes_t(grad: &[f64], dims: &[usize], skip: usize) -> Vec<f64> {
    let mut cur_dims: Vec<usize> = dims
        .iter()
        .enumerate()
        .map(|(a, &n)| if a >= skip { 2 * n } else { n })
        .collect();
    let mut cur = grad.to_vec();
    for axis in (skip..dims.len()).rev() {
        let n_in = dims[axis];
        let wts = resample_weights(n_in, 2 * n_in);
        cur = map_lines(&cur, &cur_dims, axis, n_in, |g, d| {
            d.iter_mut().for_each(|v| *v = 0.0);
            for (o, &(i0, t)) in wts.iter().enumerate() {
                d[i0] += (1.0 - t) * g[o];
                d[i0 + 1] += t * g[o];
            }
        });
        cur_dims[axis] = n_in;
    }
    cur
}

pub(crate) fn upsample2_raw(src: &[f64], dims: &[usize]) -> Vec<f64> {
    upsample2_axes(src, dims, 0)
}

pub(crate) fn downsample2_raw(src: &[f64], dims: &[usize]) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        let n = cur_dims[axis];
        cur = map_lines(&cur, &cur_dims, axis, n / 2, |s, d| {
            for (o, v) in d.iter_mut().enumerate() {
                *v = 0.5 * (s[2 * o] + s[2 * o + 1]);
            }
        });
        cur_dims[axis] = n / 2;
    }
    cur
}

pub(crate) fn central_diff_raw(src: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    map_lines(src, dims, axis, dims[axis], |s, d| {
        let n = s.len();
        d[0] = s[1] - s[0];
        d[n - 1] = s[n - 1] - s[n - 2];
        for i in 1..n - 1 {
            d[i] = 0.5 * (s[i + 1] - s[i - 1]);
        }
    })
}

/// Adjoint of [`central_diff_raw`].
pub(crate) fn central_diff_raw_t(grad: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    map_lines(grad, dims, axis, dims[axis], |g, d| {
        let n = g.len();
        d.iter_mut().for_each(|v| *v = 0.0);
        d[0] -= g[0];
        d[1] += g[0];
        d[n - 1] += g[n - 1];
        d[n - 2] -= g[n - 1];
        for i in 1..n - 1 {
            d[i + 1] += 0.5 * g[i];
            d[i - 1] -= 0.5 * g[i];
        }
    })
}

/// Forward differences `s[i+1] - s[i]`; output extent along `axis` is n-1.
pub(crate) fn forward_diff_raw(src: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    map_lines(src, dims, axis, dims[axis] - 1, |s, d| {
        for (i, v) in d.iter_mut().enumerate() {
            *v = s[i + 1] - s[i];
        }
    })
}

/// Adjoint of [`forward_diff_raw`]; `dims` are the input extents.
pub(crate) fn forward_diff_raw_t(grad: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let mut gdims = dims.to_vec();
    gdims[axis] -= 1;
    map_lines(grad, &gdims, axis, dims[axis], |g, d| {
        d.iter_mut().for_each(|v| *v = 0.0);
        for (i, gv) in g.iter().enumerate() {
            d[i + 1] += gv;
            d[i] -= gv;
        }
    })
}

/// Window sum of odd width `window` along every spatial axis (axes
/// `skip..`), zero-padded. Symmetric, hence self-adjoint.
pub(crate) fn box_sum_raw(src: &[f64], dims: &[usize], skip: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let mut cur = src.to_vec();
    for axis in skip..dims.len() {
        let n = dims[axis];
        cur = map_lines(&cur, dims, axis, n, |s, d| {
            let mut prefix = vec![0.0; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] + s[i];
            }
            for (o, v) in d.iter_mut().enumerate() {
                let lo = o.saturating_sub(r);
                let hi = (o + r + 1).min(n);
                *v = prefix[hi] - prefix[lo];
            }
        });
    }
    cur
}

/// Interpolation stencil at a continuous coordinate: up to 2^d corner
/// offsets, their weights, and the derivative of each weight with respect
/// to every coordinate (zero along clamped axes).
pub(crate) struct Stencil {
    pub len: usize,
    pub index: [usize; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 3]; 8],
}

impl Stencil {
    pub fn new() -> Self {
        Self {
            len: 0,
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
        }
    }

    pub fn fill(&mut self, dims: &[usize], strides: &[usize], p: &[f64]) {
        let d = dims.len();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut live = [true; 3];
        for a in 0..d {
            let hi = (dims[a] - 1) as f64;
            let mut q = p[a];
            if q <= 0.0 {
                live[a] = q == 0.0;
                q = 0.0;
            } else if q >= hi {
                live[a] = q == hi;
                q = hi;
            }
            let i0 = (q.floor() as usize).min(dims[a] - 2);
            base[a] = i0;
            frac[a] = q - i0 as f64;
        }
        self.len = 1 << d;
        for corner in 0..self.len {
            let mut idx = 0;
            let mut w = 1.0;
            let mut factors = [0.0f64; 3];
            let mut signs = [0.0f64; 3];
            for a in 0..d {
                let bit = (corner >> (d - 1 - a)) & 1;
                idx += (base[a] + bit) * strides[a];
                let (f, s) = if bit == 1 {
                    (frac[a], 1.0)
                } else {
                    (1.0 - frac[a], -1.0)
                };
                factors[a] = f;
                signs[a] = if live[a] { s } else { 0.0 };
                w *= f;
            }
            self.index[corner] = idx;
            self.weight[corner] = w;
            for a in 0..d {
                let mut dw = signs[a];
                for b in 0..d {
                    if b != a {
                        dw *= factors[b];
                    }
                }
                self.dweight[corner][a] = dw;
            }
        }
    }
}

pub(crate) fn sample_raw(data: &[f64], dims: &[usize], p: &[f64]) -> f64 {
    let st = strides(dims);
    let mut s = Stencil::new();
    s.fill(dims, &st, p);
    (0..s.len).map(|c| s.weight[c] * data[s.index[c]]).sum()
}
