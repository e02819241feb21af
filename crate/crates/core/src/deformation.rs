//! Displacement-backed transformations `phi(x) = x + d(x)`.

use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, Stencil, VectorField};

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    displacement: VectorField,
}

/// Jacobian determinant field of a deformation with fold statistics.
#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub det_field: ScalarField,
    /// Fraction of voxels with `det <= 0`.
    pub fold_fraction: f64,
    pub min_det: f64,
}

impl DeformationField {
    pub fn identity(shape: &GridShape) -> Self {
        Self {
            displacement: VectorField::zeros(shape),
        }
    }

    pub fn from_displacement(displacement: VectorField) -> Self {
        Self { displacement }
    }

    pub fn shape(&self) -> &GridShape {
        self.displacement.shape()
    }

    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField {
        self.displacement
    }

    /// Mapped position `x + d(x)` of voxel `flat`.
    pub fn map_voxel(&self, flat: usize) -> Vec<f64> {
        let idx = self.shape().unravel(flat);
        idx.iter()
            .zip(self.displacement.at(flat))
            .map(|(&i, d)| i as f64 + d)
            .collect()
    }

    /// `img(x + d(x))` with linear interpolation and clamp-to-edge.
    pub fn warp(&self, img: &ScalarField) -> Result<ScalarField> {
        if img.shape() != self.shape() {
            return Err(Error::mismatch(img.shape().dims(), self.shape().dims()));
        }
        let mut out = warp_many(&[img.data()], self);
        Ok(ScalarField::from_raw(img.shape().clone(), out.remove(0)))
    }

    /// Nearest-neighbour warp for label maps.
    pub fn warp_labels(&self, labels: &LabelField) -> Result<LabelField> {
        let shape = self.shape();
        if labels.shape() != shape {
            return Err(Error::mismatch(labels.shape().dims(), shape.dims()));
        }
        let dims = shape.dims();
        let st = shape.strides();
        let data = (0..shape.len())
            .map(|i| {
                let p = self.map_voxel(i);
                let flat: usize = p
                    .iter()
                    .zip(dims)
                    .zip(&st)
                    .map(|((&q, &n), &s)| (q.round().clamp(0.0, (n - 1) as f64) as usize) * s)
                    .sum();
                labels.data()[flat]
            })
            .collect();
        LabelField::new(shape.clone(), data)
    }

    /// `outer(inner(x))`.
    pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<Self> {
        if outer.shape() != inner.shape() {
            return Err(Error::mismatch(outer.shape().dims(), inner.shape().dims()));
        }
        let outer_comps: Vec<&[f64]> = outer
            .displacement
            .components()
            .iter()
            .map(|c| c.data())
            .collect();
        let sampled = warp_many(&outer_comps, inner);
        let comps = sampled
            .into_iter()
            .zip(inner.displacement.components())
            .map(|(s, d)| {
                let data = s.iter().zip(d.data()).map(|(a, b)| a + b).collect();
                ScalarField::from_raw(inner.shape().clone(), data)
            })
            .collect();
        Ok(Self {
            displacement: VectorField::new(comps)?,
        })
    }

    /// Jacobian determinant of `phi` by central differences (one-sided on
    /// the faces).
    pub fn jacobian(&self) -> JacobianReport {
        let shape = self.shape().clone();
        let d = shape.ndim();
        // grads[i][j] = d(disp_i)/d(x_j)
        let grads: Vec<Vec<ScalarField>> = self
            .displacement
            .components()
            .iter()
            .map(|c| (0..d).map(|j| c.partial(j)).collect())
            .collect();
        let mut det = Vec::with_capacity(shape.len());
        let mut m = [[0.0f64; 3]; 3];
        for v in 0..shape.len() {
            for i in 0..d {
                for j in 0..d {
                    m[i][j] = grads[i][j].data()[v] + if i == j { 1.0 } else { 0.0 };
                }
            }
            det.push(determinant(&m, d));
        }
        let folds = det.iter().filter(|&&v| v <= 0.0).count();
        let min_det = det.iter().copied().fold(f64::INFINITY, f64::min);
        JacobianReport {
            fold_fraction: folds as f64 / det.len() as f64,
            min_det,
            det_field: ScalarField::from_raw(shape, det),
        }
    }

    /// Transfers the field to a grid of doubled extents, rescaling the
    /// displacement to the finer voxel unit.
    pub fn upsample(&self) -> Self {
        let comps = self
            .displacement
            .components()
            .iter()
            .map(|c| c.upsample2().map(|v| 2.0 * v))
            .collect();
        Self {
            displacement: VectorField::new(comps).expect("upsampled components share shape"),
        }
    }

    /// Mean and maximum of `|d(x)|` for the composition `self(other(x))`.
    pub fn inverse_consistency(&self, other: &DeformationField) -> Result<(f64, f64)> {
        let c = DeformationField::compose(self, other)?;
        Ok((c.displacement.mean_norm(), c.displacement.max_norm()))
    }
}

pub(crate) fn determinant(m: &[[f64; 3]; 3], d: usize) -> f64 {
    if d == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Samples every channel at `x + d(x)`.
pub(crate) fn warp_many(channels: &[&[f64]], phi: &DeformationField) -> Vec<Vec<f64>> {
    let shape = phi.shape();
    let dims = shape.dims();
    let st = shape.strides();
    let d = dims.len();
    let disp: Vec<&[f64]> = phi
        .displacement
        .components()
        .iter()
        .map(|c| c.data())
        .collect();
    let mut out = vec![vec![0.0; shape.len()]; channels.len()];
    let mut stencil = Stencil::new();
    let mut p = [0.0f64; 3];
    let mut idx = vec![0usize; d];
    for v in 0..shape.len() {
        for a in 0..d {
            p[a] = idx[a] as f64 + disp[a][v];
        }
        stencil.fill(dims, &st, &p[..d]);
        for (c, ch) in channels.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..stencil.len {
                acc += stencil.weight[k] * ch[stencil.index[k]];
            }
            out[c][v] = acc;
        }
        // advance the multi-index
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Integer label map (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    shape: GridShape,
    data: Vec<u32>,
}

impl LabelField {
    pub fn new(shape: GridShape, data: Vec<u32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "label data length {} does not match grid of {} voxels",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Sorted distinct non-zero labels.
    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(d: &[usize]) -> GridShape {
        GridShape::new(d).unwrap()
    }

    /// Smooth random displacement of roughly the given amplitude.
    fn smooth_field(s: &GridShape, amp: f64, seed: u64) -> DeformationField {
        smooth_field_sigma(s, amp, 2.0, seed)
    }

    fn smooth_field_sigma(s: &GridShape, amp: f64, sigma: f64, seed: u64) -> DeformationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comps = (0..s.ndim())
            .map(|_| {
                let noise = ScalarField::from_fn(s, |_| rng.gen_range(-1.0..1.0));
                let sm = noise.gaussian_smooth(sigma).unwrap();
                let m = sm.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                sm.map(|v| amp * v / m)
            })
            .collect();
        DeformationField::from_displacement(VectorField::new(comps).unwrap())
    }

    /// Affine displacement plus a weak long-wavelength ripple, with
    /// |d| <= 2 over the grid.
    fn low_curvature_field(s: &GridShape, seed: u64) -> DeformationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = s.dims()[0] as f64;
        let m: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.03..0.03)).collect();
        let t: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let ph: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..6.28)).collect();
        DeformationField::from_displacement(VectorField::from_fn(s, |i| {
            let x = i[0] as f64 - n / 2.0;
            let y = i[1] as f64 - n / 2.0;
            let w = std::f64::consts::TAU / (2.0 * n);
            vec![
                t[0] + m[0] * x + m[1] * y + 0.02 * (w * (x + y) + ph[0]).sin(),
                t[1] + m[2] * x + m[3] * y + 0.02 * (w * (x - y) + ph[1]).sin(),
            ]
        }))
    }

    fn bilinear_oracle(img: &ScalarField, x: f64, y: f64) -> f64 {
        let n = img.shape().dims();
        let x = x.clamp(0.0, (n[0] - 1) as f64);
        let y = y.clamp(0.0, (n[1] - 1) as f64);
        let i = (x.floor() as usize).min(n[0] - 2);
        let j = (y.floor() as usize).min(n[1] - 2);
        let (tx, ty) = (x - i as f64, y - j as f64);
        (1.0 - tx) * (1.0 - ty) * img.get(&[i, j])
            + (1.0 - tx) * ty * img.get(&[i, j + 1])
            + tx * (1.0 - ty) * img.get(&[i + 1, j])
            + tx * ty * img.get(&[i + 1, j + 1])
    }

    #[test]
    fn identity_is_neutral() {
        let s = shape(&[4, 4]);
        let id = DeformationField::identity(&s);
        assert!(id
            .displacement()
            .components()
            .iter()
            .all(|c| c.data().iter().all(|&v| v == 0.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ScalarField::from_fn(&s, |_| rng.gen());
        assert_eq!(id.warp(&img).unwrap(), img);
        let j = id.jacobian();
        assert!(j.det_field.data().iter().all(|&v| v == 1.0));
        assert_eq!(j.fold_fraction, 0.0);
    }

    #[test]
    fn translation_of_ramp() {
        let s = shape(&[8, 5]);
        let ramp = ScalarField::from_fn(&s, |i| i[0] as f64);
        let t = DeformationField::from_displacement(VectorField::from_fn(&s, |_| vec![1.0, 0.0]));
        let w = t.warp(&ramp).unwrap();
        for i in 0..8 {
            for j in 0..5 {
                let expect = ((i + 1).min(7)) as f64;
                assert_eq!(w.get(&[i, j]), expect);
            }
        }
    }

    #[test]
    fn warp_matches_pointwise_oracle() {
        let s = shape(&[6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ScalarField::from_fn(&s, |_| rng.gen());
        let phi = smooth_field(&s, 1.5, 4);
        let w = phi.warp(&img).unwrap();
        for v in 0..s.len() {
            let p = phi.map_voxel(v);
            assert!((w.data()[v] - bilinear_oracle(&img, p[0], p[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_shape_mismatch() {
        let phi = DeformationField::identity(&shape(&[4, 4]));
        let img = ScalarField::zeros(&shape(&[4, 5]));
        assert!(matches!(phi.warp(&img), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn compose_with_identity() {
        let s = shape(&[7, 6]);
        let phi = smooth_field(&s, 1.0, 8);
        let id = DeformationField::identity(&s);
        let a = DeformationField::compose(&id, &phi).unwrap();
        let b = DeformationField::compose(&phi, &id).unwrap();
        for (x, y) in a
            .displacement()
            .components()
            .iter()
            .zip(phi.displacement().components())
        {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in b
            .displacement()
            .components()
            .iter()
            .zip(phi.displacement().components())
        {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn compose_translations_add() {
        let s = shape(&[12, 12]);
        let a = DeformationField::from_displacement(VectorField::from_fn(&s, |_| vec![1.5, -0.5]));
        let b = DeformationField::from_displacement(VectorField::from_fn(&s, |_| vec![-0.25, 1.0]));
        let c = DeformationField::compose(&a, &b).unwrap();
        for v in 0..s.len() {
            if s.is_interior(&s.unravel(v), 3) {
                let d = c.displacement().at(v);
                assert!((d[0] - 1.25).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        let s = shape(&[10, 9]);
        let outer = smooth_field(&s, 1.2, 21);
        let inner = smooth_field(&s, 1.7, 22);
        let c = DeformationField::compose(&outer, &inner).unwrap();
        for v in 0..s.len() {
            let p = inner.map_voxel(v);
            let di = inner.displacement().at(v);
            for a in 0..2 {
                let expect = di[a] + bilinear_oracle(outer.displacement().component(a), p[0], p[1]);
                assert!((c.displacement().component(a).data()[v] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_affine_and_reflection() {
        let s = shape(&[6, 7, 5]);
        let doubling = DeformationField::from_displacement(VectorField::from_fn(&s, |i| {
            i.iter().map(|&v| v as f64).collect()
        }));
        let j = doubling.jacobian();
        for v in 0..s.len() {
            assert!((j.det_field.data()[v] - 8.0).abs() < 1e-12);
        }

        let s2 = shape(&[8, 8]);
        let reflect = DeformationField::from_displacement(VectorField::from_fn(&s2, |i| {
            vec![(7.0 - i[0] as f64) - i[0] as f64, 0.0]
        }));
        let j = reflect.jacobian();
        assert!((j.det_field.get(&[3, 3]) + 1.0).abs() < 1e-12);
        assert_eq!(j.fold_fraction, 1.0);
        assert_eq!(j.min_det, -1.0);
    }

    #[test]
    fn upsample_scales_displacement() {
        let s = shape(&[5, 4]);
        let id = DeformationField::identity(&s).upsample();
        assert_eq!(id.shape().dims(), &[10, 8]);
        assert!(id.displacement().max_norm() == 0.0);

        let c = DeformationField::from_displacement(VectorField::from_fn(&s, |_| vec![0.5, -1.0]));
        let u = c.upsample();
        for v in 0..u.shape().len() {
            let d = u.displacement().at(v);
            assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_linear_keeps_slope() {
        // d(x) = a x on the coarse grid; on the fine grid the fine-voxel
        // position of coarse sample x is X = x (2n-1)/(n-1), so the analytic
        // fine displacement is 2 a x = 2 a X (n-1)/(2n-1).
        let n = 6usize;
        let a = 0.1;
        let s = shape(&[n, n]);
        let lin = DeformationField::from_displacement(VectorField::from_fn(&s, |i| {
            vec![a * i[0] as f64, 0.0]
        }));
        let u = lin.upsample();
        let ratio = (n - 1) as f64 / (2 * n - 1) as f64;
        for v in 0..u.shape().len() {
            let idx = u.shape().unravel(v);
            let expect = 2.0 * a * idx[0] as f64 * ratio;
            assert!((u.displacement().component(0).data()[v] - expect).abs() < 1e-12);
        }
        // the slope per fine voxel stays close to a
        let slope = 2.0 * a * ratio;
        assert!((slope - a).abs() < 0.01);
    }

    #[test]
    fn labels_warp_nearest() {
        let s = shape(&[4, 4]);
        let l = LabelField::new(s.clone(), (0..16).map(|i| i as u32 % 3).collect()).unwrap();
        assert_eq!(DeformationField::identity(&s).warp_labels(&l).unwrap(), l);
        assert_eq!(l.labels(), vec![1, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn compose_is_associative(seed in 0u64..10_000) {
                let s = shape(&[32, 32]);
                let a = low_curvature_field(&s, seed);
                let b = low_curvature_field(&s, seed + 1);
                let c = low_curvature_field(&s, seed + 2);
                let left = DeformationField::compose(&DeformationField::compose(&a, &b).unwrap(), &c).unwrap();
                let right = DeformationField::compose(&a, &DeformationField::compose(&b, &c).unwrap()).unwrap();
                // interpolation error is second order in the field curvature
                let mut err = 0.0f64;
                let mut count = 0usize;
                for v in 0..s.len() {
                    if !s.is_interior(&s.unravel(v), 6) {
                        continue;
                    }
                    for a in 0..2 {
                        let p = left.displacement().component(a).data()[v];
                        let q = right.displacement().component(a).data()[v];
                        err += (p - q).abs();
                        count += 1;
                    }
                }
                err /= count as f64;
                prop_assert!(err < 1e-4, "mean associativity error {err}");
            }

            #[test]
            fn double_warp_matches_composed_warp(seed in 0u64..10_000) {
                let s = shape(&[32, 32]);
                let img = ScalarField::from_fn(&s, |i| {
                    ((i[0] as f64) * 0.2).sin() * ((i[1] as f64) * 0.15).cos()
                });
                let p1 = smooth_field_sigma(&s, 1.0, 4.0, seed);
                let p2 = smooth_field_sigma(&s, 1.0, 4.0, seed + 3);
                let twice = p1.warp(&p2.warp(&img).unwrap()).unwrap();
                let once = DeformationField::compose(&p2, &p1).unwrap().warp(&img).unwrap();
                let mae: f64 = twice.data().iter().zip(once.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                    / s.len() as f64;
                prop_assert!(mae < 5e-3, "mae {mae}");
            }

            #[test]
            fn translations_have_unit_det(tx in -3.0f64..3.0, ty in -3.0f64..3.0) {
                let s = shape(&[9, 9]);
                let t = DeformationField::from_displacement(VectorField::from_fn(&s, |_| vec![tx, ty]));
                let j = t.jacobian();
                for v in 0..s.len() {
                    prop_assert!((j.det_field.data()[v] - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn small_perturbations_never_fold(seed in 0u64..10_000, eps in 0.0f64..0.05) {
                let s = shape(&[12, 12]);
                let w = smooth_field(&s, 1.0, seed);
                let phi = DeformationField::from_displacement(w.displacement().scale(eps));
                prop_assert_eq!(phi.jacobian().fold_fraction, 0.0);
            }
        }
    }
}
