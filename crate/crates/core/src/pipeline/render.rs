//! PGM (P5) and PPM (P6) renders of registration results.

use std::fs;
use std::path::{Path, PathBuf};

use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, VectorField};

use super::run::RegistrationResult;

/// Spacing of the traced grid lines, in voxels.
pub const GRID_SPACING: usize = 4;
/// Determinants are shown on `[0, DET_RANGE]`; folds are black.
pub const DET_RANGE: f64 = 2.0;

/// Binary graymap bytes for a 2D field, `[lo, hi]` mapped to `0..=255`.
pub fn encode_pgm(f: &ScalarField, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let [h, w] = plane(f.shape())?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(f.data().iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Graymap scaled to the field's own range.
pub fn encode_image(f: &ScalarField) -> Result<Vec<u8>> {
    encode_pgm(f, f.min(), f.max())
}

/// Jacobian determinant heatmap; `det <= 0` renders as 0.
pub fn encode_jacobian(det: &ScalarField) -> Result<Vec<u8>> {
    let clipped = det.map(|v| if v <= 0.0 { 0.0 } else { v });
    encode_pgm(&clipped, 0.0, DET_RANGE)
}

/// Pixmap of `background` with every `GRID_SPACING`-th grid line traced
/// through `phi` in red.
pub fn encode_grid(background: &ScalarField, phi: &DeformationField) -> Result<Vec<u8>> {
    let [h, w] = plane(background.shape())?;
    if phi.shape() != background.shape() {
        return Err(Error::mismatch(
            phi.shape().dims(),
            background.shape().dims(),
        ));
    }
    let (lo, hi) = (background.min(), background.max());
    let mut rgb: Vec<[u8; 3]> = background
        .data()
        .iter()
        .map(|&v| {
            let g = if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            };
            [g, g, g]
        })
        .collect();
    let disp = phi.displacement();
    let mut plot = |p: [f64; 2]| {
        let d0 = disp.component(0).sample_linear(&p).expect("2D point");
        let d1 = disp.component(1).sample_linear(&p).expect("2D point");
        let (r, c) = ((p[0] + d0).round(), (p[1] + d1).round());
        if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
            rgb[r as usize * w + c as usize] = [255, 0, 0];
        }
    };
    // Quarter-voxel sampling keeps traced lines connected under mild stretch.
    let sub = 4;
    for r in (0..h).step_by(GRID_SPACING) {
        for k in 0..=(w - 1) * sub {
            plot([r as f64, k as f64 / sub as f64]);
        }
    }
    for c in (0..w).step_by(GRID_SPACING) {
        for k in 0..=(h - 1) * sub {
            plot([k as f64 / sub as f64, c as f64]);
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    Ok(out)
}

fn plane(shape: &GridShape) -> Result<[usize; 2]> {
    match shape.dims() {
        &[h, w] => Ok([h, w]),
        d => Err(Error::InvalidShape(format!(
            "render needs a 2D plane, got {d:?}"
        ))),
    }
}

/// Plane through the middle of `axis`.
pub fn mid_slice(f: &ScalarField, axis: usize) -> Result<ScalarField> {
    let dims = f.shape().dims();
    if dims.len() != 3 || axis > 2 {
        return Err(Error::InvalidArgument(format!(
            "mid-slice of {dims:?} along axis {axis}"
        )));
    }
    let keep: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let shape = GridShape::new(&[dims[keep[0]], dims[keep[1]]])?;
    let mid = dims[axis] / 2;
    Ok(ScalarField::from_fn(&shape, |ij| {
        let mut idx = [0usize; 3];
        idx[axis] = mid;
        idx[keep[0]] = ij[0];
        idx[keep[1]] = ij[1];
        f.get(&idx)
    }))
}

/// In-plane part of a 3D deformation on the mid-slice of `axis`.
pub fn mid_slice_field(phi: &DeformationField, axis: usize) -> Result<DeformationField> {
    let comps = phi
        .displacement()
        .components()
        .iter()
        .enumerate()
        .filter(|&(a, _)| a != axis)
        .map(|(_, c)| mid_slice(c, axis))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeformationField::from_displacement(VectorField::new(
        comps,
    )?))
}

/// Writes warped images, determinant heatmaps and grid overlays for both
/// directions. 3D results emit one set per axis through the mid-slice.
pub fn render(result: &RegistrationResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let ndim = result.phi.shape().ndim();
    let sets = [
        ("fwd", &result.warped_x, &result.phi),
        ("bwd", &result.warped_y, &result.phi_inv),
    ];
    let mut written = Vec::new();
    for (tag, warped, phi) in sets {
        let det = phi.jacobian().det_field;
        let planes: Vec<(String, ScalarField, ScalarField, DeformationField)> = match ndim {
            2 => vec![(String::new(), warped.clone(), det, phi.clone())],
            3 => (0..3)
                .map(|a| {
                    Ok((
                        format!("_axis{a}"),
                        mid_slice(warped, a)?,
                        mid_slice(&det, a)?,
                        mid_slice_field(phi, a)?,
                    ))
                })
                .collect::<Result<_>>()?,
            d => return Err(Error::InvalidShape(format!("cannot render a {d}D result"))),
        };
        for (suffix, img, det, field) in planes {
            for (name, bytes) in [
                (format!("{tag}_warped{suffix}.pgm"), encode_image(&img)?),
                (
                    format!("{tag}_jacobian{suffix}.pgm"),
                    encode_jacobian(&det)?,
                ),
                (
                    format!("{tag}_grid{suffix}.ppm"),
                    encode_grid(&img, &field)?,
                ),
            ] {
                let path = dir.join(name);
                fs::write(&path, bytes)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
