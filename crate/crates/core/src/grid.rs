//! Differentiable geometric kernels shared by training, inference and metrics.
//!
//! Everything here works on channel-first `ArrayD<f64>` grids in 2-D or 3-D:
//!
//! * backward warping `out(x) = m(x + phi(x))` with multilinear or
//!   nearest-neighbour sampling and border clamping,
//! * forward finite differences of displacement components,
//! * Jacobian determinants `det(I + grad(phi))`,
//! * multilinear resizing with half-pixel centres,
//! * displacement-field composition.
//!
//! The `*_raw` functions are the single source of truth for the arithmetic;
//! the autodiff layer wraps them together with the `*_backward` adjoints, and
//! the `Volume`-level wrappers add shape checking.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, Volume};

/// Sampling mode for [`warp_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    /// Multilinear interpolation; differentiable in image and field.
    Linear,
    /// Nearest-neighbour sampling; keeps label volumes integral.
    Nearest,
}

pub(crate) const MAX_SPATIAL_DIMS: usize = 3;

fn check_dims(d: usize) -> Result<()> {
    if d < 2 || d > MAX_SPATIAL_DIMS {
        return Err(Error::Domain(format!(
            "kernels support 2 or 3 spatial dimensions, got {d}"
        )));
    }
    Ok(())
}

/// Decodes a flat C-order voxel index into per-axis coordinates.
#[inline]
fn decode(mut flat: usize, extent: &[usize], coords: &mut [usize]) {
    for a in (0..extent.len()).rev() {
        coords[a] = flat % extent[a];
        flat /= extent[a];
    }
}

#[inline]
fn encode(coords: &[usize], extent: &[usize]) -> usize {
    let mut flat = 0usize;
    for a in 0..extent.len() {
        flat = flat * extent[a] + coords[a];
    }
    flat
}

/// Backward warp of a channel-first grid by a displacement field, multilinear.
///
/// `img` is `(C, spatial...)`, `disp` is `(D, spatial...)` with the same
/// spatial extent. Sample coordinates `x + disp(x)` are clamped to the border.
pub fn warp_linear_raw(img: &ArrayViewD<f64>, disp: &ArrayViewD<f64>) -> ArrayD<f64> {
    let d = disp.shape()[0];
    let extent = &img.shape()[1..];
    let channels = img.shape()[0];
    let n: usize = extent.iter().product();
    let img_flat = img.as_slice().expect("standard layout");
    let disp_flat = disp.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(IxDyn(img.shape()));
    let out_flat = out.as_slice_mut().unwrap();

    let mut coords = [0usize; MAX_SPATIAL_DIMS];
    let mut lo = [0usize; MAX_SPATIAL_DIMS];
    let mut hi = [0usize; MAX_SPATIAL_DIMS];
    let mut frac = [0.0f64; MAX_SPATIAL_DIMS];
    for flat in 0..n {
        decode(flat, extent, &mut coords[..d]);
        for a in 0..d {
            let src = (coords[a] as f64 + disp_flat[a * n + flat])
                .clamp(0.0, (extent[a] - 1) as f64);
            let f = src.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(extent[a] - 1);
            frac[a] = src - f;
        }
        // Accumulate the 2^D corner contributions.
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx = idx * extent[a] + hi[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx = idx * extent[a] + lo[a];
                }
            }
            if w != 0.0 {
                for c in 0..channels {
                    out_flat[c * n + flat] += w * img_flat[c * n + idx];
                }
            } else if corner == 0 {
                // Weight-zero corners are skipped, but corner 0 with w == 0
                // can only happen if another corner has weight 1; nothing to do.
            }
        }
        // Exact integer displacements: corner 0 carries weight 1 and the sum
        // above reproduces the source voxel bitwise.
    }
    out
}

/// Adjoint of [`warp_linear_raw`]: given the output gradient, accumulates the
/// gradients with respect to the image and the displacement field.
pub fn warp_linear_backward(
    img: &ArrayViewD<f64>,
    disp: &ArrayViewD<f64>,
    grad_out: &ArrayViewD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let d = disp.shape()[0];
    let extent = &img.shape()[1..];
    let channels = img.shape()[0];
    let n: usize = extent.iter().product();
    let img_flat = img.as_slice().expect("standard layout");
    let disp_flat = disp.as_slice().expect("standard layout");
    let go_flat = grad_out.as_slice().expect("standard layout");

    let mut grad_img = ArrayD::zeros(IxDyn(img.shape()));
    let mut grad_disp = ArrayD::zeros(IxDyn(disp.shape()));
    let gi_flat = grad_img.as_slice_mut().unwrap();
    let gd_flat = grad_disp.as_slice_mut().unwrap();

    let mut coords = [0usize; MAX_SPATIAL_DIMS];
    let mut lo = [0usize; MAX_SPATIAL_DIMS];
    let mut hi = [0usize; MAX_SPATIAL_DIMS];
    let mut frac = [0.0f64; MAX_SPATIAL_DIMS];
    let mut unclamped = [false; MAX_SPATIAL_DIMS];
    for flat in 0..n {
        decode(flat, extent, &mut coords[..d]);
        for a in 0..d {
            let raw = coords[a] as f64 + disp_flat[a * n + flat];
            let max = (extent[a] - 1) as f64;
            unclamped[a] = raw > 0.0 && raw < max;
            let src = raw.clamp(0.0, max);
            let f = src.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(extent[a] - 1);
            frac[a] = src - f;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx = idx * extent[a] + hi[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx = idx * extent[a] + lo[a];
                }
            }
            if w != 0.0 {
                for c in 0..channels {
                    gi_flat[c * n + idx] += w * go_flat[c * n + flat];
                }
            }
            // d(value)/d(src_a): replace the weight factor along axis a by
            // the sign of the corner, keep the others.
            for a in 0..d {
                if !unclamped[a] {
                    continue;
                }
                let mut dw = 1.0;
                let mut idx2 = 0usize;
                for b in 0..d {
                    if b == a {
                        dw *= if corner >> b & 1 == 1 { 1.0 } else { -1.0 };
                    } else if corner >> b & 1 == 1 {
                        dw *= frac[b];
                    } else {
                        dw *= 1.0 - frac[b];
                    }
                    idx2 = idx2 * extent[b]
                        + if corner >> b & 1 == 1 { hi[b] } else { lo[b] };
                }
                if dw != 0.0 {
                    let mut acc = 0.0;
                    for c in 0..channels {
                        acc += go_flat[c * n + flat] * img_flat[c * n + idx2];
                    }
                    gd_flat[a * n + flat] += dw * acc;
                }
            }
        }
    }
    (grad_img, grad_disp)
}

/// Nearest-neighbour backward warp (round-half-up after border clamping).
pub fn warp_nearest_raw(img: &ArrayViewD<f64>, disp: &ArrayViewD<f64>) -> ArrayD<f64> {
    let d = disp.shape()[0];
    let extent = &img.shape()[1..];
    let channels = img.shape()[0];
    let n: usize = extent.iter().product();
    let img_flat = img.as_slice().expect("standard layout");
    let disp_flat = disp.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(IxDyn(img.shape()));
    let out_flat = out.as_slice_mut().unwrap();

    let mut coords = [0usize; MAX_SPATIAL_DIMS];
    for flat in 0..n {
        decode(flat, extent, &mut coords[..d]);
        let mut idx = 0usize;
        for a in 0..d {
            let src = (coords[a] as f64 + disp_flat[a * n + flat])
                .clamp(0.0, (extent[a] - 1) as f64);
            let nearest = ((src + 0.5).floor() as usize).min(extent[a] - 1);
            idx = idx * extent[a] + nearest;
        }
        for c in 0..channels {
            out_flat[c * n + flat] = img_flat[c * n + idx];
        }
    }
    out
}

/// Warps a volume by a displacement field.
///
/// Backward warping: `out(x) = m(x + phi(x))`; out-of-bounds coordinates
/// clamp to the border. Label volumes should use [`Interp::Nearest`].
pub fn warp_volume(m: &Volume, phi: &DisplacementField, interp: Interp) -> Result<Volume> {
    check_dims(m.ndim_spatial())?;
    if m.extent() != phi.extent() {
        return Err(Error::Shape(format!(
            "image extent {:?} != field extent {:?}",
            m.extent(),
            phi.extent()
        )));
    }
    if phi.vectors().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "displacement field contains non-finite values".into(),
        ));
    }
    let out = match interp {
        Interp::Linear => warp_linear_raw(&m.data().view(), &phi.vectors().view()),
        Interp::Nearest => warp_nearest_raw(&m.data().view(), &phi.vectors().view()),
    };
    m.with_data(out)
}

fn check_gradient_extent(extent: &[usize]) -> Result<()> {
    if extent.iter().any(|&e| e < 2) {
        return Err(Error::Domain(format!(
            "spatial gradient needs extent >= 2 along every axis, got {extent:?}"
        )));
    }
    Ok(())
}

/// Forward finite differences of each displacement component along each axis.
///
/// Input `(D, spatial...)`, output `(D, D, spatial...)` where
/// `out[c, a, x] = phi_c(x + e_a) - phi_c(x)`; the last slice along every
/// axis replicates the previous difference (constant extrapolation).
pub fn displacement_gradient_raw(disp: &ArrayViewD<f64>) -> Result<ArrayD<f64>> {
    let d = disp.shape()[0];
    check_dims(d)?;
    let extent = &disp.shape()[1..];
    check_gradient_extent(extent)?;
    let mut shape = vec![d, d];
    shape.extend_from_slice(extent);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for c in 0..d {
        let comp = disp.index_axis(Axis(0), c);
        for a in 0..d {
            let mut dst = out.index_axis_mut(Axis(0), c);
            let mut dst = dst.index_axis_mut(Axis(0), a);
            Zip::from(dst.lanes_mut(Axis(a)))
                .and(comp.lanes(Axis(a)))
                .for_each(|mut g, v| {
                    let l = v.len();
                    for i in 0..l - 1 {
                        g[i] = v[i + 1] - v[i];
                    }
                    g[l - 1] = v[l - 1] - v[l - 2];
                });
        }
    }
    Ok(out)
}

/// Adjoint of [`displacement_gradient_raw`] for the autodiff layer.
pub fn displacement_gradient_adjoint(grad_out: &ArrayViewD<f64>) -> ArrayD<f64> {
    let d = grad_out.shape()[0];
    let extent = &grad_out.shape()[2..];
    let mut shape = vec![d];
    shape.extend_from_slice(extent);
    let mut grad_disp = ArrayD::zeros(IxDyn(&shape));
    for c in 0..d {
        for a in 0..d {
            let src = grad_out.index_axis(Axis(0), c);
            let src = src.index_axis(Axis(0), a);
            let mut dst = grad_disp.index_axis_mut(Axis(0), c);
            Zip::from(dst.lanes_mut(Axis(a)))
                .and(src.lanes(Axis(a)))
                .for_each(|mut gd, gg| {
                    let l = gg.len();
                    for j in 0..l - 1 {
                        gd[j] -= gg[j];
                    }
                    for j in 1..l {
                        gd[j] += gg[j - 1];
                    }
                    gd[l - 1] += gg[l - 1];
                    gd[l - 2] -= gg[l - 1];
                });
        }
    }
    grad_disp
}

/// Per-voxel D×D displacement gradient of a field.
pub fn spatial_gradient(phi: &DisplacementField) -> Result<ArrayD<f64>> {
    displacement_gradient_raw(&phi.vectors().view())
}

/// Mean squared Frobenius norm of the displacement gradient.
pub fn smoothness_penalty(phi: &DisplacementField) -> Result<f64> {
    let g = spatial_gradient(phi)?;
    let d = phi.ndim_spatial();
    let voxels: usize = phi.extent().iter().product();
    let _ = d;
    Ok(g.iter().map(|v| v * v).sum::<f64>() / voxels as f64)
}

/// Jacobian determinant field `det(I + grad(phi))`, one value per voxel.
pub fn jacobian_determinant(phi: &DisplacementField) -> Result<Volume> {
    let g = spatial_gradient(phi)?;
    let d = phi.ndim_spatial();
    let extent = phi.extent();
    let n: usize = extent.iter().product();
    let g_flat = g.as_slice().expect("standard layout");
    let mut shape = vec![1usize];
    shape.extend_from_slice(extent);
    let mut det = ArrayD::zeros(IxDyn(&shape));
    let det_flat = det.as_slice_mut().unwrap();
    // g is laid out (c, a, voxel): entry (c, a) at g_flat[(c * d + a) * n + x].
    let e = |c: usize, a: usize, x: usize| g_flat[(c * d + a) * n + x];
    match d {
        2 => {
            for x in 0..n {
                let j00 = 1.0 + e(0, 0, x);
                let j01 = e(0, 1, x);
                let j10 = e(1, 0, x);
                let j11 = 1.0 + e(1, 1, x);
                det_flat[x] = j00 * j11 - j01 * j10;
            }
        }
        3 => {
            for x in 0..n {
                let j = [
                    [1.0 + e(0, 0, x), e(0, 1, x), e(0, 2, x)],
                    [e(1, 0, x), 1.0 + e(1, 1, x), e(1, 2, x)],
                    [e(2, 0, x), e(2, 1, x), 1.0 + e(2, 2, x)],
                ];
                det_flat[x] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            }
        }
        _ => unreachable!("check_dims"),
    }
    Volume::new(det, phi.extent().iter().map(|_| 1.0).collect(), false)
}

/// Multilinear resize of a channel-first grid to `out_extent`, half-pixel
/// centres, border clamped. Returns the input unchanged if extents match.
pub fn resize_linear_raw(x: &ArrayViewD<f64>, out_extent: &[usize]) -> ArrayD<f64> {
    let in_extent = &x.shape()[1..];
    if in_extent == out_extent {
        return x.to_owned();
    }
    let d = in_extent.len();
    let channels = x.shape()[0];
    let n_in: usize = in_extent.iter().product();
    let n_out: usize = out_extent.iter().product();
    let x_flat = x.as_slice().expect("standard layout");
    let mut shape = vec![channels];
    shape.extend_from_slice(out_extent);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let out_flat = out.as_slice_mut().unwrap();

    let mut coords = [0usize; MAX_SPATIAL_DIMS];
    let mut lo = [0usize; MAX_SPATIAL_DIMS];
    let mut hi = [0usize; MAX_SPATIAL_DIMS];
    let mut frac = [0.0f64; MAX_SPATIAL_DIMS];
    for flat in 0..n_out {
        decode(flat, out_extent, &mut coords[..d]);
        for a in 0..d {
            let scale = in_extent[a] as f64 / out_extent[a] as f64;
            let src = ((coords[a] as f64 + 0.5) * scale - 0.5)
                .clamp(0.0, (in_extent[a] - 1) as f64);
            let f = src.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(in_extent[a] - 1);
            frac[a] = src - f;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx = idx * in_extent[a] + hi[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx = idx * in_extent[a] + lo[a];
                }
            }
            if w != 0.0 {
                for c in 0..channels {
                    out_flat[c * n_out + flat] += w * x_flat[c * n_in + idx];
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_linear_raw`]: scatters the output gradient back onto
/// the input grid.
pub fn resize_linear_adjoint(grad_out: &ArrayViewD<f64>, in_extent: &[usize]) -> ArrayD<f64> {
    let out_extent = &grad_out.shape()[1..];
    if in_extent == out_extent {
        return grad_out.to_owned();
    }
    let d = in_extent.len();
    let channels = grad_out.shape()[0];
    let n_in: usize = in_extent.iter().product();
    let n_out: usize = out_extent.iter().product();
    let go_flat = grad_out.as_slice().expect("standard layout");
    let mut shape = vec![channels];
    shape.extend_from_slice(in_extent);
    let mut grad_in = ArrayD::zeros(IxDyn(&shape));
    let gi_flat = grad_in.as_slice_mut().unwrap();

    let mut coords = [0usize; MAX_SPATIAL_DIMS];
    let mut lo = [0usize; MAX_SPATIAL_DIMS];
    let mut hi = [0usize; MAX_SPATIAL_DIMS];
    let mut frac = [0.0f64; MAX_SPATIAL_DIMS];
    for flat in 0..n_out {
        decode(flat, out_extent, &mut coords[..d]);
        for a in 0..d {
            let scale = in_extent[a] as f64 / out_extent[a] as f64;
            let src = ((coords[a] as f64 + 0.5) * scale - 0.5)
                .clamp(0.0, (in_extent[a] - 1) as f64);
            let f = src.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(in_extent[a] - 1);
            frac[a] = src - f;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx = idx * in_extent[a] + hi[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx = idx * in_extent[a] + lo[a];
                }
            }
            if w != 0.0 {
                for c in 0..channels {
                    gi_flat[c * n_in + idx] += w * go_flat[c * n_out + flat];
                }
            }
        }
    }
    grad_in
}

/// Nearest-neighbour resize (used when resampling label volumes).
pub fn resize_nearest_raw(x: &ArrayViewD<f64>, out_extent: &[usize]) -> ArrayD<f64> {
    let in_extent = &x.shape()[1..];
    if in_extent == out_extent {
        return x.to_owned();
    }
    let d = in_extent.len();
    let channels = x.shape()[0];
    let n_in: usize = in_extent.iter().product();
    let n_out: usize = out_extent.iter().product();
    let x_flat = x.as_slice().expect("standard layout");
    let mut shape = vec![channels];
    shape.extend_from_slice(out_extent);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let out_flat = out.as_slice_mut().unwrap();
    let mut coords = [0usize; MAX_SPATIAL_DIMS];
    for flat in 0..n_out {
        decode(flat, out_extent, &mut coords[..d]);
        let mut idx = 0usize;
        for a in 0..d {
            let scale = in_extent[a] as f64 / out_extent[a] as f64;
            let src = ((coords[a] as f64 + 0.5) * scale - 0.5)
                .clamp(0.0, (in_extent[a] - 1) as f64);
            let nearest = ((src + 0.5).floor() as usize).min(in_extent[a] - 1);
            idx = idx * in_extent[a] + nearest;
        }
        for c in 0..channels {
            out_flat[c * n_out + flat] = x_flat[c * n_in + idx];
        }
    }
    out
}

/// Composition `result(x) = inner(x) + outer(x + inner(x))`.
///
/// With `outer == inner` this is the squaring step of scaling-and-squaring.
pub fn compose_displacements(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    if outer.extent() != inner.extent() {
        return Err(Error::Shape(format!(
            "field extents differ: {:?} vs {:?}",
            outer.extent(),
            inner.extent()
        )));
    }
    let warped = warp_linear_raw(&outer.vectors().view(), &inner.vectors().view());
    DisplacementField::new(warped + inner.vectors())
}

#[allow(dead_code)]
pub(crate) fn encode_index(coords: &[usize], extent: &[usize]) -> usize {
    encode(coords, extent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_volume(extent: &[usize], rng: &mut ChaCha12Rng) -> Volume {
        let mut shape = vec![1usize];
        shape.extend_from_slice(extent);
        let data = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-1.0..1.0));
        Volume::new(data, vec![1.0; extent.len()], false).unwrap()
    }

    fn random_field(extent: &[usize], amp: f64, rng: &mut ChaCha12Rng) -> DisplacementField {
        let mut shape = vec![extent.len()];
        shape.extend_from_slice(extent);
        let v = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-amp..amp));
        DisplacementField::new(v).unwrap()
    }

    /// Affine field phi(x) = A x for testing Jacobians and gradients.
    fn affine_field(extent: &[usize], a: &[Vec<f64>]) -> DisplacementField {
        let d = extent.len();
        let mut shape = vec![d];
        shape.extend_from_slice(extent);
        let arr = ArrayD::from_shape_fn(IxDyn(&shape), |ix| {
            let c = ix[0];
            (0..d).map(|k| a[c][k] * ix[k + 1] as f64).sum()
        });
        DisplacementField::new(arr).unwrap()
    }

    #[test]
    fn warp_identity_is_bitwise_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for extent in [vec![5usize, 7], vec![4, 5, 6]] {
            let m = random_volume(&extent, &mut rng);
            let phi = DisplacementField::zeros(&extent);
            let w = warp_volume(&m, &phi, Interp::Linear).unwrap();
            assert_eq!(w.data(), m.data());
        }
    }

    #[test]
    fn warp_delta_integer_shift() {
        let mut data = ArrayD::zeros(IxDyn(&[1, 10, 10, 10]));
        data[[0, 5, 5, 5]] = 1.0;
        let m = Volume::new(data, vec![1.0; 3], false).unwrap();
        let mut v = ArrayD::zeros(IxDyn(&[3, 10, 10, 10]));
        v.index_axis_mut(Axis(0), 0).fill(1.0);
        let phi = DisplacementField::new(v).unwrap();
        let w = warp_volume(&m, &phi, Interp::Linear).unwrap();
        assert_eq!(w.data()[[0, 4, 5, 5]], 1.0);
        assert_eq!(w.data().iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn warp_delta_half_shift_trilinear() {
        let mut data = ArrayD::zeros(IxDyn(&[1, 10, 10, 10]));
        data[[0, 5, 5, 5]] = 1.0;
        let m = Volume::new(data, vec![1.0; 3], false).unwrap();
        let mut v = ArrayD::zeros(IxDyn(&[3, 10, 10, 10]));
        v.index_axis_mut(Axis(0), 0).fill(0.5);
        let phi = DisplacementField::new(v).unwrap();
        let w = warp_volume(&m, &phi, Interp::Linear).unwrap();
        assert!((w.data()[[0, 4, 5, 5]] - 0.5).abs() < 1e-15);
        assert!((w.data()[[0, 5, 5, 5]] - 0.5).abs() < 1e-15);
        let total: f64 = w.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warp_integer_displacement_matches_index_shift_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for extent in [vec![6usize, 5], vec![4, 5, 6]] {
            let d = extent.len();
            let m = random_volume(&extent, &mut rng);
            let mut shape = vec![d];
            shape.extend_from_slice(&extent);
            let shifts = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
                rng.random_range(-3i64..=3) as f64
            });
            let phi = DisplacementField::new(shifts.clone()).unwrap();
            let w = warp_volume(&m, &phi, Interp::Linear).unwrap();
            // Oracle: index shift with border clamp.
            let n: usize = extent.iter().product();
            let mut coords = vec![0usize; d];
            for flat in 0..n {
                super::decode(flat, &extent, &mut coords);
                let mut src = vec![0usize; d];
                for a in 0..d {
                    let s = coords[a] as i64 + shifts.as_slice().unwrap()[a * n + flat] as i64;
                    src[a] = s.clamp(0, extent[a] as i64 - 1) as usize;
                }
                let got = w.data().as_slice().unwrap()[flat];
                let want = m.data().as_slice().unwrap()[super::encode(&src, &extent)];
                assert_eq!(got, want, "voxel {coords:?}");
            }
        }
    }

    #[test]
    fn warp_constant_image_partition_of_unity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let extent = [6usize, 6, 6];
        let data = ArrayD::from_elem(IxDyn(&[1, 6, 6, 6]), 0.37);
        let m = Volume::new(data, vec![1.0; 3], false).unwrap();
        let phi = random_field(&extent, 2.5, &mut rng);
        let w = warp_volume(&m, &phi, Interp::Linear).unwrap();
        for v in w.data().iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rejects_extent_mismatch_and_non_finite() {
        let m = Volume::zeros(&[4, 4]);
        let phi = DisplacementField::zeros(&[4, 5]);
        assert!(matches!(
            warp_volume(&m, &phi, Interp::Linear),
            Err(Error::Shape(_))
        ));
        let mut phi = DisplacementField::zeros(&[4, 4]);
        phi.vectors_mut()[[0, 1, 1]] = f64::INFINITY;
        assert!(matches!(
            warp_volume(&m, &phi, Interp::Linear),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn nearest_warp_keeps_labels_integral() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let extent = [8usize, 8];
        let data = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |_| {
            rng.random_range(0i64..4) as f64
        });
        let m = Volume::new(data, vec![1.0, 1.0], true).unwrap();
        let phi = random_field(&extent, 1.5, &mut rng);
        let w = warp_volume(&m, &phi, Interp::Nearest).unwrap();
        assert!(w.data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn gradient_of_constant_field_is_zero() {
        let mut v = ArrayD::zeros(IxDyn(&[2, 4, 4]));
        v.fill(1.7);
        let phi = DisplacementField::new(v).unwrap();
        let g = spatial_gradient(&phi).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_of_linear_field_is_constant() {
        // phi(x) = (0.1 * x0, 0, 0)
        let extent = [5usize, 5, 5];
        let a = vec![
            vec![0.1, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ];
        let phi = affine_field(&extent, &a);
        let g = spatial_gradient(&phi).unwrap();
        for ((idx, _), &val) in g.indexed_iter().map(|(i, v)| ((i.clone(), ()), v)) {
            let want = if idx[0] == 0 && idx[1] == 0 { 0.1 } else { 0.0 };
            assert!((val - want).abs() < 1e-12, "{idx:?} -> {val}");
        }
    }

    #[test]
    fn gradient_matches_bruteforce_differencing() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let extent = [4usize, 4, 4];
        let phi = random_field(&extent, 1.0, &mut rng);
        let g = spatial_gradient(&phi).unwrap();
        let v = phi.vectors();
        for c in 0..3 {
            for a in 0..3 {
                for z in 0..4 {
                    for y in 0..4 {
                        for x in 0..4 {
                            let idx = [z, y, x];
                            let mut up = idx;
                            let mut lo = idx;
                            if idx[a] < extent[a] - 1 {
                                up[a] += 1;
                            } else {
                                lo[a] -= 1;
                            }
                            let want = v[[c, up[0], up[1], up[2]]] - v[[c, lo[0], lo[1], lo[2]]];
                            let got = g[[c, a, z, y, x]];
                            assert!((got - want).abs() < 1e-14);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_rejects_extent_one() {
        let phi = DisplacementField::zeros(&[1, 5]);
        assert!(matches!(spatial_gradient(&phi), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_adjoint_identity() {
        // <A x, y> == <x, A^T y> on random data.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let extent = [4usize, 5];
        let phi = random_field(&extent, 1.0, &mut rng);
        let gx = displacement_gradient_raw(&phi.vectors().view()).unwrap();
        let y = ArrayD::from_shape_fn(gx.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&gx * &y).sum();
        let aty = displacement_gradient_adjoint(&y.view());
        let rhs: f64 = (phi.vectors() * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn smoothness_constant_zero_and_linear_value() {
        let mut v = ArrayD::zeros(IxDyn(&[2, 4, 4]));
        v.fill(-0.3);
        let phi = DisplacementField::new(v).unwrap();
        assert_eq!(smoothness_penalty(&phi).unwrap(), 0.0);

        let extent = [6usize, 6, 6];
        let a = vec![
            vec![0.1, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ];
        let phi = affine_field(&extent, &a);
        assert!((smoothness_penalty(&phi).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn jacobian_identity_folded_and_isotropic() {
        let phi = DisplacementField::zeros(&[4, 4, 4]);
        let det = jacobian_determinant(&phi).unwrap();
        assert!(det.data().iter().all(|&v| v == 1.0));

        let extent = [6usize, 6, 6];
        let fold = vec![
            vec![-2.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ];
        let det = jacobian_determinant(&affine_field(&extent, &fold)).unwrap();
        for &v in det.data().iter() {
            assert!((v - -1.0).abs() < 1e-12);
        }

        let iso = vec![
            vec![0.1, 0.0, 0.0],
            vec![0.0, 0.1, 0.0],
            vec![0.0, 0.0, 0.1],
        ];
        let det = jacobian_determinant(&affine_field(&extent, &iso)).unwrap();
        for &v in det.data().iter() {
            assert!((v - 1.331).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_of_general_affine_matches_closed_form() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..5 {
            let a: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.random_range(-0.2..0.2)).collect())
                .collect();
            let extent = [5usize, 6, 7];
            let det = jacobian_determinant(&affine_field(&extent, &a)).unwrap();
            let m = [
                [1.0 + a[0][0], a[0][1], a[0][2]],
                [a[1][0], 1.0 + a[1][1], a[1][2]],
                [a[2][0], a[2][1], 1.0 + a[2][2]],
            ];
            let want = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            for &v in det.data().iter() {
                assert!((v - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resize_identity_and_constant_preservation() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let v = random_volume(&[6, 6], &mut rng);
        let same = resize_linear_raw(&v.data().view(), &[6, 6]);
        assert_eq!(&same, v.data());
        let c = ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.9);
        let up = resize_linear_raw(&c.view(), &[8, 8]);
        for &x in up.iter() {
            assert!((x - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_adjoint_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 4, 5]), |_| rng.random_range(-1.0..1.0));
        let out_extent = [8usize, 10];
        let ax = resize_linear_raw(&x.view(), &out_extent);
        let y = ArrayD::from_shape_fn(ax.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&ax * &y).sum();
        let aty = resize_linear_adjoint(&y.view(), &[4, 5]);
        let rhs: f64 = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn compose_zero_fields_is_zero() {
        let z = DisplacementField::zeros(&[4, 4]);
        let c = compose_displacements(&z, &z).unwrap();
        assert!(c.vectors().iter().all(|&v| v == 0.0));
    }
}
