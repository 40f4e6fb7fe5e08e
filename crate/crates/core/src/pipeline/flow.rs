//! Rectified-flow update rules and resolution transitions.
//!
//! Convention: `x_σ = (1 − σ)·x₀ + σ·ε` and the model predicts the velocity
//! `v = ε − x₀`, so `x₀ = x_σ − σ·v` and an Euler step moves along `v`.

use ndarray::{Array4, ArrayView4, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain_err, shape_err, Result};
use crate::sfc::GridDims;

/// Video latent laid out as `(t, h, w, channels)`.
pub type LatentTensor = Array4<f32>;

pub fn latent_dims(x: &ArrayView4<'_, f32>) -> GridDims {
    let (t, h, w, _) = x.dim();
    GridDims { t, h, w }
}

/// `x̂₀ = x_t − σ_t · v_t`.
pub fn predict_clean(x_t: ArrayView4<'_, f32>, v_t: ArrayView4<'_, f32>, sigma_t: f64) -> Result<LatentTensor> {
    if x_t.dim() != v_t.dim() {
        return shape_err(format!("latent {:?} vs prediction {:?}", x_t.dim(), v_t.dim()));
    }
    let s = sigma_t as f32;
    Ok(Zip::from(&x_t).and(&v_t).map_collect(|&x, &v| x - s * v))
}

/// Euler step `x ← x + (σ_next − σ_t)·v`.
pub fn denoise_step(
    x_t: ArrayView4<'_, f32>,
    v_t: ArrayView4<'_, f32>,
    sigma_t: f64,
    sigma_next: f64,
) -> Result<LatentTensor> {
    if sigma_next.is_nan() || sigma_t.is_nan() || sigma_next >= sigma_t {
        return domain_err(format!("noise level must decrease ({sigma_t} -> {sigma_next})"));
    }
    if x_t.dim() != v_t.dim() {
        return shape_err(format!("latent {:?} vs prediction {:?}", x_t.dim(), v_t.dim()));
    }
    let dt = (sigma_next - sigma_t) as f32;
    Ok(Zip::from(&x_t).and(&v_t).map_collect(|&x, &v| x + dt * v))
}

/// Overlap weights mapping `src` cells onto `dst ≥ src` cells along one axis.
/// Row `i` lists `(source index, weight)` with weights summing to one.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = ((hi.ceil() as usize).max(first + 1)).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                    (overlap > 1e-12).then_some((j, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Area-interpolation upsampling: every output cell is the overlap-weighted
/// average of the source cells its footprint covers.
pub fn upsample_area_3d(x: ArrayView4<'_, f32>, target: GridDims) -> Result<LatentTensor> {
    let (t, h, w, c) = x.dim();
    if target.t < t || target.h < h || target.w < w {
        return domain_err(format!("cannot shrink {t}x{h}x{w} to {target}"));
    }
    if (t, h, w) == (target.t, target.h, target.w) {
        return Ok(x.to_owned());
    }
    let wt = axis_weights(t, target.t);
    let wh = axis_weights(h, target.h);
    let ww = axis_weights(w, target.w);
    let mut out = Array4::<f32>::zeros((target.t, target.h, target.w, c));
    let mut acc = vec![0.0f64; c];
    for (ot, rt) in wt.iter().enumerate() {
        for (oh, rh) in wh.iter().enumerate() {
            for (ow, rw) in ww.iter().enumerate() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &(it, a) in rt {
                    for &(ih, b) in rh {
                        for &(iw, g) in rw {
                            let wgt = a * b * g;
                            for (ch, s) in acc.iter_mut().enumerate() {
                                *s += wgt * x[[it, ih, iw, ch]] as f64;
                            }
                        }
                    }
                }
                for (ch, s) in acc.iter().enumerate() {
                    out[[ot, oh, ow, ch]] = *s as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Standard-normal latent drawn in row-major order.
pub fn gaussian_latent<R: Rng + ?Sized>(dims: GridDims, channels: usize, rng: &mut R) -> LatentTensor {
    Array4::from_shape_simple_fn((dims.t, dims.h, dims.w, channels), || {
        rng.sample::<f32, _>(StandardNormal)
    })
}

/// Re-noise an upsampled clean estimate: `(1 − σ)·𝒰(x̂₀) + σ·ε̃`.
pub fn stage_transition<R: Rng + ?Sized>(
    x0_hat: ArrayView4<'_, f32>,
    sigma_t: f64,
    target: GridDims,
    rng: &mut R,
) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&sigma_t) {
        return domain_err(format!("noise level {sigma_t} outside [0, 1]"));
    }
    let up = upsample_area_3d(x0_hat, target)?;
    let noise = gaussian_latent(target, up.dim().3, rng);
    let keep = (1.0 - sigma_t) as f32;
    let s = sigma_t as f32;
    Ok(Zip::from(&up).and(&noise).map_collect(|&u, &e| keep * u + s * e))
}
