//! Global affine pre-alignment of a support image onto a query image.
//!
//! The transform is estimated from intensity moments only: the translation
//! matches intensity centroids, and the linear part matches the symmetric
//! square roots of the second-moment (covariance) matrices, with singular
//! values clamped to `[0.5, 2]` to keep the warp sane on outlier pairs. The
//! support image is then resampled bilinearly and its mask nearest-neighbor,
//! both reading 0 outside the frame.

use super::AffineTransform;
use crate::numerics::tensor::{num, Scalar, Tensor};
use crate::{Error, Result};

/// An aligned support pair plus the transform that produced it.
#[derive(Clone, Debug)]
pub struct Aligned<F: Scalar> {
    pub image: Tensor<F>,
    pub mask: Tensor<F>,
    pub transform: AffineTransform,
    /// True when the warp pushed every mask pixel out of bounds and the
    /// original (untransformed) mask was substituted.
    pub collapsed: bool,
}

struct Moments {
    mx: f64,
    my: f64,
    cxx: f64,
    cxy: f64,
    cyy: f64,
}

fn moments<F: Scalar>(image: &Tensor<F>, what: &str) -> Result<Moments> {
    let (h, w, _) = image.dims3()?;
    let (mut mass, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let v = image.at3(y, x, 0).to_f64().unwrap_or(f64::NAN);
            mass += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    if !mass.is_finite() {
        return Err(Error::NonFinite(format!("{what} image contains non-finite values")));
    }
    if mass < 1e-6 {
        return Err(Error::Degenerate(format!(
            "{what} image has near-zero total intensity ({mass:.3e})"
        )));
    }
    let (mx, my) = (sx / mass, sy / mass);
    let (mut cxx, mut cxy, mut cyy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let v = image.at3(y, x, 0).to_f64().unwrap_or(0.0);
            let (dx, dy) = (x as f64 - mx, y as f64 - my);
            cxx += v * dx * dx;
            cxy += v * dx * dy;
            cyy += v * dy * dy;
        }
    }
    Ok(Moments { mx, my, cxx: cxx / mass, cxy: cxy / mass, cyy: cyy / mass })
}

type Mat2 = [[f64; 2]; 2];

/// Principal square root of a symmetric positive semi-definite 2×2 matrix.
fn sqrt_spd(m: &Moments, what: &str) -> Result<Mat2> {
    let det = (m.cxx * m.cyy - m.cxy * m.cxy).max(0.0);
    let s = det.sqrt();
    let t = (m.cxx + m.cyy + 2.0 * s).sqrt();
    if t < 1e-9 {
        return Err(Error::Degenerate(format!(
            "{what} image has a (near-)pointlike intensity distribution"
        )));
    }
    Ok([[(m.cxx + s) / t, m.cxy / t], [m.cxy / t, (m.cyy + s) / t]])
}

fn inv2(m: &Mat2, what: &str) -> Result<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-9 {
        return Err(Error::Degenerate(format!(
            "{what} image has a rank-deficient intensity covariance"
        )));
    }
    Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

fn matmul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Rescales the singular values of `a` into `[lo, hi]`, leaving the singular
/// directions untouched.
fn clamp_singular_values(a: Mat2, lo: f64, hi: f64) -> Result<Mat2> {
    // Eigen-decompose B = AᵀA (symmetric PSD); singular values are √λ.
    let b = matmul(&[[a[0][0], a[1][0]], [a[0][1], a[1][1]]], &a);
    let (p, q, r) = (b[0][0], b[0][1], b[1][1]);
    let half_gap = (((p - r) / 2.0).powi(2) + q * q).sqrt();
    let l1 = (p + r) / 2.0 + half_gap;
    let l2 = ((p + r) / 2.0 - half_gap).max(0.0);
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    if s1 >= lo && s1 <= hi && s2 >= lo && s2 <= hi {
        return Ok(a);
    }
    if s2 < 1e-9 {
        return Err(Error::Degenerate(format!(
            "moment transform is (near-)singular (singular values {s1:.3e}, {s2:.3e})"
        )));
    }
    // Eigenvectors of B form V; A·V·diag(σ'/σ)·Vᵀ rescales the singular values.
    let (v1, v2) = if q.abs() > 1e-12 {
        let n1 = ((l1 - r).powi(2) + q * q).sqrt();
        ([(l1 - r) / n1, q / n1], [-q / n1, (l1 - r) / n1])
    } else if p >= r {
        ([1.0, 0.0], [0.0, 1.0])
    } else {
        ([0.0, 1.0], [1.0, 0.0])
    };
    let (d1, d2) = (s1.clamp(lo, hi) / s1, s2.clamp(lo, hi) / s2);
    // V·diag·Vᵀ expanded directly.
    let m = [
        [
            d1 * v1[0] * v1[0] + d2 * v2[0] * v2[0],
            d1 * v1[0] * v1[1] + d2 * v2[0] * v2[1],
        ],
        [
            d1 * v1[1] * v1[0] + d2 * v2[1] * v2[0],
            d1 * v1[1] * v1[1] + d2 * v2[1] * v2[1],
        ],
    ];
    Ok(matmul(&a, &m))
}

/// Estimates the support→query transform and resamples the support pair into
/// the query frame.
pub fn affine_align<F: Scalar>(
    support_image: &Tensor<F>,
    support_mask: &Tensor<F>,
    query_image: &Tensor<F>,
) -> Result<Aligned<F>> {
    if support_image.shape() != query_image.shape()
        || support_image.shape() != support_mask.shape()
    {
        return Err(Error::shape(format!(
            "affine_align needs equal shapes, got image {:?}, mask {:?}, query {:?}",
            support_image.shape(),
            support_mask.shape(),
            query_image.shape()
        )));
    }
    let (h, w, _) = support_image.dims3()?;

    let ms = moments(support_image, "support")?;
    let mq = moments(query_image, "query")?;
    let a = clamp_singular_values(
        matmul(&sqrt_spd(&mq, "query")?, &inv2(&sqrt_spd(&ms, "support")?, "support")?),
        0.5,
        2.0,
    )?;
    let transform = AffineTransform {
        m: [
            [a[0][0], a[0][1], mq.mx - a[0][0] * ms.mx - a[0][1] * ms.my],
            [a[1][0], a[1][1], mq.my - a[1][0] * ms.mx - a[1][1] * ms.my],
        ],
    };

    // Inverse-warp: walk query pixels, read from support coordinates.
    let inv = transform.inverse()?;
    let mut image = Tensor::<F>::zeros(vec![h, w, 1]);
    let mut mask = Tensor::<F>::zeros(vec![h, w, 1]);
    let mut mask_any = false;
    for yq in 0..h {
        for xq in 0..w {
            let (xs, ys) = inv.apply(xq as f64, yq as f64);
            let out = (yq * w + xq) * 1;

            // Bilinear image tap; out-of-bounds corners contribute zero.
            let (x0, y0) = (xs.floor(), ys.floor());
            let (fx, fy) = (xs - x0, ys - y0);
            let mut acc = 0.0f64;
            for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
                    if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                        let v = support_image
                            .at3(yi as usize, xi as usize, 0)
                            .to_f64()
                            .unwrap_or(0.0);
                        acc += wy * wx * v;
                    }
                }
            }
            image.values_mut()[out] = num::<F>(acc);

            // Nearest-neighbor mask tap.
            let (xr, yr) = (xs.round() as i64, ys.round() as i64);
            if xr >= 0 && yr >= 0 && (xr as usize) < w && (yr as usize) < h {
                let v = support_mask.at3(yr as usize, xr as usize, 0);
                if v > num::<F>(0.5) {
                    mask.values_mut()[out] = F::one();
                    mask_any = true;
                }
            }
        }
    }

    let input_mask_area = support_mask.values().iter().filter(|&&v| v > num::<F>(0.5)).count();
    let collapsed = input_mask_area > 0 && !mask_any;
    if collapsed {
        // Every mask pixel landed outside the frame; fall back to the
        // untransformed mask so downstream initialization stays nonempty.
        mask = support_mask.clone();
        mask.clear_grad();
    }
    Ok(Aligned { image, mask, transform, collapsed })
}
