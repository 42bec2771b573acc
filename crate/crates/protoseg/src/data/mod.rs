//! Synthetic corpus, on-disk dataset format, episode sampling, affine
//! pre-alignment, and mask utilities.
//!
//! Images are grayscale `[H, W, 1]` tensors with intensities in `[0, 1]`.
//! Each sample carries one exact binary mask per class; masks of different
//! classes never overlap. Episodes pair `K` labeled support images with one
//! query image of the same class, with the query never reused as a support.

mod align;
mod episode;
mod io;
mod synth;

pub use align::{affine_align, Aligned};
pub use episode::sample_episode;
pub use io::{export_pgms, load_dataset, save_dataset, write_pgm};
pub use synth::generate_synthetic;

use std::collections::BTreeMap;

use crate::numerics::tensor::{num, Scalar, Tensor};
use crate::{Error, Result};

/// One grayscale image with a binary mask per contained class.
///
/// Class ids map to masks in a sorted map so every iteration order is
/// deterministic.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub sample_id: String,
    /// `[H, W, 1]`, intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Per-class binary masks, pairwise disjoint, each with ≥ 1 foreground pixel.
    pub masks: BTreeMap<usize, Tensor<f32>>,
}

/// A 1-way K-shot unit: K labeled supports plus one query of the same class.
#[derive(Clone, Debug)]
pub struct Episode<F: Scalar> {
    /// K (image, binary foreground mask) pairs.
    pub support: Vec<(Tensor<F>, Tensor<F>)>,
    pub query_image: Tensor<F>,
    /// Ground truth for the query when known (training / evaluation).
    pub query_mask: Option<Tensor<F>>,
    pub class_id: usize,
}

impl<F: Scalar> Episode<F> {
    /// Converts every tensor to another precision (used by 64-bit checks).
    pub fn cast<G: Scalar>(&self) -> Episode<G> {
        Episode {
            support: self.support.iter().map(|(i, m)| (i.cast(), m.cast())).collect(),
            query_image: self.query_image.cast(),
            query_mask: self.query_mask.as_ref().map(Tensor::cast),
            class_id: self.class_id,
        }
    }
}

/// Row-major 2×3 affine map from support pixel coordinates `(x, y)` into
/// query coordinates: `(x', y') = (m[0]·(x, y, 1), m[1]·(x, y, 1))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    /// The identity map.
    pub fn identity() -> Self {
        AffineTransform { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    /// Applies the map to a point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    /// Determinant of the 2×2 linear part.
    pub fn linear_det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Inverse map; fails when the linear part is (near-)singular.
    pub fn inverse(&self) -> Result<Self> {
        let det = self.linear_det();
        if !det.is_finite() || det.abs() <= 1e-6 {
            return Err(Error::Degenerate(format!(
                "affine transform is not invertible (det {det:.3e})"
            )));
        }
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let (tx, ty) = (self.m[0][2], self.m[1][2]);
        Ok(AffineTransform {
            m: [
                [inv[0][0], inv[0][1], -(inv[0][0] * tx + inv[0][1] * ty)],
                [inv[1][0], inv[1][1], -(inv[1][0] * tx + inv[1][1] * ty)],
            ],
        })
    }
}

/// Pixelwise maximum (union) of K equally shaped binary masks.
pub fn initial_mask<F: Scalar>(aligned_masks: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = aligned_masks
        .first()
        .ok_or_else(|| Error::Config("initial_mask needs at least one mask".into()))?;
    let mut out = first.clone();
    out.clear_grad();
    for m in &aligned_masks[1..] {
        if m.shape() != first.shape() {
            return Err(Error::shape(format!(
                "initial_mask shapes differ: {:?} vs {:?}",
                m.shape(),
                first.shape()
            )));
        }
        for (o, &v) in out.values_mut().iter_mut().zip(m.values()) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Pixelwise mean of K equally shaped masks (soft alternative to the union).
pub fn average_mask<F: Scalar>(aligned_masks: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = aligned_masks
        .first()
        .ok_or_else(|| Error::Config("average_mask needs at least one mask".into()))?;
    let mut out = Tensor::zeros(first.shape().to_vec());
    for m in aligned_masks {
        if m.shape() != first.shape() {
            return Err(Error::shape(format!(
                "average_mask shapes differ: {:?} vs {:?}",
                m.shape(),
                first.shape()
            )));
        }
        for (o, &v) in out.values_mut().iter_mut().zip(m.values()) {
            *o = *o + v;
        }
    }
    let inv = F::one() / num::<F>(aligned_masks.len() as f64);
    for o in out.values_mut() {
        *o = *o * inv;
    }
    Ok(out)
}

/// Average-pools a `[H, W, 1]` mask over `factor`×`factor` blocks, producing a
/// soft mask in `[0, 1]` at the reduced resolution.
pub fn downsample_mask<F: Scalar>(mask: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (h, w, c) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("downsample_mask expects one channel, got {c}")));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Divisibility(format!(
            "mask {h}×{w} is not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = F::one() / num::<F>((factor * factor) as f64);
    let mut out = Tensor::zeros(vec![oh, ow, 1]);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = F::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc = acc + mask.at3(oy * factor + dy, ox * factor + dx, 0);
                }
            }
            out.values_mut()[oy * ow + ox] = acc * inv;
        }
    }
    Ok(out)
}

/// Thresholds a soft mask at 0.5 into `{0, 1}`; exact ties count as foreground.
pub fn binarize_mask<F: Scalar>(mask: &Tensor<F>) -> Tensor<F> {
    let half = num::<F>(0.5);
    let mut out = mask.clone();
    out.clear_grad();
    for v in out.values_mut() {
        *v = if *v >= half { F::one() } else { F::zero() };
    }
    out
}
