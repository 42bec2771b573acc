//! Procedural corpus of simple shapes on noisy backgrounds.
//!
//! Every image contains one instance of each class. A class is a shape family
//! (ellipse, rotated rectangle, ring, triangle — cycling for higher ids) with
//! a home position: instances are placed at a class-specific corner anchor
//! with bounded jitter, so the same class appears in roughly the same region
//! of every image. That keeps a global affine registration between two images
//! meaningful, mimicking the anatomical position consistency the pipeline is
//! designed around, while the jitter is generous enough that registration
//! alone leaves a clear accuracy gap for the learned refinement to close.
//! The corner layout maximizes the spacing between neighbors: instances stay
//! several feature cells apart after downsampling, so a mask refined on one
//! blob is never a sub-cell boundary away from a different blob.
//!
//! Each family has its own nominal mean intensity, but the means sit a small
//! step apart while the per-image shift and per-pixel texture noise span
//! several steps — the way neighboring soft-tissue structures share a narrow
//! contrast range. Brightness therefore never identifies a class, and that is
//! what keeps episodes with a held-out class well-posed: every training
//! episode contains several near-identical-looking blobs of which only the
//! one designated by the aligned support mask is foreground. A model fitting
//! those episodes is forced to segment "the blob the support points at"
//! instead of memorizing per-class appearance — the behavior that transfers
//! to a class it was never supervised on. It also keeps a held-out class's
//! appearance inside the training distribution rather than requiring
//! extrapolation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ImageSample;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

/// Background mean intensity; foreground bands start well above it.
const BG_LEVEL: f64 = 0.12;
/// Standard deviation of the Gaussian background noise.
const BG_SIGMA: f64 = 0.05;
/// Half-width of the uniform foreground texture noise.
const FG_NOISE: f64 = 0.10;
/// Mean intensity of class 0's band and the step between consecutive
/// classes. The step is deliberately far below the noise spread (see the
/// module docs).
const BAND_BASE: f64 = 0.59;
const BAND_STEP: f64 = 0.02;
/// Half-width of the per-image uniform shift applied to an instance's mean.
const BAND_JITTER: f64 = 0.05;
/// Corner anchor inset and placement jitter, as fractions of image size.
const ANCHOR_INSET: f64 = 0.25;
const JITTER: f64 = 0.06;
/// Retry budget per shrink round, shrink factor, and number of rounds.
const TRIES_PER_ROUND: usize = 100;
const SHRINK: f64 = 0.8;
const SHRINK_ROUNDS: usize = 6;

/// One of the four shape families, chosen as `class_id % 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Ellipse,
    Rectangle,
    Ring,
    Triangle,
}

impl Family {
    fn of_class(class_id: usize) -> Self {
        match class_id % 4 {
            0 => Family::Ellipse,
            1 => Family::Rectangle,
            2 => Family::Ring,
            _ => Family::Triangle,
        }
    }
}

/// A sampled shape instance: center, family-specific radii, rotation.
struct Placed {
    family: Family,
    cx: f64,
    cy: f64,
    r1: f64,
    r2: f64,
    theta: f64,
}

impl Placed {
    /// Radius of the circumscribing circle, used to keep shapes in bounds.
    fn max_radius(&self) -> f64 {
        match self.family {
            Family::Ellipse => self.r1,
            Family::Rectangle => (self.r1 * self.r1 + self.r2 * self.r2).sqrt(),
            Family::Ring => self.r1,
            Family::Triangle => self.r1,
        }
    }

    /// Whether integer pixel `(x, y)` lies inside the shape.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.theta.sin_cos();
        // Rotate into the shape frame.
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        match self.family {
            Family::Ellipse => {
                let a = u / self.r1;
                let b = v / self.r2;
                a * a + b * b <= 1.0
            }
            Family::Rectangle => u.abs() <= self.r1 && v.abs() <= self.r2,
            Family::Ring => {
                let rr = u * u + v * v;
                rr >= self.r2 * self.r2 && rr <= self.r1 * self.r1
            }
            Family::Triangle => {
                // Equilateral triangle with circumradius r1, one vertex at
                // angle −π/2 in the shape frame; inside = same side of all edges.
                let mut verts = [(0.0f64, 0.0f64); 3];
                for (i, vert) in verts.iter_mut().enumerate() {
                    let ang = -std::f64::consts::FRAC_PI_2
                        + i as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
                    *vert = (self.r1 * ang.cos(), self.r1 * ang.sin());
                }
                for i in 0..3 {
                    let (x0, y0) = verts[i];
                    let (x1, y1) = verts[(i + 1) % 3];
                    let cross = (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

/// Foreground mean intensity for a class, before the per-image shift.
/// Distinct per class (cycled families reuse geometry but not the band),
/// with steps small enough that noise drowns the difference.
fn intensity_band(class_id: usize, _num_classes: usize) -> f64 {
    BAND_BASE + BAND_STEP * class_id as f64
}

/// Home anchor of a class: one of the four image corners (inset by a
/// quarter of the side), cycling for higher ids. Corners maximize the
/// distance between neighboring instances.
fn anchor(class_id: usize, _num_classes: usize, size: f64) -> (f64, f64) {
    let (fx, fy) = match class_id % 4 {
        0 => (ANCHOR_INSET, ANCHOR_INSET),
        1 => (1.0 - ANCHOR_INSET, ANCHOR_INSET),
        2 => (1.0 - ANCHOR_INSET, 1.0 - ANCHOR_INSET),
        _ => (ANCHOR_INSET, 1.0 - ANCHOR_INSET),
    };
    (fx * size, fy * size)
}

/// Draws one candidate instance of a class at the given shrink factor.
fn sample_shape(
    class_id: usize,
    num_classes: usize,
    size: usize,
    shrink: f64,
    rng: &mut ChaCha8Rng,
) -> Placed {
    let s = size as f64;
    let family = Family::of_class(class_id);
    let (ax, ay) = anchor(class_id, num_classes, s);
    let cx = ax + rng.gen_range(-JITTER * s..=JITTER * s);
    let cy = ay + rng.gen_range(-JITTER * s..=JITTER * s);
    let (r1, r2, theta) = match family {
        Family::Ellipse => {
            let rx = s * rng.gen_range(0.11..0.15) * shrink;
            (rx, rx * rng.gen_range(0.50..0.90), rng.gen_range(0.0..std::f64::consts::PI))
        }
        Family::Rectangle => {
            let hw = s * rng.gen_range(0.10..0.14) * shrink;
            (hw, hw * rng.gen_range(0.50..0.90), rng.gen_range(0.0..std::f64::consts::PI))
        }
        Family::Ring => {
            let ro = s * rng.gen_range(0.13..0.16) * shrink;
            (ro, ro * rng.gen_range(0.30..0.40), 0.0)
        }
        Family::Triangle => {
            let r = s * rng.gen_range(0.13..0.17) * shrink;
            (r, 0.0, rng.gen_range(0.0..2.0 * std::f64::consts::FRAC_PI_3))
        }
    };
    let mut shape = Placed { family, cx, cy, r1, r2, theta };
    // Clamp the center so the circumscribing circle stays inside the frame.
    let margin = shape.max_radius() + 2.0;
    shape.cx = shape.cx.clamp(margin, (s - 1.0 - margin).max(margin));
    shape.cy = shape.cy.clamp(margin, (s - 1.0 - margin).max(margin));
    shape
}

/// Rasterizes a shape, returning covered pixel indices (row-major, 1 channel).
fn rasterize(shape: &Placed, size: usize) -> Vec<usize> {
    let mut pixels = Vec::new();
    let reach = shape.max_radius().ceil() as i64 + 1;
    let (cx, cy) = (shape.cx.round() as i64, shape.cy.round() as i64);
    let lo = |c: i64| (c - reach).max(0) as usize;
    let hi = |c: i64| ((c + reach) as usize).min(size - 1);
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            if shape.contains(x as f64, y as f64) {
                pixels.push(y * size + x);
            }
        }
    }
    pixels
}

/// Generates `num_images` samples of `size`×`size` pixels with one disjoint
/// shape instance per class. Fully determined by `seed`; each sample draws
/// from its own derived stream, so generation is order-independent.
pub fn generate_synthetic(
    num_images: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    if num_classes < 2 {
        return Err(Error::Config("need ≥ 2 classes".into()));
    }
    if size < 32 {
        return Err(Error::Config(format!("image size must be ≥ 32, got {size}")));
    }
    (0..num_images).map(|i| generate_sample(i, size, num_classes, seed)).collect()
}

fn generate_sample(
    index: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let n = size * size;

    let noise = Normal::new(0.0, BG_SIGMA).expect("constant sigma is valid");
    let mut image: Vec<f64> = (0..n).map(|_| BG_LEVEL + noise.sample(&mut rng)).collect();
    let mut occupied = vec![false; n];
    let mut masks = BTreeMap::new();

    for class_id in 0..num_classes {
        let band = intensity_band(class_id, num_classes)
            + rng.gen_range(-BAND_JITTER..=BAND_JITTER);
        let pixels = place_class(class_id, num_classes, size, &occupied, &mut rng)?;
        let mut mask = vec![0.0f32; n];
        for &p in &pixels {
            occupied[p] = true;
            mask[p] = 1.0;
            image[p] = band + rng.gen_range(-FG_NOISE..=FG_NOISE);
        }
        masks.insert(class_id, Tensor::new(vec![size, size, 1], mask)?);
    }

    let image = Tensor::new(
        vec![size, size, 1],
        image.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )?;
    Ok(ImageSample { sample_id: format!("s{index:04}"), image, masks })
}

/// Rejection-samples one non-overlapping instance, shrinking on exhaustion.
fn place_class(
    class_id: usize,
    num_classes: usize,
    size: usize,
    occupied: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut shrink = 1.0;
    for _ in 0..SHRINK_ROUNDS {
        for _ in 0..TRIES_PER_ROUND {
            let shape = sample_shape(class_id, num_classes, size, shrink, rng);
            let pixels = rasterize(&shape, size);
            if !pixels.is_empty() && pixels.iter().all(|&p| !occupied[p]) {
                return Ok(pixels);
            }
        }
        shrink *= SHRINK;
    }
    Err(Error::Placement(format!(
        "class {class_id} could not be placed after {SHRINK_ROUNDS} shrink rounds \
         of {TRIES_PER_ROUND} tries"
    )))
}
