//! Context-relation feature encoding.
//!
//! Support (or current-estimate) masks steer feature extraction: features are
//! split into a foreground stream `F_f = φ_f(F ⊙ m)` and a background stream
//! `F_b = φ_b(F ⊙ (1−m))` (3×3 convs, no bias), correlated over a bounded
//! displacement window, and fused back to `Z` channels with a 1×1 conv + leaky
//! ReLU. The correlation volume at pixel `(x, y)` and offset `(i, j)` is the
//! channel dot product `Σ_z F_f[x, y, z] · F_b[x−i, y−j, z]` with out-of-bounds
//! background reads contributing zero; offsets map to channel
//! `(i+d)·(2d+1) + (j+d)`.

use rand_chacha::ChaCha8Rng;

use crate::encoder::he_uniform;
use crate::numerics::conv2d;
use crate::numerics::graph::{Graph, Op, OpCtx, Tx};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Negative slope shared by every activation in the model.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Learnable tensors of the context-relation encoder.
#[derive(Clone, Debug)]
pub struct CreParams<F> {
    /// Foreground-stream 3×3 conv `[3, 3, z, z]`, bias-free.
    pub phi_f: Tensor<F>,
    /// Background-stream 3×3 conv `[3, 3, z, z]`, bias-free.
    pub phi_b: Tensor<F>,
    /// Fusion 1×1 conv `[1, 1, z + (2d+1)², z]`.
    pub fuse_kernels: Tensor<F>,
    /// Fusion bias `[z]`.
    pub fuse_bias: Tensor<F>,
    /// Displacement radius of the correlation window.
    pub d: usize,
}

impl<F: Scalar> CreParams<F> {
    /// He-uniform initialized parameters for feature width `z` and radius `d`.
    pub fn init(z: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let corr = (2 * d + 1) * (2 * d + 1);
        CreParams {
            phi_f: he_uniform(vec![3, 3, z, z], 9 * z, rng),
            phi_b: he_uniform(vec![3, 3, z, z], 9 * z, rng),
            fuse_kernels: he_uniform(vec![1, 1, z + corr, z], z + corr, rng),
            fuse_bias: Tensor::zeros(vec![z]),
            d,
        }
    }

    /// Feature width `z` this parameter set was built for.
    pub fn z(&self) -> usize {
        self.phi_f.shape()[3]
    }
}

/// Tape handles of [`CreParams`] after insertion into a graph.
#[derive(Clone, Copy, Debug)]
pub struct CreRefs {
    pub phi_f: Tx,
    pub phi_b: Tx,
    pub fuse_kernels: Tx,
    pub fuse_bias: Tx,
}

impl<F: Scalar> CreParams<F> {
    /// Inserts all parameter tensors as graph leaves.
    pub fn insert(&self, g: &mut Graph<F>) -> CreRefs {
        CreRefs {
            phi_f: g.leaf(self.phi_f.clone()),
            phi_b: g.leaf(self.phi_b.clone()),
            fuse_kernels: g.leaf(self.fuse_kernels.clone()),
            fuse_bias: g.leaf(self.fuse_bias.clone()),
        }
    }
}

/// Bounded-displacement correlation volume between the two streams.
///
/// Output has `(2d+1)²` channels; see the module docs for the exact formula.
pub fn correlate<F: Scalar>(ff: &Tensor<F>, fb: &Tensor<F>, d: usize) -> Result<Tensor<F>> {
    let (h, w, z) = ff.dims3()?;
    if fb.shape() != ff.shape() {
        return Err(Error::shape(format!(
            "correlate stream shapes differ: {:?} vs {:?}",
            ff.shape(),
            fb.shape()
        )));
    }
    let side = 2 * d + 1;
    let cq = side * side;
    let fv = ff.values();
    let bv = fb.values();
    let di = d as isize;
    let mut out = vec![F::zero(); h * w * cq];
    for y in 0..h {
        for x in 0..w {
            let obase = (y * w + x) * cq;
            let frow = &fv[(y * w + x) * z..(y * w + x + 1) * z];
            for i in -di..=di {
                let sy = y as isize - i;
                if sy < 0 || sy >= h as isize {
                    continue; // whole offset row reads out of bounds → stays zero
                }
                for j in -di..=di {
                    let sx = x as isize - j;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let q = ((i + di) * side as isize + (j + di)) as usize;
                    let brow = &bv[(sy as usize * w + sx as usize) * z
                        ..(sy as usize * w + sx as usize + 1) * z];
                    let mut acc = F::zero();
                    for (&a, &b) in frow.iter().zip(brow) {
                        acc = a.mul_add(b, acc);
                    }
                    out[obase + q] = acc;
                }
            }
        }
    }
    Tensor::new(vec![h, w, cq], out)
}

/// Gradients of [`correlate`] with respect to both streams.
pub fn correlate_backward<F: Scalar>(
    ff: &Tensor<F>,
    fb: &Tensor<F>,
    grad: &Tensor<F>,
    d: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (h, w, z) = ff.dims3()?;
    let side = 2 * d + 1;
    let di = d as isize;
    let fv = ff.values();
    let bv = fb.values();
    let gv = grad.values();
    let cq = side * side;

    // dF_f[y, x, z] = Σ_{i,j in bounds} g[y, x, q(i,j)] · F_b[y−i, x−j, z]
    let mut dff = vec![F::zero(); h * w * z];
    // dF_b[u, v, z] = Σ_{i,j : (u+i, v+j) in bounds} g[u+i, v+j, q(i,j)] · F_f[u+i, v+j, z]
    let mut dfb = vec![F::zero(); h * w * z];
    for y in 0..h {
        for x in 0..w {
            let gbase = (y * w + x) * cq;
            let facc = &mut dff[(y * w + x) * z..(y * w + x + 1) * z];
            for i in -di..=di {
                let sy = y as isize - i;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in -di..=di {
                    let sx = x as isize - j;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let q = ((i + di) * side as isize + (j + di)) as usize;
                    let g = gv[gbase + q];
                    let bbase = (sy as usize * w + sx as usize) * z;
                    let brow = &bv[bbase..bbase + z];
                    for (a, &b) in facc.iter_mut().zip(brow) {
                        *a = g.mul_add(b, *a);
                    }
                }
            }
        }
    }
    for u in 0..h {
        for v in 0..w {
            let bacc = &mut dfb[(u * w + v) * z..(u * w + v + 1) * z];
            for i in -di..=di {
                let y = u as isize + i;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in -di..=di {
                    let x = v as isize + j;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let q = ((i + di) * side as isize + (j + di)) as usize;
                    let pix = y as usize * w + x as usize;
                    let g = gv[pix * cq + q];
                    let frow = &fv[pix * z..(pix + 1) * z];
                    for (a, &f) in bacc.iter_mut().zip(frow) {
                        *a = g.mul_add(f, *a);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![h, w, z], dff)?, Tensor::new(vec![h, w, z], dfb)?))
}

struct CorrelateOp {
    d: usize,
}

impl<F: Scalar> Op<F> for CorrelateOp {
    fn name(&self) -> &'static str {
        "correlate"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let (dff, dfb) = correlate_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, self.d)
            .expect("shapes validated at forward time");
        vec![dff, dfb]
    }
}

/// Records a correlation node on the tape.
pub fn correlate_node<F: Scalar>(g: &mut Graph<F>, ff: Tx, fb: Tx, d: usize) -> Result<Tx> {
    let out = correlate(g.value(ff), g.value(fb), d)?;
    Ok(g.push(out, vec![ff, fb], Box::new(CorrelateOp { d })))
}

/// Records the masked two-stream split: `(φ_f(F ⊙ m), φ_b(F ⊙ (1−m)))`.
pub fn split_features_node<F: Scalar>(
    g: &mut Graph<F>,
    features: Tx,
    mask: Tx,
    phi_f: Tx,
    phi_b: Tx,
) -> Result<(Tx, Tx)> {
    let fg_in = g.mul_bcast(features, mask)?;
    let inv_mask = g.affine(mask, -1.0, 1.0)?;
    let bg_in = g.mul_bcast(features, inv_mask)?;
    let ff = g.conv2d(fg_in, phi_f, None, 1, 1)?;
    let fb = g.conv2d(bg_in, phi_b, None, 1, 1)?;
    Ok((ff, fb))
}

/// Records the fusion head: `leaky(conv1x1([F_f ‖ C]) + bias)`.
pub fn fuse_node<F: Scalar>(
    g: &mut Graph<F>,
    ff: Tx,
    corr: Tx,
    fuse_kernels: Tx,
    fuse_bias: Tx,
) -> Result<Tx> {
    let cat = g.concat_channels(ff, corr)?;
    let mixed = g.conv2d(cat, fuse_kernels, Some(fuse_bias), 1, 0)?;
    g.leaky_relu(mixed, LEAKY_SLOPE)
}

/// Records the full context-relation encoding of `features` under `mask`.
pub fn cre_forward_node<F: Scalar>(
    g: &mut Graph<F>,
    refs: CreRefs,
    d: usize,
    features: Tx,
    mask: Tx,
) -> Result<Tx> {
    let (ff, fb) = split_features_node(g, features, mask, refs.phi_f, refs.phi_b)?;
    let corr = correlate_node(g, ff, fb, d)?;
    fuse_node(g, ff, corr, refs.fuse_kernels, refs.fuse_bias)
}

/// Pure-tensor variants of the composite stages (scratch graph internally).
pub fn split_features<F: Scalar>(
    features: &Tensor<F>,
    mask: &Tensor<F>,
    params: &CreParams<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut g = Graph::new();
    let f = g.leaf(features.clone());
    let m = g.leaf(mask.clone());
    let pf = g.leaf(params.phi_f.clone());
    let pb = g.leaf(params.phi_b.clone());
    let (ff, fb) = split_features_node(&mut g, f, m, pf, pb)?;
    Ok((g.value(ff).clone(), g.value(fb).clone()))
}

/// Context-relation encoding as a pure tensor function.
pub fn cre_forward<F: Scalar>(
    features: &Tensor<F>,
    mask: &Tensor<F>,
    params: &CreParams<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let f = g.leaf(features.clone());
    let m = g.leaf(mask.clone());
    let refs = params.insert(&mut g);
    let out = cre_forward_node(&mut g, refs, params.d, f, m)?;
    Ok(g.value(out).clone())
}

/// Fusion as a pure tensor function (used by shape tests).
pub fn fuse<F: Scalar>(
    ff: &Tensor<F>,
    corr: &Tensor<F>,
    fuse_kernels: &Tensor<F>,
    fuse_bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let cat = {
        let mut g = Graph::new();
        let a = g.leaf(ff.clone());
        let b = g.leaf(corr.clone());
        let c = g.concat_channels(a, b)?;
        g.value(c).clone()
    };
    let mut out = conv2d(&cat, fuse_kernels, Some(fuse_bias), 1, 0)?;
    let slope = crate::numerics::num::<F>(LEAKY_SLOPE);
    for v in out.values_mut() {
        if *v <= F::zero() {
            *v = *v * slope;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(z: usize, d: usize, seed: u64) -> CreParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CreParams::init(z, d, &mut rng)
    }

    #[test]
    fn correlate_all_ones_5x5_d1_center_and_corner() {
        let ones = Tensor::full(vec![5, 5, 1], 1.0f64);
        let c = correlate(&ones, &ones, 1).unwrap();
        assert_eq!(c.shape(), &[5, 5, 9]);
        // Center pixel: every displaced read is in bounds → all 9 channels are 1.
        for q in 0..9 {
            assert_eq!(c.at3(2, 2, q), 1.0, "center channel {q}");
        }
        // Corner (0,0): offset (−1,−1) reads (1,1) → 1; offset (1,1) reads (−1,−1) → 0.
        let idx = |i: isize, j: isize| ((i + 1) * 3 + (j + 1)) as usize;
        assert_eq!(c.at3(0, 0, idx(-1, -1)), 1.0);
        assert_eq!(c.at3(0, 0, idx(1, 1)), 0.0);
    }

    #[test]
    fn correlate_channel_count_is_window_squared() {
        let f = Tensor::full(vec![4, 4, 3], 0.5f64);
        for d in 0..4 {
            let c = correlate(&f, &f, d).unwrap();
            assert_eq!(c.shape()[2], (2 * d + 1) * (2 * d + 1));
        }
    }

    #[test]
    fn correlation_vanishes_for_all_ones_and_all_zero_masks() {
        let p = params(4, 2, 9);
        let feats = Tensor::from_fn(vec![6, 6, 4], |i| (i as f64 * 0.13).sin());
        for mask_val in [0.0f64, 1.0] {
            let mask = Tensor::full(vec![6, 6, 1], mask_val);
            let (ff, fb) = split_features(&feats, &mask, &p).unwrap();
            let c = correlate(&ff, &fb, p.d).unwrap();
            assert!(
                c.values().iter().all(|&v| v == 0.0),
                "mask {mask_val}: correlation must vanish (one stream is zero)"
            );
        }
    }

    #[test]
    fn split_features_support_is_mask_dilated_by_one() {
        // Constant features with a centred 2×2 mask: the foreground stream may
        // be nonzero only inside the mask dilated by the 3×3 conv footprint.
        let p = params(2, 1, 11);
        let feats = Tensor::full(vec![6, 6, 2], 1.0f64);
        let mut mask = Tensor::zeros(vec![6, 6, 1]);
        for y in 2..4 {
            for x in 2..4 {
                let i = mask.index3(y, x, 0);
                mask.values_mut()[i] = 1.0;
            }
        }
        let (ff, _) = split_features(&feats, &mask, &p).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let in_dilation = (1..5).contains(&y) && (1..5).contains(&x);
                if !in_dilation {
                    for ch in 0..2 {
                        assert_eq!(ff.at3(y, x, ch), 0.0, "({y},{x},{ch}) outside dilation");
                    }
                }
            }
        }
        // The dilated interior does carry energy.
        assert!((0..2).any(|ch| ff.at3(2, 2, ch) != 0.0));
    }

    #[test]
    fn fuse_of_zero_inputs_is_leaky_bias() {
        let z = 3;
        let mut p = params(z, 1, 13);
        p.fuse_bias = Tensor::new(vec![z], vec![0.5, -2.0, 0.0]).unwrap();
        let ff = Tensor::zeros(vec![3, 3, z]);
        let corr = Tensor::zeros(vec![3, 3, 9]);
        let out = fuse(&ff, &corr, &p.fuse_kernels, &p.fuse_bias).unwrap();
        for px in 0..9 {
            assert_eq!(out.values()[px * z], 0.5);
            assert_eq!(out.values()[px * z + 1], -0.2); // leaky slope 0.1
            assert_eq!(out.values()[px * z + 2], 0.0);
        }
    }

    #[test]
    fn cre_forward_keeps_z_channels_for_any_radius() {
        let feats = Tensor::from_fn(vec![4, 4, 5], |i| (i as f64 * 0.31).cos());
        let mask = Tensor::from_fn(vec![4, 4, 1], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        for d in [0usize, 1, 3] {
            let p = params(5, d, 17);
            let out = cre_forward(&feats, &mask, &p).unwrap();
            assert_eq!(out.shape(), &[4, 4, 5], "d={d}");
            let fuse_in = p.fuse_kernels.shape()[2];
            assert_eq!(fuse_in, 5 + (2 * d + 1) * (2 * d + 1), "d={d}");
        }
    }

    #[test]
    fn correlate_rejects_mismatched_streams() {
        let a = Tensor::<f64>::zeros(vec![3, 3, 2]);
        let b = Tensor::<f64>::zeros(vec![3, 4, 2]);
        assert!(correlate(&a, &b, 1).is_err());
    }
}
