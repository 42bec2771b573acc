//! Named finite-difference checks for every differentiable stage.
//!
//! Each case builds a small 64-bit fixture, runs the central-difference
//! harness from [`crate::numerics::gradcheck`], and reports the worst relative
//! error. The `forward` case wires a complete two-iteration episode and probes
//! every parameter tensor of the model, so tape wiring across module
//! boundaries is covered, not just each op in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cre::{correlate_node, fuse_node, split_features_node, CreRefs};
use crate::encoder::EncoderRefs;
use crate::numerics::gradcheck::{gradcheck, GradCheckReport, GradCheckSettings};
use crate::numerics::tensor::Tensor;
use crate::proto::{compute_prototypes_node, cosine_head_node, ProtoRefs};
use crate::refine::{forward_nodes, M0Mode, Model, ModelConfig, ModelRefs};
use crate::train::{ce_loss_node, dice_loss_node};
use crate::{Error, Result};

/// Names accepted by [`run_case`], in suite order.
pub const OP_NAMES: [&str; 10] =
    ["conv", "resize", "corr", "split", "fuse", "proto", "cosine", "dice", "ce", "forward"];

/// Uniform values in `±[0.1, 1.0)`: bounded away from zero so piecewise ops
/// stay on one branch under the probe step.
fn signed(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Uniform values in `[lo, hi)`.
fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Two-channel field whose channels sum to 1 per pixel, kept strictly inside
/// (0, 1) so the cross-entropy clamp never activates under probing.
fn soft_pair(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let fg = uniform(vec![h, w, 1], 0.05, 0.95, rng);
    Tensor::from_fn(vec![h, w, 2], |i| {
        let px = i / 2;
        if i % 2 == 0 {
            1.0 - fg.values()[px]
        } else {
            fg.values()[px]
        }
    })
}

fn one_hot_pair(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let fg = Tensor::from_fn(vec![h, w, 1], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    Tensor::from_fn(vec![h, w, 2], |i| {
        let px = i / 2;
        if i % 2 == 0 {
            1.0 - fg.values()[px]
        } else {
            fg.values()[px]
        }
    })
}

/// Runs one named case. Unknown names raise [`Error::Config`].
pub fn run_case(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let settings = GradCheckSettings { seed, ..GradCheckSettings::default() };
    match name {
        "conv" => {
            let x = signed(vec![6, 6, 3], &mut rng);
            let k = signed(vec![3, 3, 3, 4], &mut rng);
            let b = signed(vec![4], &mut rng);
            gradcheck("conv", &[x, k, b], &settings, |g, l| {
                g.conv2d(l[0], l[1], Some(l[2]), 1, 1)
            })
        }
        "resize" => {
            let x = signed(vec![4, 5, 3], &mut rng);
            gradcheck("resize", &[x], &settings, |g, l| g.bilinear_resize(l[0], 7, 6))
        }
        "corr" => {
            let ff = signed(vec![5, 5, 3], &mut rng);
            let fb = signed(vec![5, 5, 3], &mut rng);
            gradcheck("corr", &[ff, fb], &settings, |g, l| correlate_node(g, l[0], l[1], 2))
        }
        "split" => {
            let f = signed(vec![5, 5, 4], &mut rng);
            let m = uniform(vec![5, 5, 1], 0.1, 0.9, &mut rng);
            let pf = signed(vec![1, 1, 4, 4], &mut rng);
            let pb = signed(vec![1, 1, 4, 4], &mut rng);
            gradcheck("split", &[f, m, pf, pb], &settings, |g, l| {
                let (ff, fb) = split_features_node(g, l[0], l[1], l[2], l[3])?;
                g.add(ff, fb)
            })
        }
        "fuse" => {
            let ff = signed(vec![4, 4, 3], &mut rng);
            let corr = signed(vec![4, 4, 9], &mut rng);
            let k = signed(vec![1, 1, 12, 3], &mut rng);
            let b = signed(vec![3], &mut rng);
            gradcheck("fuse", &[ff, corr, k, b], &settings, |g, l| {
                fuse_node(g, l[0], l[1], l[2], l[3])
            })
        }
        "proto" => {
            let f1 = signed(vec![4, 4, 3], &mut rng);
            let f2 = signed(vec![4, 4, 3], &mut rng);
            let m1 = uniform(vec![4, 4, 1], 0.2, 0.8, &mut rng);
            let m2 = uniform(vec![4, 4, 1], 0.2, 0.8, &mut rng);
            gradcheck("proto", &[f1, f2, m1, m2], &settings, |g, l| {
                let protos = compute_prototypes_node(g, &[l[0], l[1]], &[l[2], l[3]], 1e-6)?;
                g.add(protos.p_fg, protos.p_bg)
            })
        }
        "cosine" => {
            let f = signed(vec![4, 4, 3], &mut rng);
            let p_fg = signed(vec![3], &mut rng);
            let p_bg = signed(vec![3], &mut rng);
            // Sharpness 2, not the production 20: the two-channel softmax sums
            // to 1 per pixel, so the check reduces over the foreground channel
            // only, and a saturated head would leave that channel's numeric
            // differences below f64 rounding noise. The production sharpness
            // is still covered end to end by the `forward` case.
            gradcheck("cosine", &[f, p_fg, p_bg], &settings, |g, l| {
                let head = cosine_head_node(g, l[0], ProtoRefs { p_fg: l[1], p_bg: l[2] }, 2.0)?;
                g.channel_slice(head, 1)
            })
        }
        "dice" => {
            let m = soft_pair(4, 4, &mut rng);
            let y = one_hot_pair(4, 4, &mut rng);
            gradcheck("dice", &[m, y], &settings, |g, l| dice_loss_node(g, l[0], l[1], 1e-5))
        }
        "ce" => {
            let m = soft_pair(4, 4, &mut rng);
            let y = one_hot_pair(4, 4, &mut rng);
            gradcheck("ce", &[m, y], &settings, |g, l| ce_loss_node(g, l[0], l[1], 1e-7))
        }
        "forward" => forward_case(seed),
        other => Err(Error::Config(format!(
            "unknown gradient-check op {other:?}; expected one of {}",
            OP_NAMES.join("|")
        ))),
    }
}

/// Full two-iteration episode at 16×16 with a z=8, d=2 model; probes every
/// parameter tensor through the complete pipeline, loss = Σ final mask.
fn forward_case(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        z: 8,
        d: 2,
        alpha: 20.0,
        t_train: 2,
        t_infer: 2,
        m0_mode: M0Mode::Union,
        recurse_binary: false,
    };
    let model = Model::<f64>::init(config, seed.wrapping_add(17));
    let inputs: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let support_image = uniform(vec![16, 16, 1], 0.0, 1.0, &mut rng);
    let query_image = uniform(vec![16, 16, 1], 0.0, 1.0, &mut rng);
    // Centered 8×8 square: after 4× downsampling this leaves 4 foreground and
    // 12 background cells, so prototypes are well defined.
    let support_mask = Tensor::from_fn(vec![16, 16, 1], |i| {
        let (r, c) = (i / 16, i % 16);
        if (4..12).contains(&r) && (4..12).contains(&c) {
            1.0
        } else {
            0.0
        }
    });
    let support = vec![(support_image, support_mask)];

    // Probing all ~20k parameters would cost minutes; a seeded subsample per
    // tensor still touches every block while keeping the suite interactive.
    let settings =
        GradCheckSettings { max_probes_per_input: 40, seed, ..GradCheckSettings::default() };
    gradcheck("forward", &inputs, &settings, move |g, leaves| {
        let blocks: Vec<(crate::numerics::graph::Tx, crate::numerics::graph::Tx)> =
            (0..6).map(|i| (leaves[2 * i], leaves[2 * i + 1])).collect();
        let refs = ModelRefs {
            encoder: EncoderRefs { blocks, lateral: (leaves[12], leaves[13]) },
            cre: CreRefs {
                phi_f: leaves[14],
                phi_b: leaves[15],
                fuse_kernels: leaves[16],
                fuse_bias: leaves[17],
            },
        };
        let nodes = forward_nodes(g, &refs, &config, &support, &query_image, 2)?;
        Ok(nodes.final_fullres)
    })
}

/// Runs every named case in suite order.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    OP_NAMES.iter().map(|name| run_case(name, seed)).collect()
}
