//! Shared convolutional feature encoder.
//!
//! A compact stack mapping an `H × W × 1` image to `H/4 × W/4 × Z` features:
//!
//! ```text
//! conv(1→16) → conv(16→16) → avgpool2 → conv(16→32) → conv(32→32) → avgpool2
//!          → conv(32→Z) → conv(Z→Z)  (+ lateral 1×1 from the pre-pool 32-ch map)
//! ```
//!
//! Every conv is 3×3 (stride 1, pad 1) followed by leaky ReLU (slope 0.1); the
//! lateral branch bilinearly resizes the map captured just before the second
//! pool to `H/4 × W/4`, mixes it with a 1×1 conv, and adds it to the trunk
//! output. Kernels are He-uniform initialized (`±√(6/fan_in)`), biases zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cre::LEAKY_SLOPE;
use crate::numerics::graph::{Graph, Tx};
use crate::numerics::tensor::{num, Scalar, Tensor};
use crate::{Error, Result};

/// He-uniform sample: every element uniform in `±√(6/fan_in)`.
///
/// Values are drawn in f64 and cast, so a fixed seed yields the same sequence
/// of parameters in both precisions (up to rounding).
pub fn he_uniform<F: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| num(rng.gen_range(-bound..bound)))
}

/// One conv layer's tensors: 3×3 (or 1×1 lateral) kernels plus bias.
#[derive(Clone, Debug)]
pub struct ConvBlock<F> {
    pub kernels: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> ConvBlock<F> {
    fn init(kh: usize, ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            kernels: he_uniform(vec![kh, kh, ci, co], kh * kh * ci, rng),
            bias: Tensor::zeros(vec![co]),
        }
    }
}

/// Learnable tensors of the encoder: six trunk convs plus the lateral 1×1.
#[derive(Clone, Debug)]
pub struct EncoderParams<F> {
    /// Trunk blocks in forward order: 1→16, 16→16, 16→32, 32→32, 32→Z, Z→Z.
    pub blocks: Vec<ConvBlock<F>>,
    /// Lateral 1×1 conv (32→Z) merging the pre-second-pool map.
    pub lateral: ConvBlock<F>,
}

/// Channel widths of the trunk for feature width `z`.
pub(crate) fn trunk_plan(z: usize) -> [(usize, usize); 6] {
    [(1, 16), (16, 16), (16, 32), (32, 32), (32, z), (z, z)]
}

/// He-uniform initialized encoder for feature width `z`, deterministic per seed.
pub fn init_encoder<F: Scalar>(z: usize, seed: u64) -> EncoderParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_encoder_with(z, &mut rng)
}

/// Same as [`init_encoder`] but drawing from a caller-provided stream.
pub fn init_encoder_with<F: Scalar>(z: usize, rng: &mut ChaCha8Rng) -> EncoderParams<F> {
    let blocks = trunk_plan(z).iter().map(|&(ci, co)| ConvBlock::init(3, ci, co, rng)).collect();
    let lateral = ConvBlock::init(1, 32, z, rng);
    EncoderParams { blocks, lateral }
}

impl<F: Scalar> EncoderParams<F> {
    /// Feature width `Z` of the final output.
    pub fn z(&self) -> usize {
        self.blocks[5].kernels.shape()[3]
    }

    /// Inserts all parameter tensors as graph leaves.
    pub fn insert(&self, g: &mut Graph<F>) -> EncoderRefs {
        EncoderRefs {
            blocks: self
                .blocks
                .iter()
                .map(|b| (g.leaf(b.kernels.clone()), g.leaf(b.bias.clone())))
                .collect(),
            lateral: (g.leaf(self.lateral.kernels.clone()), g.leaf(self.lateral.bias.clone())),
        }
    }
}

/// Tape handles of [`EncoderParams`] after insertion into a graph.
#[derive(Clone, Debug)]
pub struct EncoderRefs {
    pub blocks: Vec<(Tx, Tx)>,
    pub lateral: (Tx, Tx),
}

/// Records the encoder forward pass; `image` must be `[h, w, 1]` with both
/// spatial dims divisible by 4.
pub fn encode_node<F: Scalar>(g: &mut Graph<F>, refs: &EncoderRefs, image: Tx) -> Result<Tx> {
    let (h, w, c) = g.value(image).dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("encoder expects a single-channel image, got {c}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Divisibility(format!(
            "image dims must be divisible by 4, got {h}x{w}"
        )));
    }

    let conv = |g: &mut Graph<F>, x: Tx, block: (Tx, Tx)| -> Result<Tx> {
        let y = g.conv2d(x, block.0, Some(block.1), 1, 1)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    };

    let x = conv(g, image, refs.blocks[0])?;
    let x = conv(g, x, refs.blocks[1])?;
    let x = g.avg_pool2(x)?;
    let x = conv(g, x, refs.blocks[2])?;
    let pre_pool = conv(g, x, refs.blocks[3])?;
    let x = g.avg_pool2(pre_pool)?;
    let x = conv(g, x, refs.blocks[4])?;
    let trunk = conv(g, x, refs.blocks[5])?;

    let lat = g.bilinear_resize(pre_pool, h / 4, w / 4)?;
    let lat = g.conv2d(lat, refs.lateral.0, Some(refs.lateral.1), 1, 0)?;
    g.add(trunk, lat)
}

/// Encoder forward as a pure tensor function.
pub fn encode<F: Scalar>(params: &EncoderParams<F>, image: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let img = g.leaf(image.clone());
    let refs = params.insert(&mut g);
    let out = encode_node(&mut g, &refs, img)?;
    Ok(g.value(out).clone())
}
