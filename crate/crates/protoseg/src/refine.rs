//! The composite segmentation model and its recurrent refinement loop.
//!
//! One encoder and one context-relation encoder are shared across every
//! refinement iteration, so the trainable parameter count does not depend on
//! the iteration budget. Per episode the support side runs once — features,
//! relation encoding, prototypes — and the query side then alternates between
//! relation encoding under the current mask estimate and prototype matching,
//! feeding each soft foreground map into the next iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cre::{cre_forward_node, CreParams, CreRefs};
use crate::data::{
    average_mask, binarize_mask, downsample_mask, initial_mask, affine_align, Episode,
};
use crate::encoder::{encode_node, trunk_plan, ConvBlock, EncoderParams, EncoderRefs};
use crate::numerics::graph::{Graph, Tx};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::proto::{compute_prototypes_node, cosine_head_node};
use crate::{Error, Result};

/// Mass tolerance when deciding a support mask region is empty.
pub const MASK_EPS: f64 = 1e-6;
/// Spatial reduction between image and feature resolution.
pub const FEATURE_STRIDE: usize = 4;

/// How the initial query mask is built from the aligned support masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M0Mode {
    /// Pixelwise union (maximum) of the aligned support masks.
    Union,
    /// Pixelwise average, thresholded after downsampling.
    Average,
}

/// Architecture and inference knobs of the model.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    /// Feature channel width of the encoder output.
    pub z: usize,
    /// Correlation displacement radius.
    pub d: usize,
    /// Cosine logit scale.
    pub alpha: f64,
    /// Refinement iterations during training.
    pub t_train: usize,
    /// Refinement iterations during inference.
    pub t_infer: usize,
    pub m0_mode: M0Mode,
    /// Re-binarize the mask between iterations instead of feeding the soft
    /// foreground map (cuts gradient flow across iterations).
    pub recurse_binary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            z: 32,
            d: 5,
            alpha: 20.0,
            t_train: 4,
            t_infer: 10,
            m0_mode: M0Mode::Union,
            recurse_binary: false,
        }
    }
}

/// The full trainable model: encoder plus context-relation encoder.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub encoder: EncoderParams<F>,
    pub cre: CreParams<F>,
    pub config: ModelConfig,
}

/// Tape handles of all model parameters in one graph.
#[derive(Clone, Debug)]
pub struct ModelRefs {
    pub encoder: EncoderRefs,
    pub cre: CreRefs,
}

impl ModelRefs {
    /// Parameter handles in serialization order (matches [`Model::params`]).
    pub fn param_handles(&self) -> Vec<Tx> {
        let mut v = Vec::new();
        for &(k, b) in &self.encoder.blocks {
            v.push(k);
            v.push(b);
        }
        v.push(self.encoder.lateral.0);
        v.push(self.encoder.lateral.1);
        v.push(self.cre.phi_f);
        v.push(self.cre.phi_b);
        v.push(self.cre.fuse_kernels);
        v.push(self.cre.fuse_bias);
        v
    }
}

/// Names and shapes of every parameter tensor, in serialization order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (z, d) = (config.z, config.d);
    let mut layout = Vec::new();
    for (i, (ci, co)) in trunk_plan(z).into_iter().enumerate() {
        layout.push((format!("enc.block{i}.kernels"), vec![3, 3, ci, co]));
        layout.push((format!("enc.block{i}.bias"), vec![co]));
    }
    layout.push(("enc.lateral.kernels".into(), vec![1, 1, 32, z]));
    layout.push(("enc.lateral.bias".into(), vec![z]));
    let corr = (2 * d + 1) * (2 * d + 1);
    layout.push(("cre.phi_f".into(), vec![3, 3, z, z]));
    layout.push(("cre.phi_b".into(), vec![3, 3, z, z]));
    layout.push(("cre.fuse.kernels".into(), vec![1, 1, z + corr, z]));
    layout.push(("cre.fuse.bias".into(), vec![z]));
    layout
}

impl<F: Scalar> Model<F> {
    /// Fresh He-uniform model, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = crate::encoder::init_encoder_with(config.z, &mut rng);
        let cre = CreParams::init(config.z, config.d, &mut rng);
        Model { encoder, cre, config }
    }

    /// Rebuilds a model from parameter tensors in serialization order.
    pub fn from_params(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        let layout = param_layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), tensor) in layout.iter().zip(&tensors) {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let blocks = (0..6).map(|_| ConvBlock { kernels: next(), bias: next() }).collect();
        let lateral = ConvBlock { kernels: next(), bias: next() };
        let cre = CreParams {
            phi_f: next(),
            phi_b: next(),
            fuse_kernels: next(),
            fuse_bias: next(),
            d: config.d,
        };
        Ok(Model { encoder: EncoderParams { blocks, lateral }, cre, config })
    }

    /// Parameter tensors in serialization order.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut v: Vec<&Tensor<F>> = Vec::new();
        for b in &self.encoder.blocks {
            v.push(&b.kernels);
            v.push(&b.bias);
        }
        v.push(&self.encoder.lateral.kernels);
        v.push(&self.encoder.lateral.bias);
        v.push(&self.cre.phi_f);
        v.push(&self.cre.phi_b);
        v.push(&self.cre.fuse_kernels);
        v.push(&self.cre.fuse_bias);
        v
    }

    /// Mutable view of the parameters, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v: Vec<&mut Tensor<F>> = Vec::new();
        for b in &mut self.encoder.blocks {
            v.push(&mut b.kernels);
            v.push(&mut b.bias);
        }
        v.push(&mut self.encoder.lateral.kernels);
        v.push(&mut self.encoder.lateral.bias);
        v.push(&mut self.cre.phi_f);
        v.push(&mut self.cre.phi_b);
        v.push(&mut self.cre.fuse_kernels);
        v.push(&mut self.cre.fuse_bias);
        v
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Inserts every parameter as a graph leaf.
    pub fn insert(&self, g: &mut Graph<F>) -> ModelRefs {
        ModelRefs { encoder: self.encoder.insert(g), cre: self.cre.insert(g) }
    }

    /// Converts all parameters to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let tensors = self.params().iter().map(|p| p.cast()).collect();
        Model::from_params(self.config, tensors).expect("layout is preserved by casting")
    }

    /// Consistency between the config and the actual parameter shapes.
    pub fn validate(&self) -> Result<()> {
        if self.encoder.z() != self.config.z || self.cre.z() != self.config.z {
            return Err(Error::Config(format!(
                "feature width mismatch: config {} vs encoder {} / cre {}",
                self.config.z,
                self.encoder.z(),
                self.cre.z()
            )));
        }
        if self.cre.d != self.config.d {
            return Err(Error::Config(format!(
                "correlation radius mismatch: config {} vs cre {}",
                self.config.d, self.cre.d
            )));
        }
        if self.config.t_train == 0 || self.config.t_infer == 0 {
            return Err(Error::Config("iteration counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration soft masks plus the upsampled final prediction.
#[derive(Clone, Debug)]
pub struct RefinementTrace<F: Scalar> {
    /// One `[h/4, w/4, 2]` normalized soft mask per iteration.
    pub soft_masks: Vec<Tensor<F>>,
    /// Foreground probability of the last iteration, bilinearly upsampled to
    /// image resolution, values in `[0, 1]`.
    pub final_fullres: Tensor<F>,
    /// Full-resolution initial query mask (union or average of the supports).
    pub m0: Tensor<F>,
    /// Number of supports whose aligned mask collapsed out of frame and fell
    /// back to the untransformed mask (only counted by [`predict`]).
    pub collapse_warnings: usize,
}

/// Graph handles produced by [`forward_nodes`], for callers that attach
/// losses on top of the forward pass.
pub struct ForwardNodes<F: Scalar> {
    /// Soft mask node per iteration, each `[h/4, w/4, 2]`.
    pub soft_masks: Vec<Tx>,
    /// Final full-resolution foreground map node `[h, w, 1]`.
    pub final_fullres: Tx,
    /// Encoded query features.
    pub query_feat: Tx,
    /// Encoded support features, one per shot.
    pub support_feats: Vec<Tx>,
    /// Leaves of the soft downsampled support masks, one per shot.
    pub support_masks_ds: Vec<Tx>,
    /// Full-resolution initial mask (value level, not a node).
    pub m0: Tensor<F>,
}

/// Records the whole episode forward pass (support side + `t` refinement
/// iterations) on an existing graph. Supports must already be aligned into
/// the query frame.
pub fn forward_nodes<F: Scalar>(
    g: &mut Graph<F>,
    refs: &ModelRefs,
    config: &ModelConfig,
    support: &[(Tensor<F>, Tensor<F>)],
    query_image: &Tensor<F>,
    t: usize,
) -> Result<ForwardNodes<F>> {
    if t == 0 {
        return Err(Error::Config("forward needs t ≥ 1 iterations".into()));
    }
    if support.is_empty() {
        return Err(Error::Config("forward needs at least one support".into()));
    }
    let (h, w, _) = query_image.dims3()?;
    for (img, mask) in support {
        if img.shape() != query_image.shape() || mask.shape() != query_image.shape() {
            return Err(Error::shape(format!(
                "support shapes {:?}/{:?} must match query {:?}",
                img.shape(),
                mask.shape(),
                query_image.shape()
            )));
        }
    }

    // Support side, once: encode, relation-encode under the true mask,
    // pool prototypes. The prototypes stay fixed across iterations.
    let mut support_feats = Vec::with_capacity(support.len());
    let mut support_masks_ds = Vec::with_capacity(support.len());
    let mut support_cre = Vec::with_capacity(support.len());
    for (img, mask) in support {
        let img_leaf = g.leaf(img.clone());
        let feat = encode_node(g, &refs.encoder, img_leaf)?;
        let mask_ds = g.leaf(downsample_mask(mask, FEATURE_STRIDE)?);
        let cre_feat = cre_forward_node(g, refs.cre, config.d, feat, mask_ds)?;
        support_feats.push(feat);
        support_masks_ds.push(mask_ds);
        support_cre.push(cre_feat);
    }
    let protos = compute_prototypes_node(g, &support_cre, &support_masks_ds, MASK_EPS)?;

    let query_leaf = g.leaf(query_image.clone());
    let query_feat = encode_node(g, &refs.encoder, query_leaf)?;

    // Initial query mask from the aligned support masks.
    let support_masks: Vec<Tensor<F>> = support.iter().map(|(_, m)| m.clone()).collect();
    let m0 = match config.m0_mode {
        M0Mode::Union => initial_mask(&support_masks)?,
        M0Mode::Average => average_mask(&support_masks)?,
    };
    let mut m_cur = g.leaf(binarize_mask(&downsample_mask(&m0, FEATURE_STRIDE)?));

    let mut soft_masks = Vec::with_capacity(t);
    let mut last_fg = None;
    for _ in 0..t {
        let cre_q = cre_forward_node(g, refs.cre, config.d, query_feat, m_cur)?;
        let soft = cosine_head_node(g, cre_q, protos, config.alpha)?;
        soft_masks.push(soft);
        let fg = g.channel_slice(soft, 1)?;
        last_fg = Some(fg);
        m_cur = if config.recurse_binary {
            // Deliberate tape cut: the next iteration sees a constant mask.
            g.leaf(binarize_mask(g.value(fg)))
        } else {
            fg
        };
    }
    let final_fullres = g.bilinear_resize(last_fg.expect("t >= 1"), h, w)?;

    Ok(ForwardNodes {
        soft_masks,
        final_fullres,
        query_feat,
        support_feats,
        support_masks_ds,
        m0,
    })
}

/// Runs the refinement forward pass on an already aligned episode.
pub fn forward<F: Scalar>(
    model: &Model<F>,
    episode: &Episode<F>,
    t: usize,
) -> Result<RefinementTrace<F>> {
    model.validate()?;
    let mut g = Graph::new();
    let refs = model.insert(&mut g);
    let nodes =
        forward_nodes(&mut g, &refs, &model.config, &episode.support, &episode.query_image, t)?;
    Ok(RefinementTrace {
        soft_masks: nodes.soft_masks.iter().map(|&n| g.value(n).clone()).collect(),
        final_fullres: g.value(nodes.final_fullres).clone(),
        m0: nodes.m0,
        collapse_warnings: 0,
    })
}

/// Full inference: aligns each support onto the query, initializes the mask,
/// refines for `t_infer` iterations, and thresholds at 0.5 (ties →
/// foreground). Returns the binary full-resolution mask plus the trace.
pub fn predict<F: Scalar>(
    model: &Model<F>,
    support: &[(Tensor<F>, Tensor<F>)],
    query_image: &Tensor<F>,
) -> Result<(Tensor<F>, RefinementTrace<F>)> {
    let mut aligned = Vec::with_capacity(support.len());
    let mut collapse_warnings = 0usize;
    for (img, mask) in support {
        let a = affine_align(img, mask, query_image)?;
        if a.collapsed {
            collapse_warnings += 1;
        }
        aligned.push((a.image, a.mask));
    }
    let episode = Episode {
        support: aligned,
        query_image: query_image.clone(),
        query_mask: None,
        class_id: 0,
    };
    let mut trace = forward(model, &episode, model.config.t_infer)?;
    trace.collapse_warnings = collapse_warnings;
    let binary = binarize_mask(&trace.final_fullres);
    Ok((binary, trace))
}
