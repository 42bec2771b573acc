//! Episodic training: segmentation losses, Adam, and the training loop.
//!
//! The segmentation loss is `β·dice + ce` on the final soft mask of the
//! refinement loop, evaluated at feature resolution against the one-hot
//! downsampled query mask. Dice is a single joint fraction over both channels;
//! cross-entropy is mean negative log-likelihood with probability clamping.
//! An optional alignment term re-runs the episode with roles swapped, using
//! the hard prediction as a stand-in support mask (no gradient through it).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cre::cre_forward_node;
use crate::data::{affine_align, binarize_mask, downsample_mask, sample_episode, ImageSample};
use crate::numerics::graph::{Graph, Op, OpCtx, Tx};
use crate::numerics::tensor::{num, Scalar, Tensor};
use crate::proto::{compute_prototypes_node, cosine_head_node, hard_mask};
use crate::refine::{forward_nodes, Model, ModelRefs, FEATURE_STRIDE, MASK_EPS};
use crate::{Error, Result};

fn check_loss_shapes<F: Scalar>(m: &Tensor<F>, y: &Tensor<F>) -> Result<()> {
    if m.shape() != y.shape() {
        return Err(Error::shape(format!(
            "mask/target shapes differ: {:?} vs {:?}",
            m.shape(),
            y.shape()
        )));
    }
    let (_, _, c) = m.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("losses expect 2 channels, got {c}")));
    }
    Ok(())
}

// ==== dice ====

/// Soft Dice loss `1 − 2·Σ m·y / (Σ m + Σ y + eps)`, summed jointly over both
/// channels; `eps` only stabilizes the denominator.
pub fn dice_loss<F: Scalar>(m: &Tensor<F>, y: &Tensor<F>, eps: f64) -> Result<F> {
    check_loss_shapes(m, y)?;
    let (mut inter, mut sm, mut sy) = (F::zero(), F::zero(), F::zero());
    for (&mv, &yv) in m.values().iter().zip(y.values()) {
        inter = mv.mul_add(yv, inter);
        sm = sm + mv;
        sy = sy + yv;
    }
    let two = num::<F>(2.0);
    Ok(F::one() - two * inter / (sm + sy + num::<F>(eps)))
}

struct DiceLossOp {
    eps: f64,
}

impl<F: Scalar> Op<F> for DiceLossOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let m = ctx.inputs[0];
        let y = ctx.inputs[1];
        let g = ctx.grad.values()[0];
        let (mut inter, mut sm, mut sy) = (F::zero(), F::zero(), F::zero());
        for (&mv, &yv) in m.values().iter().zip(y.values()) {
            inter = mv.mul_add(yv, inter);
            sm = sm + mv;
            sy = sy + yv;
        }
        let b = sm + sy + num::<F>(self.eps);
        let two = num::<F>(2.0);
        let inv_b2 = F::one() / (b * b);
        // ∂L/∂m_i = −2(y_i·B − A)/B²  and symmetrically for y.
        let mut dm = m.clone();
        dm.clear_grad();
        let mut dy = y.clone();
        dy.clear_grad();
        for ((dmv, dyv), (&mv, &yv)) in dm
            .values_mut()
            .iter_mut()
            .zip(dy.values_mut())
            .zip(m.values().iter().zip(y.values()))
        {
            *dmv = -g * two * (yv * b - inter) * inv_b2;
            *dyv = -g * two * (mv * b - inter) * inv_b2;
        }
        vec![dm, dy]
    }
}

/// Records the Dice loss as a scalar node.
pub fn dice_loss_node<F: Scalar>(g: &mut Graph<F>, m: Tx, y: Tx, eps: f64) -> Result<Tx> {
    let out = Tensor::scalar(dice_loss(g.value(m), g.value(y), eps)?);
    Ok(g.push(out, vec![m, y], Box::new(DiceLossOp { eps })))
}

// ==== cross-entropy ====

/// Mean negative log-likelihood `−(1/N)·Σ y·ln(clamp(m, eps, 1−eps))` over all
/// `N = h·w·2` elements.
pub fn ce_loss<F: Scalar>(m: &Tensor<F>, y: &Tensor<F>, eps: f64) -> Result<F> {
    check_loss_shapes(m, y)?;
    let (lo, hi) = (num::<F>(eps), F::one() - num::<F>(eps));
    let mut acc = F::zero();
    for (&mv, &yv) in m.values().iter().zip(y.values()) {
        if yv != F::zero() {
            acc = acc + yv * mv.max(lo).min(hi).ln();
        }
    }
    Ok(-acc / num::<F>(m.numel() as f64))
}

struct CeLossOp {
    eps: f64,
}

impl<F: Scalar> Op<F> for CeLossOp {
    fn name(&self) -> &'static str {
        "ce_loss"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let m = ctx.inputs[0];
        let y = ctx.inputs[1];
        let g = ctx.grad.values()[0];
        let (lo, hi) = (num::<F>(self.eps), F::one() - num::<F>(self.eps));
        let inv_n = F::one() / num::<F>(m.numel() as f64);
        let mut dm = m.clone();
        dm.clear_grad();
        let mut dy = y.clone();
        dy.clear_grad();
        for ((dmv, dyv), (&mv, &yv)) in dm
            .values_mut()
            .iter_mut()
            .zip(dy.values_mut())
            .zip(m.values().iter().zip(y.values()))
        {
            let clamped = mv.max(lo).min(hi);
            // Inside the clamp band the derivative is −y/(N·m); outside it is 0.
            *dmv = if mv > lo && mv < hi { -g * yv / clamped * inv_n } else { F::zero() };
            *dyv = -g * clamped.ln() * inv_n;
        }
        vec![dm, dy]
    }
}

/// Records the cross-entropy loss as a scalar node.
pub fn ce_loss_node<F: Scalar>(g: &mut Graph<F>, m: Tx, y: Tx, eps: f64) -> Result<Tx> {
    let out = Tensor::scalar(ce_loss(g.value(m), g.value(y), eps)?);
    Ok(g.push(out, vec![m, y], Box::new(CeLossOp { eps })))
}

/// Records the combined segmentation loss `β·dice + ce`.
pub fn seg_loss_node<F: Scalar>(
    g: &mut Graph<F>,
    m: Tx,
    y: Tx,
    beta: f64,
    eps_dice: f64,
    eps_ce: f64,
) -> Result<Tx> {
    let dice = dice_loss_node(g, m, y, eps_dice)?;
    let ce = ce_loss_node(g, m, y, eps_ce)?;
    let scaled = g.affine(dice, beta, 0.0)?;
    g.add(scaled, ce)
}

// ==== Adam ====

/// First/second-moment buffers for one flat parameter list.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    /// Completed steps (bias correction uses `t + 1` during the update).
    pub t: u64,
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<F: Scalar> AdamState<F> {
    /// Zeroed state matching the given parameter tensors.
    pub fn new(params: &[&Tensor<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; `grads` align with `params` by position.
pub fn adam_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam arity mismatch: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (num::<F>(cfg.beta1), num::<F>(cfg.beta2));
    let (omb1, omb2) = (F::one() - b1, F::one() - b2);
    let corr1 = F::one() - b1.powi(t);
    let corr2 = F::one() - b2.powi(t);
    let lr = num::<F>(lr);
    let eps = num::<F>(cfg.eps);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.numel() != g.numel() {
            return Err(Error::shape("adam: gradient/parameter size mismatch"));
        }
        for ((pv, &gv), (mv, vv)) in
            p.values_mut().iter_mut().zip(g.values()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + omb1 * gv;
            *vv = b2 * *vv + omb2 * gv * gv;
            let mhat = *mv / corr1;
            let vhat = *vv / corr2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Step-decayed learning rate: `base · factor^(epoch / every)`.
pub fn lr_at(epoch: usize, base: f64, factor: f64, every: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((epoch / every) as i32)
}

// ==== training loop ====

/// Hyper-parameters of the episodic training loop.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Weight of the Dice term in the segmentation loss.
    pub beta: f64,
    /// Refinement iterations per training episode.
    pub t_train: usize,
    pub episodes_per_epoch: usize,
    pub seed: u64,
    /// Adds the role-reversal loss (predicted query mask as pseudo support).
    pub align_loss: bool,
    /// Class excluded from every training episode.
    pub holdout_class: usize,
    /// Supports per episode; the role-reversal loss requires 1.
    pub k_shots: usize,
    pub eps_ce: f64,
    pub eps_dice: f64,
}

impl TrainConfig {
    /// Defaults matching the reference schedule, parameterized by split seed
    /// and holdout class.
    pub fn new(holdout_class: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 50,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            beta: 1.0,
            t_train: 4,
            episodes_per_epoch: 200,
            seed,
            align_loss: true,
            holdout_class,
            k_shots: 1,
            eps_ce: 1e-7,
            eps_dice: 1e-5,
        }
    }
}

/// Per-epoch mean losses and bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub l_align: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Full training history plus skip counters.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Episodes whose role-reversal term was skipped (empty/full prediction).
    pub align_skips: usize,
    /// Episodes dropped entirely (degenerate alignment inputs).
    pub degenerate_skips: usize,
    /// Support alignments that fell back to the untransformed mask.
    pub collapse_fallbacks: usize,
    /// Episode count per class id actually trained on.
    pub episodes_per_class: BTreeMap<usize, usize>,
}

impl TrainLog {
    /// Renders the log as CSV; `comments` become leading `#` lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        let _ = writeln!(out, "epoch,l_seg,l_dice,l_ce,l_align,grad_norm,seconds");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                e.epoch, e.l_seg, e.l_dice, e.l_ce, e.l_align, e.grad_norm, e.seconds
            );
        }
        out
    }
}

/// Expands a binary `[h, w, 1]` mask into a `[h, w, 2]` one-hot map with
/// channel order (background, foreground).
pub fn one_hot_target<F: Scalar>(mask: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("one-hot target expects one channel, got {c}")));
    }
    let mut out = Tensor::zeros(vec![h, w, 2]);
    for px in 0..h * w {
        let fg = mask.values()[px];
        out.values_mut()[2 * px] = F::one() - fg;
        out.values_mut()[2 * px + 1] = fg;
    }
    Ok(out)
}

/// Builds the feature-resolution one-hot target for a full-resolution binary
/// mask: average-pool down, threshold at 0.5 (ties → foreground), one-hot.
fn feature_target<F: Scalar>(mask_fullres: &Tensor<F>) -> Result<Tensor<F>> {
    one_hot_target(&binarize_mask(&downsample_mask(mask_fullres, FEATURE_STRIDE)?))
}

/// Outcome of attaching the role-reversal loss for one episode.
enum AlignTerm {
    Node(Tx),
    /// Prediction was entirely one class; the term contributes nothing.
    Skipped,
}

/// Records the role-reversal pass: the query (with its own hard prediction as
/// a pseudo label, no gradient through it) acts as support, and the aligned
/// support must be re-segmented. Returns the reversal's segmentation loss.
fn alignment_loss_nodes<F: Scalar>(
    g: &mut Graph<F>,
    refs: &ModelRefs,
    model: &Model<F>,
    cfg: &TrainConfig,
    query_feat: Tx,
    support_feat: Tx,
    support_mask_ds: Tx,
    last_soft: Tx,
) -> Result<AlignTerm> {
    let pseudo = hard_mask(g.value(last_soft))?;
    let fg_mass: f64 = pseudo.values().iter().map(|v| v.to_f64().unwrap_or(0.0)).sum();
    if fg_mass <= MASK_EPS || fg_mass >= pseudo.numel() as f64 - MASK_EPS {
        return Ok(AlignTerm::Skipped);
    }
    // The pseudo label enters as a fresh leaf: a deliberate gradient stop.
    let pseudo_leaf = g.leaf(pseudo);
    let cre_pseudo = cre_forward_node(g, refs.cre, model.config.d, query_feat, pseudo_leaf)?;
    let protos = compute_prototypes_node(g, &[cre_pseudo], &[pseudo_leaf], MASK_EPS)?;

    let mut m_cur = pseudo_leaf;
    let mut last = None;
    for _ in 0..cfg.t_train {
        let cre_s = cre_forward_node(g, refs.cre, model.config.d, support_feat, m_cur)?;
        let soft = cosine_head_node(g, cre_s, protos, model.config.alpha)?;
        let fg = g.channel_slice(soft, 1)?;
        last = Some(soft);
        m_cur = if model.config.recurse_binary {
            g.leaf(binarize_mask(g.value(fg)))
        } else {
            fg
        };
    }
    let last = last.expect("t_train >= 1");
    // Target: the true (aligned) support mask, re-binarized at feature scale.
    let target = g.leaf(one_hot_target(&binarize_mask(g.value(support_mask_ds)))?);
    let loss = seg_loss_node(g, last, target, cfg.beta, cfg.eps_dice, cfg.eps_ce)?;
    Ok(AlignTerm::Node(loss))
}

/// Trains the model in place over leave-one-class-out episodes; deterministic
/// given the config seed.
pub fn train(
    model: &mut Model<f32>,
    dataset: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    model.validate()?;
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if cfg.beta < 0.0 {
        return Err(Error::Config(format!("beta must be ≥ 0, got {}", cfg.beta)));
    }
    if cfg.epochs == 0 || cfg.episodes_per_epoch == 0 {
        return Err(Error::Config("epochs and episodes per epoch must be ≥ 1".into()));
    }
    if cfg.t_train == 0 {
        return Err(Error::Config("t_train must be ≥ 1".into()));
    }
    if cfg.align_loss && cfg.k_shots != 1 {
        return Err(Error::Config("the role-reversal loss requires K = 1 episodes".into()));
    }

    // Classes eligible for training: everything but the holdout, each with
    // enough samples for a K-shot episode.
    let mut class_ids: Vec<usize> = dataset
        .iter()
        .flat_map(|s| s.masks.keys().copied())
        .filter(|&c| c != cfg.holdout_class)
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.is_empty() {
        return Err(Error::InsufficientData(
            "no training classes remain besides the holdout".into(),
        ));
    }
    for &c in &class_ids {
        let n = dataset.iter().filter(|s| s.masks.contains_key(&c)).count();
        if n < cfg.k_shots + 1 {
            return Err(Error::InsufficientData(format!(
                "class {c} has {n} samples, need ≥ {}",
                cfg.k_shots + 1
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.params());
    let adam_cfg = AdamConfig::default();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every);
        let started = Instant::now();
        let (mut s_seg, mut s_dice, mut s_ce, mut s_align, mut s_gnorm) =
            (0.0f64, 0.0, 0.0, 0.0, 0.0);
        let mut completed = 0usize;

        for _ in 0..cfg.episodes_per_epoch {
            let class = class_ids[rng.gen_range(0..class_ids.len())];
            let episode = sample_episode(dataset, class, cfg.k_shots, &mut rng, None)?;

            // Pre-align every support into the query frame; a degenerate
            // image pair drops the episode.
            let mut aligned = Vec::with_capacity(cfg.k_shots);
            let mut dropped = false;
            for (img, mask) in &episode.support {
                match affine_align(img, mask, &episode.query_image) {
                    Ok(a) => {
                        if a.collapsed {
                            log.collapse_fallbacks += 1;
                        }
                        aligned.push((a.image, a.mask));
                    }
                    Err(Error::Degenerate(_)) => {
                        dropped = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if dropped {
                log.degenerate_skips += 1;
                continue;
            }

            let mut g = Graph::<f32>::new();
            let refs = model.insert(&mut g);
            let nodes = forward_nodes(
                &mut g,
                &refs,
                &model.config,
                &aligned,
                &episode.query_image,
                cfg.t_train,
            )?;
            let last_soft = *nodes.soft_masks.last().expect("t >= 1");

            let query_mask = episode.query_mask.as_ref().expect("sampler provides labels");
            let target = g.leaf(feature_target(query_mask)?);
            let seg = seg_loss_node(&mut g, last_soft, target, cfg.beta, cfg.eps_dice, cfg.eps_ce)?;
            s_dice += dice_loss(g.value(last_soft), g.value(target), cfg.eps_dice)? as f64;
            s_ce += ce_loss(g.value(last_soft), g.value(target), cfg.eps_ce)? as f64;
            s_seg += g.value(seg).values()[0] as f64;

            let total = if cfg.align_loss {
                match alignment_loss_nodes(
                    &mut g,
                    &refs,
                    model,
                    cfg,
                    nodes.query_feat,
                    nodes.support_feats[0],
                    nodes.support_masks_ds[0],
                    last_soft,
                )? {
                    AlignTerm::Node(al) => {
                        s_align += g.value(al).values()[0] as f64;
                        g.add(seg, al)?
                    }
                    AlignTerm::Skipped => {
                        log.align_skips += 1;
                        seg
                    }
                }
            } else {
                seg
            };

            let loss_value = g.value(total).values()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "episode loss diverged at epoch {epoch} (class {class})"
                )));
            }
            g.backward(total)?;

            let handles = refs.param_handles();
            let mut grads = Vec::with_capacity(handles.len());
            let mut sq_norm = 0.0f64;
            for (&h, p) in handles.iter().zip(model.params()) {
                let grad = match g.grad(h) {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(p.shape().to_vec()),
                };
                if !grad.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient diverged at epoch {epoch} (class {class})"
                    )));
                }
                sq_norm += grad.values().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                grads.push(grad);
            }
            s_gnorm += sq_norm.sqrt();

            adam_step(&mut model.params_mut(), &grads, &mut state, lr, &adam_cfg)?;
            *log.episodes_per_class.entry(class).or_insert(0) += 1;
            completed += 1;
        }

        let n = completed.max(1) as f64;
        log.epochs.push(EpochStats {
            epoch,
            l_seg: s_seg / n,
            l_dice: s_dice / n,
            l_ce: s_ce / n,
            l_align: s_align / n,
            grad_norm: s_gnorm / n,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert!((p.values()[0] + 1e-3).abs() < 1e-9, "step {}", p.values()[0]);
    }

    #[test]
    fn adam_constant_gradient_keeps_stepping_at_lr_scale() {
        let mut p = Tensor::scalar(0.0f64);
        let mut state = AdamState::new(&[&p]);
        for _ in 0..10 {
            let g = Tensor::scalar(2.5f64);
            adam_step(&mut [&mut p], &[g], &mut state, 1e-3, &AdamConfig::default()).unwrap();
        }
        // With a constant gradient every bias-corrected step is ≈ lr.
        assert!((p.values()[0] + 10.0 * 1e-3).abs() < 1e-6, "pos {}", p.values()[0]);
    }

    #[test]
    fn lr_schedule_decays_by_factor_every_20_epochs() {
        for (epoch, want) in [(0, 1e-4), (19, 1e-4), (20, 1e-5), (39, 1e-5), (40, 1e-6), (49, 1e-6)]
        {
            let got = lr_at(epoch, 1e-4, 0.1, 20);
            assert!((got - want).abs() < 1e-18, "epoch {epoch}: {got}");
        }
    }

    #[test]
    fn ce_rejects_mismatched_shapes() {
        let m = Tensor::<f64>::full(vec![2, 2, 2], 0.5);
        let y = Tensor::<f64>::full(vec![2, 3, 2], 0.5);
        assert!(ce_loss(&m, &y, 1e-7).is_err());
    }

    #[test]
    fn one_hot_target_is_complementary_two_channel() {
        let m = Tensor::new(vec![1, 2, 1], vec![1.0f64, 0.0]).unwrap();
        let y = one_hot_target(&m).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    fn tiny_setup() -> (Model<f32>, Vec<crate::data::ImageSample>, TrainConfig) {
        let config = crate::refine::ModelConfig {
            z: 8,
            d: 1,
            t_train: 1,
            t_infer: 2,
            ..crate::refine::ModelConfig::default()
        };
        let model = Model::init(config, 0);
        let dataset = crate::data::generate_synthetic(6, 32, 3, 11).unwrap();
        let mut cfg = TrainConfig::new(2, 5);
        cfg.epochs = 2;
        cfg.episodes_per_epoch = 6;
        cfg.t_train = 1;
        (model, dataset, cfg)
    }

    #[test]
    fn training_skips_holdout_class_and_logs_finite_stats() {
        let (mut model, dataset, cfg) = tiny_setup();
        let log = train(&mut model, &dataset, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert!(
            !log.episodes_per_class.contains_key(&cfg.holdout_class),
            "holdout class must never be trained on: {:?}",
            log.episodes_per_class
        );
        assert!(log.episodes_per_class.keys().all(|&c| c == 0 || c == 1));
        for e in &log.epochs {
            assert!(e.l_seg.is_finite() && e.l_dice.is_finite() && e.l_ce.is_finite());
            assert!(e.l_align.is_finite() && e.grad_norm.is_finite());
            assert!(e.grad_norm > 0.0, "optimizer received gradients");
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (mut model_a, dataset, cfg) = tiny_setup();
        let mut model_b = model_a.clone();
        train(&mut model_a, &dataset, &cfg).unwrap();
        train(&mut model_b, &dataset, &cfg).unwrap();
        for (a, b) in model_a.params().iter().zip(model_b.params()) {
            assert_eq!(a.values(), b.values(), "same seed must give identical weights");
        }
    }

    #[test]
    fn training_rejects_bad_hyperparameters() {
        let (mut model, dataset, cfg) = tiny_setup();
        let mut bad = cfg.clone();
        bad.lr = 0.0;
        assert!(matches!(train(&mut model, &dataset, &bad), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.k_shots = 2;
        assert!(matches!(train(&mut model, &dataset, &bad), Err(Error::Config(_))));
        let mut bad = cfg;
        bad.holdout_class = 9;
        // Holding out a class that does not exist leaves all real classes in
        // training — allowed, but an empty dataset is not.
        assert!(matches!(train(&mut model, &[], &bad), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn train_log_csv_has_header_and_comment_lines() {
        let log = TrainLog {
            epochs: vec![EpochStats {
                epoch: 0,
                l_seg: 1.25,
                l_dice: 0.5,
                l_ce: 0.75,
                l_align: 0.0,
                grad_norm: 2.0,
                seconds: 0.1,
            }],
            ..TrainLog::default()
        };
        let csv = log.to_csv(&["lr 0.0001".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# lr 0.0001");
        assert_eq!(lines[1], "epoch,l_seg,l_dice,l_ce,l_align,grad_norm,seconds");
        assert!(lines[2].starts_with("0,1.250000,0.500000,0.750000,"));
    }

    #[test]
    fn seg_loss_node_combines_dice_and_ce() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::full(vec![2, 2, 2], 0.5));
        let y = g.leaf(Tensor::new(
            vec![2, 2, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        ).unwrap());
        let beta = 1.0;
        let loss = seg_loss_node(&mut g, m, y, beta, 1e-5, 1e-7).unwrap();
        let dice = dice_loss(g.value(m), g.value(y), 1e-5).unwrap();
        let ce = ce_loss(g.value(m), g.value(y), 1e-7).unwrap();
        let want = beta * dice + ce;
        assert!((g.value(loss).values()[0] - want).abs() < 1e-12);
    }
}
