//! Prototypes and the cosine matching head.
//!
//! Foreground/background prototypes are masked average pools of support
//! features (averaged over the K supports). Classification compares each query
//! feature vector against both prototypes by cosine distance `1 − cos(f, p)`,
//! scales by `−α`, and softmaxes over the two channels, yielding a soft mask
//! with channel order `[bg, fg]`.

use crate::numerics::graph::{Graph, Op, OpCtx, Tx};
use crate::numerics::tensor::{num, Scalar, Tensor};
use crate::{Error, Result};

/// Norm floor in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Foreground/background prototype pair, each a `[z]` vector.
#[derive(Clone, Debug)]
pub struct Prototypes<F> {
    pub p_fg: Tensor<F>,
    pub p_bg: Tensor<F>,
}

/// Tape handles for the prototype pair.
#[derive(Clone, Copy, Debug)]
pub struct ProtoRefs {
    pub p_fg: Tx,
    pub p_bg: Tx,
}

// ==== masked mean ====

struct MaskedMeanOp;

impl<F: Scalar> Op<F> for MaskedMeanOp {
    fn name(&self) -> &'static str {
        "masked_mean"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let feats = ctx.inputs[0];
        let mask = ctx.inputs[1];
        let (h, w, z) = feats.dims3().expect("validated");
        let s: F = mask.values().iter().copied().sum();
        let inv = F::one() / s;
        let g = ctx.grad.values();
        let out = ctx.output.values();
        let mut df = vec![F::zero(); h * w * z];
        let mut dm = vec![F::zero(); h * w];
        for px in 0..h * w {
            let m = mask.values()[px];
            let frow = &feats.values()[px * z..(px + 1) * z];
            let drow = &mut df[px * z..(px + 1) * z];
            let mut acc = F::zero();
            for ch in 0..z {
                drow[ch] = g[ch] * m * inv;
                acc = acc + g[ch] * (frow[ch] - out[ch]) * inv;
            }
            dm[px] = acc;
        }
        vec![
            Tensor::new(vec![h, w, z], df).expect("shape"),
            Tensor::new(vec![h, w, 1], dm).expect("shape"),
        ]
    }
}

/// Records `Σ_px F·m / Σ_px m` as a `[z]` node. The caller must have verified
/// that the mask mass is bounded away from zero.
pub fn masked_mean_node<F: Scalar>(g: &mut Graph<F>, features: Tx, mask: Tx) -> Result<Tx> {
    let (h, w, z) = g.value(features).dims3()?;
    let (mh, mw, mc) = g.value(mask).dims3()?;
    if (mh, mw, mc) != (h, w, 1) {
        return Err(Error::shape(format!("mask must be [{h}, {w}, 1], got [{mh}, {mw}, {mc}]")));
    }
    let fv = g.value(features).values();
    let mv = g.value(mask).values();
    let s: F = mv.iter().copied().sum();
    let mut out = vec![F::zero(); z];
    for px in 0..h * w {
        let m = mv[px];
        let frow = &fv[px * z..(px + 1) * z];
        for (o, &f) in out.iter_mut().zip(frow) {
            *o = f.mul_add(m, *o);
        }
    }
    let inv = F::one() / s;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    let out = Tensor::new(vec![z], out)?;
    Ok(g.push(out, vec![features, mask], Box::new(MaskedMeanOp)))
}

/// Checks that a soft mask keeps both regions non-empty.
fn check_mask_mass<F: Scalar>(mask: &Tensor<F>, eps: f64, what: &str) -> Result<()> {
    let total: F = mask.values().iter().copied().sum();
    let numel = num::<F>(mask.numel() as f64);
    let e = num::<F>(eps);
    if total <= e {
        return Err(Error::EmptyMask(format!("{what}: foreground mass ~ 0")));
    }
    if numel - total <= e {
        return Err(Error::EmptyMask(format!("{what}: background mass ~ 0")));
    }
    Ok(())
}

/// Records masked-average prototypes over K supports; returns `(p_bg, p_fg)`
/// handles. Raises [`Error::EmptyMask`] if any support mask is all-foreground
/// or all-background (mass within `eps` of the extremes).
pub fn compute_prototypes_node<F: Scalar>(
    g: &mut Graph<F>,
    features_per_support: &[Tx],
    masks: &[Tx],
    eps: f64,
) -> Result<ProtoRefs> {
    if features_per_support.is_empty() || features_per_support.len() != masks.len() {
        return Err(Error::shape(format!(
            "need matching non-empty support sets, got {} features / {} masks",
            features_per_support.len(),
            masks.len()
        )));
    }
    for &m in masks {
        check_mask_mass(g.value(m), eps, "support mask")?;
    }
    let k = features_per_support.len();
    let mut fg: Option<Tx> = None;
    let mut bg: Option<Tx> = None;
    for (&f, &m) in features_per_support.iter().zip(masks) {
        let inv_m = g.affine(m, -1.0, 1.0)?;
        let fg_k = masked_mean_node(g, f, m)?;
        let bg_k = masked_mean_node(g, f, inv_m)?;
        fg = Some(match fg {
            None => fg_k,
            Some(acc) => g.add(acc, fg_k)?,
        });
        bg = Some(match bg {
            None => bg_k,
            Some(acc) => g.add(acc, bg_k)?,
        });
    }
    let scale = 1.0 / k as f64;
    Ok(ProtoRefs {
        p_fg: g.affine(fg.expect("k >= 1"), scale, 0.0)?,
        p_bg: g.affine(bg.expect("k >= 1"), scale, 0.0)?,
    })
}

/// Masked-average prototypes as a pure tensor function.
pub fn compute_prototypes<F: Scalar>(
    features_per_support: &[Tensor<F>],
    masks: &[Tensor<F>],
    eps: f64,
) -> Result<Prototypes<F>> {
    let mut g = Graph::new();
    let f: Vec<Tx> = features_per_support.iter().map(|t| g.leaf(t.clone())).collect();
    let m: Vec<Tx> = masks.iter().map(|t| g.leaf(t.clone())).collect();
    let refs = compute_prototypes_node(&mut g, &f, &m, eps)?;
    Ok(Prototypes { p_fg: g.value(refs.p_fg).clone(), p_bg: g.value(refs.p_bg).clone() })
}

// ==== cosine map ====

struct CosineMapOp;

impl<F: Scalar> Op<F> for CosineMapOp {
    fn name(&self) -> &'static str {
        "cosine_map"
    }
    fn backward(&self, ctx: OpCtx<'_, F>) -> Vec<Tensor<F>> {
        let feats = ctx.inputs[0];
        let p = ctx.inputs[1];
        let (h, w, z) = feats.dims3().expect("validated");
        let eps = num::<F>(COSINE_EPS);
        let pv = p.values();
        let np = p.l2_norm();
        let cp = np.max(eps);
        let gv = ctx.grad.values();
        let mut df = vec![F::zero(); h * w * z];
        let mut dp = vec![F::zero(); z];
        for px in 0..h * w {
            let frow = &feats.values()[px * z..(px + 1) * z];
            let g = gv[px];
            let mut dot = F::zero();
            let mut nf2 = F::zero();
            for (&f, &pk) in frow.iter().zip(pv) {
                dot = f.mul_add(pk, dot);
                nf2 = f.mul_add(f, nf2);
            }
            let nf = nf2.sqrt();
            let cf = nf.max(eps);
            let denom = cf * cp;
            let drow = &mut df[px * z..(px + 1) * z];
            // ∂cos/∂f = p/(cf·cp) − dot·f / (cf²·cp·nf)   (second term only if nf > eps)
            let f_corr =
                if nf > eps { dot / (cf * cf * cp * nf) } else { F::zero() };
            for ((d, &pk), &f) in drow.iter_mut().zip(pv).zip(frow) {
                *d = g * (pk / denom - f_corr * f);
            }
            // ∂cos/∂p = f/(cf·cp) − dot·p / (cp²·cf·np)   (second term only if np > eps)
            let p_corr =
                if np > eps { dot / (cp * cp * cf * np) } else { F::zero() };
            for ((d, &pk), &f) in dp.iter_mut().zip(pv).zip(frow) {
                *d = *d + g * (f / denom - p_corr * pk);
            }
        }
        vec![
            Tensor::new(vec![h, w, z], df).expect("shape"),
            Tensor::new(vec![z], dp).expect("shape"),
        ]
    }
}

/// Records the per-pixel cosine similarity map against one prototype.
pub fn cosine_map_node<F: Scalar>(g: &mut Graph<F>, features: Tx, prototype: Tx) -> Result<Tx> {
    let (h, w, z) = g.value(features).dims3()?;
    let pshape = g.value(prototype).shape();
    if pshape != [z] {
        return Err(Error::shape(format!("prototype shape {pshape:?} != [{z}]")));
    }
    let eps = num::<F>(COSINE_EPS);
    let pv = g.value(prototype).values();
    let cp = g.value(prototype).l2_norm().max(eps);
    let fv = g.value(features).values();
    let mut out = vec![F::zero(); h * w];
    for px in 0..h * w {
        let frow = &fv[px * z..(px + 1) * z];
        let mut dot = F::zero();
        let mut nf2 = F::zero();
        for (&f, &p) in frow.iter().zip(pv) {
            dot = f.mul_add(p, dot);
            nf2 = f.mul_add(f, nf2);
        }
        out[px] = dot / (nf2.sqrt().max(eps) * cp);
    }
    let out = Tensor::new(vec![h, w, 1], out)?;
    Ok(g.push(out, vec![features, prototype], Box::new(CosineMapOp)))
}

/// Records the cosine classification head: distance `1 − cos`, logits `−α·dist`,
/// per-pixel softmax over `[bg, fg]`.
///
/// Raises [`Error::DegeneratePrototype`] if both prototypes are zero vectors.
pub fn cosine_head_node<F: Scalar>(
    g: &mut Graph<F>,
    features: Tx,
    protos: ProtoRefs,
    alpha: f64,
) -> Result<Tx> {
    let eps = num::<F>(COSINE_EPS);
    let nfg = g.value(protos.p_fg).l2_norm();
    let nbg = g.value(protos.p_bg).l2_norm();
    if nfg < eps && nbg < eps {
        return Err(Error::DegeneratePrototype(
            "both prototypes are zero vectors; cosine head undefined".into(),
        ));
    }
    let cos_bg = cosine_map_node(g, features, protos.p_bg)?;
    let cos_fg = cosine_map_node(g, features, protos.p_fg)?;
    // logits = −α·(1 − cos) = α·cos − α
    let log_bg = g.affine(cos_bg, alpha, -alpha)?;
    let log_fg = g.affine(cos_fg, alpha, -alpha)?;
    let logits = g.concat_channels(log_bg, log_fg)?;
    g.softmax_channels(logits)
}

/// Cosine head as a pure tensor function.
pub fn cosine_head<F: Scalar>(
    features: &Tensor<F>,
    protos: &Prototypes<F>,
    alpha: f64,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let f = g.leaf(features.clone());
    let refs = ProtoRefs { p_fg: g.leaf(protos.p_fg.clone()), p_bg: g.leaf(protos.p_bg.clone()) };
    let out = cosine_head_node(&mut g, f, refs, alpha)?;
    Ok(g.value(out).clone())
}

/// Thresholds the foreground channel of a `[h, w, 2]` soft mask at 0.5; the
/// tie goes to foreground.
pub fn hard_mask<F: Scalar>(m_soft: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = m_soft.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("soft mask needs 2 channels, got {c}")));
    }
    let half = num::<F>(0.5);
    let mv = m_soft.values();
    let out: Vec<F> =
        (0..h * w).map(|px| if mv[2 * px + 1] >= half { F::one() } else { F::zero() }).collect();
    Tensor::new(vec![h, w, 1], out)
}
