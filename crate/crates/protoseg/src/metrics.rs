//! Overlap metric, the repeated evaluation protocol, and per-iteration
//! refinement curves.
//!
//! Evaluation walks every sample of the held-out class as a query, pairs it
//! with one random (or fixed) support, and scores the full-resolution
//! prediction with the Sørensen–Dice coefficient. Repeats differ only in the
//! support draw. Episode jobs are planned up front from the seed, so results
//! are identical no matter how many worker threads score them.

use rayon::prelude::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{affine_align, binarize_mask, initial_mask, Episode, ImageSample};
use crate::numerics::ops::bilinear_resize;
use crate::numerics::tensor::{Scalar, Tensor};
use crate::refine::{forward, predict, Model};
use crate::{Error, Result};

/// Sørensen–Dice coefficient `2|m∩g| / (|m|+|g|)` of two equally shaped
/// binary masks; both-empty pairs score 1.0 (vacuous agreement).
pub fn dsc<F: Scalar>(m: &Tensor<F>, g: &Tensor<F>) -> Result<f64> {
    if m.shape() != g.shape() {
        return Err(Error::shape(format!(
            "dsc needs equal shapes, got {:?} vs {:?}",
            m.shape(),
            g.shape()
        )));
    }
    let half = crate::numerics::tensor::num::<F>(0.5);
    let (mut inter, mut am, mut ag) = (0u64, 0u64, 0u64);
    for (&mv, &gv) in m.values().iter().zip(g.values()) {
        let (mb, gb) = (mv > half, gv > half);
        am += mb as u64;
        ag += gb as u64;
        inter += (mb && gb) as u64;
    }
    if am + ag == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (am + ag) as f64)
}

/// Aggregated evaluation outcome for one held-out class.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub holdout_class: usize,
    /// Mean DSC of each repeat, in repeat order.
    pub per_repeat: Vec<f64>,
    /// Mean of the per-repeat means.
    pub mean: f64,
    /// Population standard deviation of the per-repeat means.
    pub std: f64,
    pub repeats: usize,
    pub fixed_support: Option<String>,
    pub t_infer: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Renders `class,repeat,mean_dsc` rows plus a summary row; `comments`
    /// become leading `#` lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        let _ = writeln!(out, "class,repeat,mean_dsc");
        for (r, v) in self.per_repeat.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:.6}", self.holdout_class, r, v);
        }
        let _ = writeln!(out, "{},summary,{:.6} ± {:.6}", self.holdout_class, self.mean, self.std);
        out
    }
}

/// One planned episode: which sample is the query, which the support.
struct Job {
    repeat: usize,
    query: usize,
    support: usize,
}

/// Plans every (repeat × query) episode up front from the seed.
fn plan_jobs(
    dataset: &[ImageSample],
    holdout_class: usize,
    repeats: usize,
    fixed_support_id: Option<&str>,
    seed: u64,
) -> Result<Vec<Job>> {
    let members: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].masks.contains_key(&holdout_class))
        .collect();
    if members.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "class {holdout_class} has {} samples, need ≥ 2 to evaluate",
            members.len()
        )));
    }
    let fixed = match fixed_support_id {
        Some(id) => Some(
            members
                .iter()
                .copied()
                .find(|&i| dataset[i].sample_id == id)
                .ok_or_else(|| {
                    Error::InsufficientData(format!(
                        "fixed support {id:?} not found among class {holdout_class} samples"
                    ))
                })?,
        ),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    for repeat in 0..repeats {
        for &query in &members {
            let support = match fixed {
                Some(s) => {
                    if s == query {
                        continue;
                    }
                    s
                }
                None => {
                    let others: Vec<usize> =
                        members.iter().copied().filter(|&i| i != query).collect();
                    others[rng.gen_range(0..others.len())]
                }
            };
            jobs.push(Job { repeat, query, support });
        }
    }
    Ok(jobs)
}

/// A scoring function: (support sample, query sample, class) → full-resolution
/// binary prediction.
pub type Predictor<'a> =
    dyn Fn(&ImageSample, &ImageSample, usize) -> Result<Tensor<f32>> + Sync + 'a;

/// Runs the repeated-evaluation protocol with an arbitrary predictor.
pub fn evaluate_with(
    dataset: &[ImageSample],
    holdout_class: usize,
    repeats: usize,
    fixed_support_id: Option<&str>,
    seed: u64,
    t_infer: usize,
    predictor: &Predictor<'_>,
) -> Result<EvalReport> {
    if repeats == 0 {
        return Err(Error::Config("evaluation needs ≥ 1 repeats".into()));
    }
    let jobs = plan_jobs(dataset, holdout_class, repeats, fixed_support_id, seed)?;
    let scores: Vec<(usize, f64)> = jobs
        .par_iter()
        .map(|job| -> Result<(usize, f64)> {
            let pred =
                predictor(&dataset[job.support], &dataset[job.query], holdout_class)?;
            let truth = &dataset[job.query].masks[&holdout_class];
            Ok((job.repeat, dsc(&pred, truth)?))
        })
        .collect::<Result<_>>()?;

    let mut sums = vec![0.0f64; repeats];
    let mut counts = vec![0usize; repeats];
    for (repeat, score) in scores {
        sums[repeat] += score;
        counts[repeat] += 1;
    }
    let per_repeat: Vec<f64> =
        sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let var =
        per_repeat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / repeats as f64;
    Ok(EvalReport {
        holdout_class,
        per_repeat,
        mean,
        std: var.sqrt(),
        repeats,
        fixed_support: fixed_support_id.map(str::to_owned),
        t_infer,
        seed,
    })
}

/// Evaluates a trained model under the repeated protocol.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &[ImageSample],
    holdout_class: usize,
    repeats: usize,
    fixed_support_id: Option<&str>,
    seed: u64,
) -> Result<EvalReport> {
    model.validate()?;
    evaluate_with(
        dataset,
        holdout_class,
        repeats,
        fixed_support_id,
        seed,
        model.config.t_infer,
        &|support, query, class| {
            let pair = vec![(support.image.clone(), support.masks[&class].clone())];
            let (binary, _) = predict(model, &pair, &query.image)?;
            Ok(binary)
        },
    )
}

/// Evaluates the affine-only baseline: the prediction is just the aligned
/// support mask union, with no learned refinement.
pub fn evaluate_baseline(
    dataset: &[ImageSample],
    holdout_class: usize,
    repeats: usize,
    fixed_support_id: Option<&str>,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(
        dataset,
        holdout_class,
        repeats,
        fixed_support_id,
        seed,
        0,
        &|support, query, class| {
            let aligned =
                affine_align(&support.image, &support.masks[&class], &query.image)?;
            binarize_and_union(&[aligned.mask])
        },
    )
}

fn binarize_and_union(masks: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    Ok(binarize_mask(&initial_mask(masks)?))
}

/// Mean DSC after each refinement iteration `t = 1..=t_max`, scored on the
/// upsampled, thresholded soft mask of that iteration (one pass over every
/// query of the class, random support per query).
pub fn iteration_curve(
    model: &Model<f32>,
    dataset: &[ImageSample],
    holdout_class: usize,
    t_max: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if t_max == 0 {
        return Err(Error::Config("iteration curve needs t_max ≥ 1".into()));
    }
    model.validate()?;
    let jobs = plan_jobs(dataset, holdout_class, 1, None, seed)?;
    let per_episode: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|job| -> Result<Vec<f64>> {
            let support = &dataset[job.support];
            let query = &dataset[job.query];
            let aligned = affine_align(
                &support.image,
                &support.masks[&holdout_class],
                &query.image,
            )?;
            let episode = Episode {
                support: vec![(aligned.image, aligned.mask)],
                query_image: query.image.clone(),
                query_mask: None,
                class_id: holdout_class,
            };
            let trace = forward(model, &episode, t_max)?;
            let truth = &query.masks[&holdout_class];
            let (h, w, _) = truth.dims3()?;
            trace
                .soft_masks
                .iter()
                .map(|soft| {
                    // Upsample the soft foreground and threshold, mirroring
                    // how the final full-resolution prediction is produced.
                    let up = bilinear_resize(&soft_fg_channel(soft)?, h, w)?;
                    dsc(&binarize_mask(&up), truth)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut curve = vec![0.0f64; t_max];
    for ep in &per_episode {
        for (acc, v) in curve.iter_mut().zip(ep) {
            *acc += v;
        }
    }
    let n = per_episode.len().max(1) as f64;
    for acc in curve.iter_mut() {
        *acc /= n;
    }
    Ok(curve)
}

/// Extracts the foreground channel of a `[h, w, 2]` soft mask as `[h, w, 1]`.
pub fn soft_fg_channel(soft: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = soft.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("soft mask needs 2 channels, got {c}")));
    }
    let vals: Vec<f32> = (0..h * w).map(|px| soft.values()[2 * px + 1]).collect();
    Tensor::new(vec![h, w, 1], vals)
}

/// Writes an iteration curve as `t,mean_dsc` CSV text.
pub fn curve_to_csv(curve: &[f64], comments: &[String]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "t,mean_dsc");
    for (t, v) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{:.6}", t + 1, v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::refine::ModelConfig;

    fn binary(vals: &[f32], h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(vec![h, w, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn dsc_identity_disjoint_and_overlap() {
        let a = binary(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        let b = binary(&[0.0, 0.0, 1.0, 1.0], 2, 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = binary(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        // |a|=2, |c|=2, overlap {pixel 0} → 2·1/(2+2).
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn dsc_is_symmetric_and_vacuously_perfect_on_empty_pairs() {
        let a = binary(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let b = binary(&[1.0, 1.0, 0.0, 0.0], 2, 2);
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        let empty = binary(&[0.0; 4], 2, 2);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        let shaped = binary(&[0.0; 6], 2, 3);
        assert!(dsc(&empty, &shaped).is_err());
    }

    #[test]
    fn oracle_predictor_scores_perfect_mean() {
        let dataset = generate_synthetic(5, 32, 3, 2).unwrap();
        let report = evaluate_with(
            &dataset,
            1,
            3,
            None,
            0,
            0,
            &|_, query, class| Ok(query.masks[&class].clone()),
        )
        .unwrap();
        assert_eq!(report.per_repeat, vec![1.0, 1.0, 1.0]);
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.std, 0.0);
    }

    #[test]
    fn fixed_support_repeats_have_zero_variance() {
        let dataset = generate_synthetic(5, 32, 3, 4).unwrap();
        let config = ModelConfig { z: 8, d: 1, t_infer: 2, ..ModelConfig::default() };
        let model = Model::init(config, 1);
        let report = evaluate(&model, &dataset, 2, 3, Some("s0001"), 7).unwrap();
        assert_eq!(report.repeats, 3);
        assert_eq!(report.per_repeat[0], report.per_repeat[1]);
        assert_eq!(report.per_repeat[1], report.per_repeat[2]);
        assert_eq!(report.std, 0.0);
    }

    #[test]
    fn evaluation_is_reproducible_for_a_fixed_seed() {
        let dataset = generate_synthetic(6, 32, 3, 6).unwrap();
        let config = ModelConfig { z: 8, d: 1, t_infer: 2, ..ModelConfig::default() };
        let model = Model::init(config, 2);
        let a = evaluate(&model, &dataset, 0, 2, None, 13).unwrap();
        let b = evaluate(&model, &dataset, 0, 2, None, 13).unwrap();
        assert_eq!(a.per_repeat, b.per_repeat);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.std, b.std);
    }

    #[test]
    fn baseline_uses_same_episode_plan_as_model_evaluation() {
        let dataset = generate_synthetic(5, 32, 3, 8).unwrap();
        let a = evaluate_baseline(&dataset, 1, 2, None, 3).unwrap();
        let b = evaluate_baseline(&dataset, 1, 2, None, 3).unwrap();
        assert_eq!(a.per_repeat, b.per_repeat, "same seed, same plan, same scores");
        assert!(a.mean >= 0.0 && a.mean <= 1.0);
    }

    #[test]
    fn iteration_curve_has_t_max_entries_in_unit_range() {
        let dataset = generate_synthetic(4, 32, 3, 10).unwrap();
        let config = ModelConfig { z: 8, d: 1, ..ModelConfig::default() };
        let model = Model::init(config, 3);
        let curve = iteration_curve(&model, &dataset, 2, 3, 5).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)), "{curve:?}");
    }

    #[test]
    fn undersized_class_cannot_be_evaluated() {
        let dataset = generate_synthetic(1, 32, 3, 12).unwrap();
        assert!(matches!(
            evaluate_baseline(&dataset, 0, 5, None, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn report_csv_lists_repeats_then_summary() {
        let report = EvalReport {
            holdout_class: 2,
            per_repeat: vec![0.5, 0.7],
            mean: 0.6,
            std: 0.1,
            repeats: 2,
            fixed_support: None,
            t_infer: 10,
            seed: 0,
        };
        let csv = report.to_csv(&["repeats 2".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# repeats 2");
        assert_eq!(lines[1], "class,repeat,mean_dsc");
        assert_eq!(lines[2], "2,0,0.500000");
        assert_eq!(lines[4], "2,summary,0.600000 ± 0.100000");
    }
}
