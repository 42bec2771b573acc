//! Support/query episode sampling with a caller-owned RNG.

use rand::Rng;

use super::{Episode, ImageSample};
use crate::{Error, Result};

/// Draws a 1-way K-shot episode for `class_id`: a uniformly chosen query plus
/// `k` distinct supports from the remaining samples of that class.
///
/// With `fixed_support_id` the single support is always that sample (K must
/// be 1) and only the query varies.
pub fn sample_episode<R: Rng>(
    dataset: &[ImageSample],
    class_id: usize,
    k: usize,
    rng: &mut R,
    fixed_support_id: Option<&str>,
) -> Result<Episode<f32>> {
    if k == 0 {
        return Err(Error::Config("episode needs K ≥ 1 supports".into()));
    }
    let candidates: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].masks.contains_key(&class_id))
        .collect();

    let (query_idx, support_idx) = if let Some(id) = fixed_support_id {
        if k != 1 {
            return Err(Error::Config(format!("fixed support mode requires K = 1, got {k}")));
        }
        let support = candidates
            .iter()
            .copied()
            .find(|&i| dataset[i].sample_id == id)
            .ok_or_else(|| {
                Error::InsufficientData(format!(
                    "fixed support {id:?} not found among samples with class {class_id}"
                ))
            })?;
        let queries: Vec<usize> =
            candidates.iter().copied().filter(|&i| i != support).collect();
        if queries.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no query candidates besides fixed support {id:?} for class {class_id}"
            )));
        }
        (queries[rng.gen_range(0..queries.len())], vec![support])
    } else {
        if candidates.len() < k + 1 {
            return Err(Error::InsufficientData(format!(
                "class {class_id} has {} samples, need ≥ {} for a {k}-shot episode",
                candidates.len(),
                k + 1
            )));
        }
        // Query first, then supports from the remainder, so the support
        // distribution is uniform over the non-query samples.
        let query = candidates[rng.gen_range(0..candidates.len())];
        let rest: Vec<usize> = candidates.iter().copied().filter(|&i| i != query).collect();
        let support = rand::seq::index::sample(rng, rest.len(), k)
            .into_iter()
            .map(|j| rest[j])
            .collect();
        (query, support)
    };

    let query = &dataset[query_idx];
    Ok(Episode {
        support: support_idx
            .into_iter()
            .map(|i| {
                let s = &dataset[i];
                (s.image.clone(), s.masks[&class_id].clone())
            })
            .collect(),
        query_image: query.image.clone(),
        query_mask: Some(query.masks[&class_id].clone()),
        class_id,
    })
}
