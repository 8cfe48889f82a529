//! Scoring, ranking and attribute-level explanations over a frozen model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, squared_distance};
use crate::personalize::{represent, AttentionProfile, ItemEmbeddings};
use crate::trainer::ModelState;

/// A user's view of the model: user vector plus the personalized
/// representations of the training positives, computed once.
pub struct UserContext<'a> {
    pub user: usize,
    z: &'a [f64],
    embeds: &'a ItemEmbeddings,
    pub neighbors: Vec<usize>,
    neighbor_reps: Vec<Vec<f64>>,
}

impl<'a> UserContext<'a> {
    pub fn new(model: &'a ModelState, embeds: &'a ItemEmbeddings, user: usize, positives: &[usize]) -> Self {
        let z = model.users.user(user);
        let neighbor_reps = positives
            .iter()
            .map(|&j| represent(z, &embeds.item(j)).1)
            .collect();
        UserContext {
            user,
            z,
            embeds,
            neighbors: positives.to_vec(),
            neighbor_reps,
        }
    }

    pub fn represent_item(&self, item: usize) -> (AttentionProfile, Vec<f64>) {
        represent(self.z, &self.embeds.item(item))
    }

    pub fn represent_embeds(&self, embeds: &[Vec<f64>]) -> (AttentionProfile, Vec<f64>) {
        let refs: Vec<&[f64]> = embeds.iter().map(Vec::as_slice).collect();
        represent(self.z, &refs)
    }

    /// Similarities of `rep` to every neighbor except `skip`.
    fn similarities(&self, rep: &[f64], skip: Option<usize>) -> impl Iterator<Item = (usize, f64)> + '_ {
        let rep = rep.to_vec();
        self.neighbors
            .iter()
            .zip(&self.neighbor_reps)
            .filter(move |(&j, _)| Some(j) != skip)
            .map(move |(&j, r)| (j, -squared_distance(&rep, r)))
    }

    /// Sum of personalized similarities to all neighbors other than `item`.
    pub fn score(&self, item: usize) -> Result<f64> {
        let (_, rep) = self.represent_item(item);
        let mut any = false;
        let total = self.similarities(&rep, Some(item)).map(|(_, s)| s).inspect(|_| any = true).sum();
        if !any {
            return Err(Error::Data(format!("user {} has no neighborhood for item {item}", self.user)));
        }
        Ok(total)
    }

    /// Minimum personalized similarity of a cold item to the neighbors.
    pub fn score_cold(&self, cold_embeds: &[Vec<f64>]) -> Result<f64> {
        let (_, rep) = self.represent_embeds(cold_embeds);
        self.similarities(&rep, None)
            .map(|(_, s)| s)
            .reduce(f64::min)
            .ok_or_else(|| Error::Data(format!("user {} has no neighborhood", self.user)))
    }

    pub fn explain(&self, item: usize) -> Result<Explanation> {
        let (profile, rep) = self.represent_item(item);
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in self.similarities(&rep, Some(item)) {
            // strictly greater keeps the earliest neighbor on ties
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (evidence, _) = best.ok_or_else(|| Error::Data(format!("user {} has no neighborhood", self.user)))?;
        let attribute = argmax(&profile.normalized);
        Ok(Explanation {
            item,
            evidence,
            attribute,
            weight: profile.normalized[attribute],
            profile,
        })
    }
}

pub fn score_item(
    model: &ModelState,
    embeds: &ItemEmbeddings,
    user: usize,
    item: usize,
    positives: &[usize],
) -> Result<f64> {
    UserContext::new(model, embeds, user, positives).score(item)
}

pub fn score_cold_item(
    model: &ModelState,
    embeds: &ItemEmbeddings,
    user: usize,
    cold_embeds: &[Vec<f64>],
    positives: &[usize],
) -> Result<f64> {
    UserContext::new(model, embeds, user, positives).score_cold(cold_embeds)
}

/// Why item `item` was recommended: the neighbor `evidence` closest to it
/// and the attribute field with the largest attention weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub item: usize,
    pub evidence: usize,
    pub attribute: usize,
    pub weight: f64,
    #[serde(skip)]
    pub profile: AttentionProfile,
}

impl Default for AttentionProfile {
    fn default() -> Self {
        AttentionProfile {
            raw: Vec::new(),
            normalized: Vec::new(),
        }
    }
}

impl Explanation {
    pub fn sentence(&self, item_ids: &[String], field_names: &[String]) -> String {
        render_explanation(&item_ids[self.item], &item_ids[self.evidence], &field_names[self.attribute])
    }
}

pub fn render_explanation(item: &str, evidence: &str, attribute: &str) -> String {
    format!("We recommend {item} because it is similar to {evidence} on the attribute {attribute}.")
}

pub fn explain(
    model: &ModelState,
    embeds: &ItemEmbeddings,
    user: usize,
    item: usize,
    positives: &[usize],
) -> Result<Explanation> {
    UserContext::new(model, embeds, user, positives).explain(item)
}

/// Sort by score, highest first, lower item index on ties, and keep `k`.
pub fn rank_by_score(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item: usize,
    pub score: f64,
    pub explanation: Explanation,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecommendation {
    pub user: usize,
    pub items: Vec<RankedItem>,
    /// Fewer candidates than requested.
    pub short: bool,
}

pub fn top_k(
    model: &ModelState,
    embeds: &ItemEmbeddings,
    user: usize,
    positives: &[usize],
    candidates: &[usize],
    k: usize,
) -> Result<RankedRecommendation> {
    if let Some(c) = candidates.iter().find(|c| positives.contains(c)) {
        return Err(Error::Data(format!("candidate {c} is a training positive of user {user}")));
    }
    let ctx = UserContext::new(model, embeds, user, positives);
    let scored = candidates
        .iter()
        .map(|&i| ctx.score(i).map(|s| (i, s)))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_by_score(scored, k);
    let items = ranked
        .into_iter()
        .map(|(item, score)| {
            let explanation = ctx.explain(item)?;
            Ok(RankedItem {
                item,
                score,
                attention: explanation.profile.normalized.clone(),
                explanation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedRecommendation {
        user,
        short: candidates.len() < k,
        items,
    })
}

/// Items outside the user's training positives.
pub fn default_candidates(n_items: usize, positives: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n_items];
    for &p in positives {
        mask[p] = false;
    }
    (0..n_items).filter(|&i| mask[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personalize::UserEmbeddingTable;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Single field, so reps equal the raw embeddings.
    fn line_model(points: &[f64]) -> (ModelState, ItemEmbeddings) {
        let n = points.len();
        let m = Array2::from_shape_fn((n, 1), |(i, _)| points[i]);
        (
            ModelState {
                encoders: vec![],
                users: UserEmbeddingTable::constant(1, 1, 1.0),
            },
            ItemEmbeddings { per_field: vec![m] },
        )
    }

    #[test]
    fn identical_neighbor_scores_zero() {
        let (m, e) = line_model(&[0.5, 0.5]);
        assert_eq!(score_item(&m, &e, 0, 0, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn score_sums_squared_distances() {
        let (m, e) = line_model(&[0.0, 1.0, 2.0]);
        assert_eq!(score_item(&m, &e, 0, 0, &[1, 2]).unwrap(), -5.0);
        // the item itself is skipped
        assert_eq!(score_item(&m, &e, 0, 1, &[1, 2]).unwrap(), -1.0);
        assert!(score_item(&m, &e, 0, 1, &[1]).is_err());
    }

    #[test]
    fn cold_score_takes_minimum() {
        let (m, e) = line_model(&[1.0, 2.0]);
        let cold = vec![vec![0.0]];
        assert_eq!(score_cold_item(&m, &e, 0, &cold, &[0, 1]).unwrap(), -4.0);
        assert_eq!(score_cold_item(&m, &e, 0, &cold, &[0]).unwrap(), -1.0);
        assert!(score_cold_item(&m, &e, 0, &cold, &[]).is_err());
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        assert_eq!(
            rank_by_score(vec![(0, -1.0), (1, -3.0), (2, -2.0)], 2),
            vec![(0, -1.0), (2, -2.0)]
        );
        assert_eq!(rank_by_score(vec![(5, -1.0), (2, -1.0), (9, -1.0)], 3), vec![(2, -1.0), (5, -1.0), (9, -1.0)]);
    }

    #[test]
    fn top_k_flags_short_slates_and_rejects_positives() {
        let (m, e) = line_model(&[0.0, 0.1, 0.9, 0.4]);
        let rec = top_k(&m, &e, 0, &[0], &[2, 1, 3], 5).unwrap();
        assert!(rec.short);
        let order: Vec<usize> = rec.items.iter().map(|r| r.item).collect();
        assert_eq!(order, vec![1, 3, 2]);
        assert!(top_k(&m, &e, 0, &[0], &[0, 1], 1).is_err());
    }

    #[test]
    fn single_field_explanation_has_full_weight() {
        let (m, e) = line_model(&[0.0, 0.3, 0.8, 0.35]);
        let ex = explain(&m, &e, 0, 3, &[0, 1, 2]).unwrap();
        assert_eq!(ex.attribute, 0);
        assert_eq!(ex.weight, 1.0);
        assert_eq!(ex.evidence, 1);
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            ex.sentence(&ids, &["director".to_string()]),
            "We recommend d because it is similar to b on the attribute director."
        );
    }

    #[test]
    fn default_candidates_exclude_positives() {
        assert_eq!(default_candidates(5, &[1, 3]), vec![0, 2, 4]);
    }

    proptest! {
        #[test]
        fn shifting_scores_keeps_ranking(scores in proptest::collection::vec(-10.0f64..0.0, 1..30), c in -5.0f64..5.0, k in 1usize..10) {
            let base: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            let shifted: Vec<(usize, f64)> = base.iter().map(|&(i, s)| (i, s + c)).collect();
            let a: Vec<usize> = rank_by_score(base, k).into_iter().map(|p| p.0).collect();
            let b: Vec<usize> = rank_by_score(shifted, k).into_iter().map(|p| p.0).collect();
            // shifting by c can merge or split float ties only at rounding level
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
            prop_assert_eq!(a, b);
        }
    }
}
