//! Evaluation protocols and the synthetic planted-preference generator.

use std::collections::HashSet;

use log::warn;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::InteractionDataset;
use crate::netbuild::{attach_cold_item, build_networks, AttributeNetworkSet};
use crate::personalize::{attention_scores, ItemEmbeddings};
use crate::recommend::UserContext;
use crate::trainer::{train, ModelState, TrainConfig};

pub const SLATE_NEGATIVES: usize = 100;

/// Held-out item of one user plus sampled negatives to rank it against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSlate {
    pub user: usize,
    pub heldout: usize,
    pub negatives: Vec<usize>,
    pub seed: u64,
    /// Fewer than the requested number of negatives were available.
    pub short: bool,
}

/// One slate per user, negatives drawn uniformly without replacement from
/// items that are neither training positives nor the held-out item.
pub fn build_slates(ds: &InteractionDataset, seed: u64, n_negatives: usize) -> Result<Vec<EvalSlate>> {
    let heldout = ds
        .heldout
        .as_ref()
        .ok_or_else(|| Error::Data("dataset has no held-out items; split it first".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ds.n_items();
    let mut slates = Vec::with_capacity(ds.n_users());
    let mut n_short = 0;
    for (u, &h) in heldout.iter().enumerate() {
        let mut allowed = vec![true; n];
        allowed[h] = false;
        for &p in &ds.positives[u] {
            allowed[p] = false;
        }
        let pool: Vec<usize> = (0..n).filter(|&i| allowed[i]).collect();
        let short = pool.len() < n_negatives;
        let negatives = if short {
            n_short += 1;
            pool
        } else {
            sample(&mut rng, pool.len(), n_negatives).into_iter().map(|i| pool[i]).collect()
        };
        slates.push(EvalSlate {
            user: u,
            heldout: h,
            negatives,
            seed,
            short,
        });
    }
    if n_short > 0 {
        warn!("{n_short} users have fewer than {n_negatives} candidate negatives; their slates are short");
    }
    Ok(slates)
}

/// Precision at `k` with a single relevant item at 1-based `rank`.
pub fn precision_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / k as f64
    } else {
        0.0
    }
}

/// nDCG at `k` with a single relevant item (ideal DCG is 1).
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of the held-out item among the slate. Ties with a
/// negative go to the lower item index, as in [`crate::recommend::rank_by_score`].
pub fn rank_in_slate(heldout: usize, heldout_score: f64, negatives: &[(usize, f64)]) -> usize {
    1 + negatives
        .iter()
        .filter(|&&(i, s)| s > heldout_score || (s == heldout_score && i < heldout))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub checkpoint_id: String,
}

impl Provenance {
    pub fn hash_config(text: &str) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Means of P@K and nDCG@K over users, with the per-user ranks they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub precision: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: Vec<usize>,
    pub ranks: Vec<usize>,
    pub provenance: Option<Provenance>,
}

impl MetricReport {
    pub fn from_ranks(users: Vec<usize>, ranks: Vec<usize>, ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let precision = ks
            .iter()
            .map(|&k| ranks.iter().map(|&r| precision_at_k(r, k)).sum::<f64>() / n)
            .collect();
        let ndcg = ks
            .iter()
            .map(|&k| ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n)
            .collect();
        MetricReport {
            ks: ks.to_vec(),
            precision,
            ndcg,
            users,
            ranks,
            provenance: None,
        }
    }

    /// Recompute the means over a subset of users.
    pub fn subset(&self, users: &[usize]) -> MetricReport {
        let keep: HashSet<usize> = users.iter().copied().collect();
        let (u, r): (Vec<usize>, Vec<usize>) = self
            .users
            .iter()
            .zip(&self.ranks)
            .filter(|(u, _)| keep.contains(u))
            .map(|(&u, &r)| (u, r))
            .unzip();
        MetricReport::from_ranks(u, r, &self.ks)
    }

    pub fn metric(&self, name: &str, k: usize) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        match name {
            "precision" | "p" => Some(self.precision[pos]),
            "ndcg" | "n" => Some(self.ndcg[pos]),
            _ => None,
        }
    }

    /// `metric<TAB>k<TAB>value` lines, then provenance comments.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tk\tvalue\n");
        for (i, k) in self.ks.iter().enumerate() {
            s.push_str(&format!("precision\t{k}\t{}\n", self.precision[i]));
        }
        for (i, k) in self.ks.iter().enumerate() {
            s.push_str(&format!("ndcg\t{k}\t{}\n", self.ndcg[i]));
        }
        if let Some(p) = &self.provenance {
            s.push_str(&format!("# config_hash\t{}\n# checkpoint\t{}\n", p.config_hash, p.checkpoint_id));
            for (name, seed) in &p.seeds {
                s.push_str(&format!("# seed\t{name}\t{seed}\n"));
            }
        }
        s
    }
}

/// Rank every slate's held-out item with the sum-of-similarities score.
pub fn evaluate(
    ds: &InteractionDataset,
    model: &ModelState,
    embeds: &ItemEmbeddings,
    slates: &[EvalSlate],
    ks: &[usize],
) -> Result<MetricReport> {
    let mut users = Vec::with_capacity(slates.len());
    let mut ranks = Vec::with_capacity(slates.len());
    for slate in slates {
        let ctx = UserContext::new(model, embeds, slate.user, &ds.positives[slate.user]);
        let hs = ctx.score(slate.heldout)?;
        let negs = slate
            .negatives
            .iter()
            .map(|&i| ctx.score(i).map(|s| (i, s)))
            .collect::<Result<Vec<_>>>()?;
        users.push(slate.user);
        ranks.push(rank_in_slate(slate.heldout, hs, &negs));
    }
    Ok(MetricReport::from_ranks(users, ranks, ks))
}

/// Train on `ds` and evaluate on `slates` in one go.
pub fn train_and_evaluate(
    ds: &InteractionDataset,
    nets: &AttributeNetworkSet,
    cfg: &TrainConfig,
    slates: &[EvalSlate],
    ks: &[usize],
) -> Result<(ModelState, MetricReport)> {
    let out = train(ds, nets, cfg, |_, _, _, _| Ok(()))?;
    let embeds = out.model.item_embeddings(nets)?;
    let report = evaluate(ds, &out.model, &embeds, slates, ks)?;
    Ok((out.model, report))
}

/// Cold-start recall for each held-out item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdItemRecall {
    pub item_id: String,
    pub purchasers: usize,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub ks: Vec<usize>,
    pub items: Vec<ColdItemRecall>,
    pub excluded: Vec<String>,
    pub ranked_users: usize,
    pub mean_recall: Vec<f64>,
    /// Expected Recall@K of a uniformly random user ranking: K / ranked users.
    pub random_baseline: Vec<f64>,
}

impl ColdStartReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("item\tpurchasers");
        for k in &self.ks {
            s.push_str(&format!("\trecall@{k}"));
        }
        s.push('\n');
        for it in &self.items {
            s.push_str(&format!("{}\t{}", it.item_id, it.purchasers));
            for r in &it.recall {
                s.push_str(&format!("\t{r}"));
            }
            s.push('\n');
        }
        s.push_str("mean\t");
        for r in &self.mean_recall {
            s.push_str(&format!("\t{r}"));
        }
        s.push_str("\nrandom\t");
        for r in &self.random_baseline {
            s.push_str(&format!("\t{r}"));
        }
        s.push('\n');
        s
    }
}

/// A dataset with `n_hold` items removed for cold-start evaluation.
#[derive(Debug, Clone)]
pub struct ColdStartSplit {
    pub reduced: InteractionDataset,
    /// Held items as (attributes, purchaser user indices).
    pub held: Vec<(crate::ingest::ItemAttributes, Vec<usize>)>,
}

/// Pick `n_hold` items uniformly (seeded) and strip them, with every
/// interaction touching them, from the training data.
pub fn coldstart_split(ds: &InteractionDataset, n_hold: usize, seed: u64) -> Result<ColdStartSplit> {
    if n_hold >= ds.n_items() {
        return Err(Error::Config(format!(
            "cannot hold out {n_hold} of {} items",
            ds.n_items()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held: Vec<usize> = sample(&mut rng, ds.n_items(), n_hold).into_vec();
    coldstart_split_items(ds, &held)
}

/// Strip the given items, with every interaction touching them.
pub fn coldstart_split_items(ds: &InteractionDataset, held: &[usize]) -> Result<ColdStartSplit> {
    let mut held = held.to_vec();
    held.sort_unstable();
    held.dedup();
    if let Some(&bad) = held.iter().find(|&&i| i >= ds.n_items()) {
        return Err(Error::Data(format!("held item index {bad} out of range")));
    }
    let all = ds.all_positive_sets();
    let held_info = held
        .iter()
        .map(|&i| {
            let purchasers = (0..ds.n_users()).filter(|&u| all[u].contains(&i)).collect();
            (ds.item_attributes(i), purchasers)
        })
        .collect();
    let (reduced, _) = ds.without_items(&held);
    Ok(ColdStartSplit {
        reduced,
        held: held_info,
    })
}

/// Rank all users for each cold item by the minimum-similarity score and
/// measure Recall@K against the true purchasers.
pub fn coldstart_evaluate(
    split: &ColdStartSplit,
    nets: &AttributeNetworkSet,
    model: &ModelState,
    ks: &[usize],
) -> Result<ColdStartReport> {
    let ds = &split.reduced;
    let embeds = model.item_embeddings(nets)?;
    let contexts: Vec<UserContext> = (0..ds.n_users())
        .filter(|&u| !ds.positives[u].is_empty())
        .map(|u| UserContext::new(model, &embeds, u, &ds.positives[u]))
        .collect();
    let n_ranked = contexts.len();
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    for (attrs, purchasers) in &split.held {
        if purchasers.is_empty() {
            warn!("cold item {} has no purchasers; excluded", attrs.item_id);
            excluded.push(attrs.item_id.clone());
            continue;
        }
        let att = attach_cold_item(nets, attrs)?;
        let cold = model.cold_embeddings(&att, nets.n_items())?;
        let mut scored = contexts
            .iter()
            .map(|c| c.score_cold(&cold).map(|s| (c.user, s)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let truth: HashSet<usize> = purchasers.iter().copied().collect();
        let recall = ks
            .iter()
            .map(|&k| {
                let hits = scored.iter().take(k).filter(|(u, _)| truth.contains(u)).count();
                hits as f64 / truth.len() as f64
            })
            .collect();
        items.push(ColdItemRecall {
            item_id: attrs.item_id.clone(),
            purchasers: purchasers.len(),
            recall,
        });
    }
    let n_items = items.len().max(1) as f64;
    let mean_recall = (0..ks.len())
        .map(|k| items.iter().map(|it| it.recall[k]).sum::<f64>() / n_items)
        .collect();
    let random_baseline = ks
        .iter()
        .map(|&k| (k as f64 / n_ranked.max(1) as f64).min(1.0))
        .collect();
    Ok(ColdStartReport {
        ks: ks.to_vec(),
        items,
        excluded,
        ranked_users: n_ranked,
        mean_recall,
        random_baseline,
    })
}

/// Full cold-start protocol: split, rebuild the networks, retrain, evaluate.
pub fn coldstart_protocol(
    ds: &InteractionDataset,
    n_hold: usize,
    seed: u64,
    co_min: u32,
    cfg: &TrainConfig,
    ks: &[usize],
) -> Result<ColdStartReport> {
    let split = coldstart_split(ds, n_hold, seed)?;
    let nets = build_networks(&split.reduced, co_min);
    let out = train(&split.reduced, &nets, cfg, |_, _, _, _| Ok(()))?;
    coldstart_evaluate(&split, &nets, &out.model, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_fields: usize,
    pub values_per_field: usize,
    pub min_history: usize,
    pub max_history: usize,
    pub p_high: f64,
    pub p_low: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_users: 300,
            n_items: 200,
            n_fields: 3,
            values_per_field: 8,
            min_history: 10,
            max_history: 16,
            p_high: 0.9,
            p_low: 0.1,
            seed: 0,
        }
    }
}

/// Synthetic data where each user buys by one planted attribute field.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    pub dataset: InteractionDataset,
    pub preferred_field: Vec<usize>,
    /// Per user, the value (index) each field is matched against.
    pub anchors: Vec<Vec<usize>>,
    /// item -> field -> value index
    pub item_values: Vec<Vec<usize>>,
}

impl PlantedDataset {
    /// Fraction of the user's items whose field `k` equals the user's anchor.
    pub fn sharing_rate(&self, user: usize, k: usize) -> f64 {
        let items = &self.dataset.positives[user];
        let hits = items
            .iter()
            .filter(|&&i| self.item_values[i][k] == self.anchors[user][k])
            .count();
        hits as f64 / items.len() as f64
    }
}

/// Users each get a planted field and an anchor value per field; every
/// history slot matches the anchor on the planted field with probability
/// `p_high` and on each other field with probability `p_low`.
pub fn make_planted_dataset(cfg: &PlantedConfig) -> Result<PlantedDataset> {
    if cfg.n_fields == 0 || cfg.values_per_field == 0 || cfg.min_history < 2 || cfg.max_history < cfg.min_history {
        return Err(Error::Config("invalid planted generator settings".into()));
    }
    if cfg.max_history >= cfg.n_items {
        return Err(Error::Config("history length must stay below the item count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let item_values: Vec<Vec<usize>> = (0..cfg.n_items)
        .map(|_| (0..cfg.n_fields).map(|_| rng.gen_range(0..cfg.values_per_field)).collect())
        .collect();
    let mut preferred_field = Vec::with_capacity(cfg.n_users);
    let mut anchors = Vec::with_capacity(cfg.n_users);
    let mut positives = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let pref = rng.gen_range(0..cfg.n_fields);
        let anchor: Vec<usize> = (0..cfg.n_fields).map(|_| rng.gen_range(0..cfg.values_per_field)).collect();
        let len = rng.gen_range(cfg.min_history..=cfg.max_history);
        let mut chosen: Vec<usize> = Vec::with_capacity(len);
        while chosen.len() < len {
            let pattern: Vec<bool> = (0..cfg.n_fields)
                .map(|k| rng.gen_bool(if k == pref { cfg.p_high } else { cfg.p_low }))
                .collect();
            let fits = |i: usize, exact: bool| -> bool {
                !chosen.contains(&i)
                    && (0..cfg.n_fields).all(|k| {
                        (!exact && k != pref) || (item_values[i][k] == anchor[k]) == pattern[k]
                    })
            };
            let mut pool: Vec<usize> = (0..cfg.n_items).filter(|&i| fits(i, true)).collect();
            if pool.is_empty() {
                pool = (0..cfg.n_items).filter(|&i| fits(i, false)).collect();
            }
            if pool.is_empty() {
                pool = (0..cfg.n_items).filter(|i| !chosen.contains(i)).collect();
            }
            chosen.push(*pool.choose(&mut rng).unwrap());
        }
        preferred_field.push(pref);
        anchors.push(anchor);
        positives.push(chosen);
    }
    let dataset = InteractionDataset {
        field_names: (0..cfg.n_fields).map(|k| format!("attr{k}")).collect(),
        user_ids: (0..cfg.n_users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..cfg.n_items).map(|i| format!("i{i}")).collect(),
        timestamps: positives.iter().map(|p: &Vec<usize>| vec![None; p.len()]).collect(),
        positives,
        attributes: item_values
            .iter()
            .map(|vals| {
                vals.iter()
                    .enumerate()
                    .map(|(k, v)| vec![format!("f{k}v{v}")])
                    .collect()
            })
            .collect(),
        heldout: None,
    };
    Ok(PlantedDataset {
        dataset,
        preferred_field,
        anchors,
        item_values,
    })
}

/// Mean normalized attention per user and field over the user's training items.
pub fn mean_attention(ds: &InteractionDataset, model: &ModelState, embeds: &ItemEmbeddings) -> Array2<f64> {
    let k = embeds.n_fields();
    let mut out = Array2::zeros((ds.n_users(), k));
    for (u, items) in ds.positives.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let z = model.users.user(u);
        for &i in items {
            let p = attention_scores(z, &embeds.item(i));
            for (f, w) in p.normalized.iter().enumerate() {
                out[[u, f]] += w;
            }
        }
        out.row_mut(u).mapv_inplace(|v| v / items.len() as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionGroups {
    pub max: Vec<usize>,
    pub min: Vec<usize>,
    pub random: Vec<usize>,
    pub mean_attention: [f64; 3],
    /// Groups were shrunk because there were too few users.
    pub shrunk: bool,
}

/// Users with the largest and smallest mean attention on `field`, plus a
/// seeded random draw from the remaining users.
pub fn attention_groups(attention: &Array2<f64>, field: usize, group_size: usize, seed: u64) -> AttentionGroups {
    let n = attention.nrows();
    let size = group_size.min(n / 3);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| attention[[b, field]].total_cmp(&attention[[a, field]]).then(a.cmp(&b)));
    let max: Vec<usize> = order[..size].to_vec();
    let min: Vec<usize> = order[n - size..].to_vec();
    let mut rest: Vec<usize> = order[size..n - size].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let mut random: Vec<usize> = rest.into_iter().take(size).collect();
    random.sort_unstable();
    let mean = |g: &[usize]| g.iter().map(|&u| attention[[u, field]]).sum::<f64>() / g.len().max(1) as f64;
    AttentionGroups {
        mean_attention: [mean(&max), mean(&random), mean(&min)],
        max,
        min,
        random,
        shrunk: size < group_size,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub field: usize,
    pub groups: AttentionGroups,
    pub before: [MetricReport; 3],
    pub after: [MetricReport; 3],
}

/// Group users by attention on `field` under `model`, retrain without that
/// attribute network, and report group metrics before and after.
#[allow(clippy::too_many_arguments)]
pub fn attention_ablation(
    ds: &InteractionDataset,
    nets: &AttributeNetworkSet,
    model: &ModelState,
    cfg: &TrainConfig,
    slates: &[EvalSlate],
    field: usize,
    group_size: usize,
    ks: &[usize],
) -> Result<AblationReport> {
    if field >= nets.n_fields() || nets.n_fields() < 2 {
        return Err(Error::Config(format!(
            "cannot ablate field {field} of {}",
            nets.n_fields()
        )));
    }
    let embeds = model.item_embeddings(nets)?;
    let attention = mean_attention(ds, model, &embeds);
    let groups = attention_groups(&attention, field, group_size, cfg.seed);
    if groups.shrunk {
        warn!("too few users for groups of {group_size}; shrunk to {}", groups.max.len());
    }
    let full = evaluate(ds, model, &embeds, slates, ks)?;
    let reduced = nets.without_field(field);
    let (_, after) = train_and_evaluate(ds, &reduced, cfg, slates, ks)?;
    let split = |r: &MetricReport| [r.subset(&groups.max), r.subset(&groups.random), r.subset(&groups.min)];
    Ok(AblationReport {
        field,
        before: split(&full),
        after: split(&after),
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    EmbeddingSize,
    Alpha,
}

/// One full train+evaluate per value with shared seeds.
pub fn sensitivity_sweep(
    ds: &InteractionDataset,
    nets: &AttributeNetworkSet,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    slates: &[EvalSlate],
    ks: &[usize],
) -> Result<Vec<(f64, MetricReport)>> {
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::Config(format!("sweep value {v} is not finite")));
            }
            let mut cfg = base.clone();
            match param {
                SweepParam::EmbeddingSize => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Error::Config(format!("embedding size {v} is not a positive integer")));
                    }
                    cfg.embedding_dim = v as usize;
                }
                SweepParam::Alpha => cfg.alpha = v,
            }
            let (_, report) = train_and_evaluate(ds, nets, &cfg, slates, ks)?;
            Ok((v, report))
        })
        .collect()
}
