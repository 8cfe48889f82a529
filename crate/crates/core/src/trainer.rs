//! Joint training of the attribute autoencoders and the user table.
//!
//! The objective is `L_net + alpha * L_rank`: the weighted reconstruction
//! loss of every item touched by the batch, plus the sum over sampled
//! `(u, i, j, n)` triples of `log sigmoid(|h_ui - h_uj|^2 - |h_ui - h_un|^2)`.
//! Both are minimized with Adam.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{weighted_recon_loss_batch, Autoencoder, LayerParams, ReconPenalty};
use crate::error::{Error, Result};
use crate::ingest::{write_atomically, InteractionDataset};
use crate::netbuild::{AttributeNetworkSet, ColdAttachment};
use crate::personalize::{personalize_gradients, ItemEmbeddings, UserEmbeddingTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Reconstruction plus ranking loss.
    Full,
    /// Ranking loss only.
    L1,
    /// Reconstruction loss only, user embeddings frozen at 1.0.
    L2,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(TrainMode::Full),
            "l1" | "l1-only" => Ok(TrainMode::L1),
            "l2" | "l2-only" => Ok(TrainMode::L2),
            other => Err(Error::Config(format!("unknown training mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Full => "full",
            TrainMode::L1 => "l1",
            TrainMode::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub negatives_per_pair: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Encoder widths between the input and the embedding layer.
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Minimize `-L_rank` instead of `L_rank`. Diagnostic only.
    pub flip_rank_sign: bool,
    /// Overrides `ceil(training actions / batch_size)`.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2000,
            learning_rate: 0.001,
            alpha: 1500.0,
            beta: 0.2,
            epochs: 200,
            negatives_per_pair: 1,
            seed: 0,
            mode: TrainMode::Full,
            hidden_dims: vec![1024, 256],
            embedding_dim: 32,
            flip_rank_sign: false,
            batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives_per_pair == 0 || self.embedding_dim == 0 {
            return Err(Error::Config(
                "batch_size, negatives_per_pair and embedding_dim must be positive".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        ReconPenalty::new(self.beta).map(|_| ())
    }

    pub fn layer_dims(&self, n_items: usize) -> Vec<usize> {
        let mut dims = vec![n_items];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    pub fn loss_weights(&self) -> LossWeights {
        let sign = if self.flip_rank_sign { -1.0 } else { 1.0 };
        match self.mode {
            TrainMode::Full => LossWeights { net: 1.0, rank: sign * self.alpha },
            TrainMode::L1 => LossWeights { net: 0.0, rank: sign * self.alpha },
            TrainMode::L2 => LossWeights { net: 1.0, rank: 0.0 },
        }
    }
}

/// Coefficients of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub net: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub user: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws `(u, i, j, n)` triples from training positives.
pub struct TripleSampler<'a> {
    ds: &'a InteractionDataset,
    eligible: Vec<usize>,
    positive_sets: Vec<HashSet<usize>>,
}

impl<'a> TripleSampler<'a> {
    pub fn new(ds: &'a InteractionDataset) -> Result<Self> {
        let n_items = ds.n_items();
        let positive_sets: Vec<HashSet<usize>> = ds
            .positives
            .iter()
            .map(|p| p.iter().copied().collect())
            .collect();
        let eligible: Vec<usize> = (0..ds.n_users()).filter(|&u| positive_sets[u].len() >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::Data("no user has two training positives".into()));
        }
        if let Some(&u) = eligible.iter().find(|&&u| positive_sets[u].len() >= n_items) {
            return Err(Error::Data(format!(
                "user {} holds every item; no negative can be sampled",
                ds.user_ids[u]
            )));
        }
        Ok(TripleSampler {
            ds,
            eligible,
            positive_sets,
        })
    }

    /// `batch_size` triples. Users are uniform over those with two or more
    /// positives, `(i, j)` uniform over distinct ordered positive pairs,
    /// `n` uniform over non-positives by rejection.
    pub fn sample<R: Rng>(&self, batch_size: usize, negatives_per_pair: usize, rng: &mut R) -> Vec<TrainingTriple> {
        let n_items = self.ds.n_items();
        let per_pair = negatives_per_pair.max(1);
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            let user = self.eligible[rng.gen_range(0..self.eligible.len())];
            let items = &self.ds.positives[user];
            let a = rng.gen_range(0..items.len());
            let mut b = rng.gen_range(0..items.len() - 1);
            if b >= a {
                b += 1;
            }
            for _ in 0..per_pair {
                if out.len() == batch_size {
                    break;
                }
                let negative = loop {
                    let n = rng.gen_range(0..n_items);
                    if !self.positive_sets[user].contains(&n) {
                        break n;
                    }
                };
                out.push(TrainingTriple {
                    user,
                    anchor: items[a],
                    positive: items[b],
                    negative,
                });
            }
        }
        out
    }
}

pub fn sample_batch<R: Rng>(ds: &InteractionDataset, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<TrainingTriple>> {
    Ok(TripleSampler::new(ds)?.sample(cfg.batch_size, cfg.negatives_per_pair, rng))
}

/// Every `(u, i, j, n)` combination. Only sensible on micro-fixtures.
pub fn enumerate_triples(ds: &InteractionDataset) -> Vec<TrainingTriple> {
    let mut out = Vec::new();
    for (user, items) in ds.positives.iter().enumerate() {
        let set: HashSet<usize> = items.iter().copied().collect();
        for &anchor in items {
            for &positive in items {
                if anchor == positive {
                    continue;
                }
                for negative in (0..ds.n_items()).filter(|n| !set.contains(n)) {
                    out.push(TrainingTriple {
                        user,
                        anchor,
                        positive,
                        negative,
                    });
                }
            }
        }
    }
    out
}

/// Trainable state: one autoencoder per attribute network plus the user table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoders: Vec<Autoencoder>,
    pub users: UserEmbeddingTable,
}

impl ModelState {
    /// Encoders first (field order), then the user table, all from `rng`.
    pub fn init<R: Rng>(n_fields: usize, n_users: usize, n_items: usize, cfg: &TrainConfig, rng: &mut R) -> Self {
        let dims = cfg.layer_dims(n_items);
        let encoders = (0..n_fields).map(|k| Autoencoder::random(k, &dims, rng)).collect();
        let users = match cfg.mode {
            TrainMode::L2 => UserEmbeddingTable::constant(n_users, cfg.embedding_dim, 1.0),
            _ => UserEmbeddingTable::random(n_users, cfg.embedding_dim, rng),
        };
        ModelState { encoders, users }
    }

    pub fn n_fields(&self) -> usize {
        self.encoders.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.users.dim()
    }

    pub fn zeros_like(&self) -> Self {
        ModelState {
            encoders: self.encoders.iter().map(Autoencoder::zeros_like).collect(),
            users: UserEmbeddingTable {
                vectors: Array2::zeros(self.users.vectors.raw_dim()),
            },
        }
    }

    /// Parameter blocks in a fixed order with a readable path each.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (k, enc) in self.encoders.iter().enumerate() {
            for (l, layer) in enc.layers().enumerate() {
                out.push((format!("encoder[{k}].layer[{l}].weights"), layer.weights.as_slice().unwrap()));
                out.push((format!("encoder[{k}].layer[{l}].bias"), layer.bias.as_slice().unwrap()));
            }
        }
        out.push(("users".to_string(), self.users.vectors.as_slice().unwrap()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            for layer in enc.layers_mut() {
                let LayerParams { weights, bias } = layer;
                out.push(weights.as_slice_mut().unwrap());
                out.push(bias.as_slice_mut().unwrap());
            }
        }
        out.push(self.users.vectors.as_slice_mut().unwrap());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// Embeddings of every item in every attribute network.
    pub fn item_embeddings(&self, nets: &AttributeNetworkSet) -> Result<ItemEmbeddings> {
        check_compatible(self, nets)?;
        let n = nets.n_items();
        let all: Vec<usize> = (0..n).collect();
        let per_field = self
            .encoders
            .par_iter()
            .zip(nets.graphs.par_iter())
            .map(|(enc, g)| {
                let mut h = Array2::zeros((n, enc.embedding_dim()));
                for chunk in all.chunks(chunk_rows(n)) {
                    let x = dense_rows(g, chunk, n);
                    let mut y = x;
                    for layer in &enc.encoder {
                        y = layer_forward(layer, &y);
                    }
                    for (r, &i) in chunk.iter().enumerate() {
                        h.row_mut(i).assign(&y.row(r));
                    }
                }
                h
            })
            .collect();
        Ok(ItemEmbeddings { per_field })
    }

    /// Per-field embeddings of an item attached after training.
    pub fn cold_embeddings(&self, att: &ColdAttachment, n_items: usize) -> Result<Vec<Vec<f64>>> {
        self.encoders
            .iter()
            .zip(att.dense_rows(n_items))
            .map(|(enc, row)| enc.encode_cold(&row))
            .collect()
    }
}

fn layer_forward(layer: &LayerParams, x: &Array2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weights.t());
    z += &layer.bias;
    z.mapv_inplace(crate::math::sigmoid);
    z
}

fn check_compatible(model: &ModelState, nets: &AttributeNetworkSet) -> Result<()> {
    if model.n_fields() != nets.n_fields() {
        return Err(Error::Dimension {
            context: "attribute networks vs encoders",
            expected: model.n_fields(),
            got: nets.n_fields(),
        });
    }
    if let Some(enc) = model.encoders.first() {
        if enc.input_dim() != nets.n_items() {
            return Err(Error::Dimension {
                context: "encoder input width vs items",
                expected: enc.input_dim(),
                got: nets.n_items(),
            });
        }
    }
    Ok(())
}

/// Rows per forward chunk, keeping a dense chunk near 4M entries.
fn chunk_rows(n_items: usize) -> usize {
    (4_000_000 / n_items.max(1)).max(1)
}

fn dense_rows(g: &crate::netbuild::AttributeNetwork, items: &[usize], n: usize) -> Array2<f64> {
    let mut x = Array2::zeros((items.len(), n));
    for (r, &i) in items.iter().enumerate() {
        for &j in &g.rows[i] {
            x[[r, j]] = 1.0;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub net: f64,
    pub rank: f64,
    pub total: f64,
}

/// Loss of one batch and, when `with_grads`, its gradient w.r.t. every
/// parameter (shaped like the model).
pub fn evaluate_batch(
    model: &ModelState,
    nets: &AttributeNetworkSet,
    batch: &[TrainingTriple],
    weights: LossWeights,
    penalty: ReconPenalty,
    with_grads: bool,
) -> Result<(LossParts, Option<ModelState>)> {
    evaluate_batch_chunked(model, nets, batch, weights, penalty, with_grads, chunk_rows(nets.n_items()))
}

fn evaluate_batch_chunked(
    model: &ModelState,
    nets: &AttributeNetworkSet,
    batch: &[TrainingTriple],
    weights: LossWeights,
    penalty: ReconPenalty,
    with_grads: bool,
    chunk: usize,
) -> Result<(LossParts, Option<ModelState>)> {
    check_compatible(model, nets)?;
    let n = nets.n_items();
    let mut items: Vec<usize> = batch
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect();
    items.sort_unstable();
    items.dedup();
    let row_of = |i: usize| items.binary_search(&i).unwrap();
    let single_chunk = items.len() <= chunk;

    // Phase 1: embeddings (and, when everything fits one chunk, the full
    // forward cache) per field.
    struct FieldPass {
        embeds: Array2<f64>,
        net_loss: f64,
        cache: Option<crate::encoder::Forward>,
    }
    let passes: Vec<FieldPass> = model
        .encoders
        .par_iter()
        .zip(nets.graphs.par_iter())
        .map(|(enc, g)| -> Result<FieldPass> {
            let mut embeds = Array2::zeros((items.len(), enc.embedding_dim()));
            let mut net_loss = 0.0;
            let mut cache = None;
            for (c, rows) in items.chunks(chunk).enumerate() {
                let fwd = enc.forward_batch(dense_rows(g, rows, n))?;
                let (l, _) = weighted_recon_loss_batch(fwd.input().view(), fwd.reconstruction().view(), penalty);
                net_loss += l;
                embeds
                    .slice_mut(ndarray::s![c * chunk..c * chunk + rows.len(), ..])
                    .assign(fwd.embeddings());
                if single_chunk {
                    cache = Some(fwd);
                }
            }
            Ok(FieldPass {
                embeds,
                net_loss,
                cache,
            })
        })
        .collect::<Result<_>>()?;

    // Ranking term.
    let k_fields = model.n_fields();
    let d = model.embedding_dim();
    let mut rank = 0.0;
    let mut g_embeds: Vec<Array2<f64>> = vec![Array2::zeros((items.len(), d)); k_fields];
    let mut g_users = Array2::zeros(model.users.vectors.raw_dim());
    let rank_active = weights.rank != 0.0;
    for t in batch {
        let (ri, rj, rn) = (row_of(t.anchor), row_of(t.positive), row_of(t.negative));
        let gather = |r: usize| -> Vec<&[f64]> {
            passes.iter().map(|p| p.embeds.row(r).to_slice().unwrap()).collect()
        };
        let z = model.users.user(t.user);
        let g = personalize_gradients(z, &gather(ri), &gather(rj), &gather(rn));
        rank += g.loss;
        if with_grads && rank_active {
            for k in 0..k_fields {
                for (row, grad) in [(ri, &g.anchor[k]), (rj, &g.positive[k]), (rn, &g.negative[k])] {
                    let mut dst = g_embeds[k].row_mut(row);
                    for (a, b) in dst.iter_mut().zip(grad) {
                        *a += weights.rank * b;
                    }
                }
            }
            let mut gu = g_users.row_mut(t.user);
            for (a, b) in gu.iter_mut().zip(&g.z) {
                *a += weights.rank * b;
            }
        }
    }
    let net: f64 = passes.iter().map(|p| p.net_loss).sum();
    let parts = LossParts {
        net,
        rank,
        total: weights.net * net + weights.rank * rank,
    };
    if !with_grads {
        return Ok((parts, None));
    }

    // Phase 2: backpropagate through each autoencoder.
    let net_active = weights.net != 0.0;
    let encoders: Vec<Autoencoder> = model
        .encoders
        .par_iter()
        .zip(nets.graphs.par_iter())
        .zip(passes.into_par_iter().zip(g_embeds.into_par_iter()))
        .map(|((enc, g), (pass, g_emb))| -> Result<Autoencoder> {
            let mut total = enc.zeros_like();
            for (c, rows) in items.chunks(chunk).enumerate() {
                let fwd = match &pass.cache {
                    Some(f) => f.clone(),
                    None => enc.forward_batch(dense_rows(g, rows, n))?,
                };
                let d_recon = net_active.then(|| {
                    let (_, mut dr) =
                        weighted_recon_loss_batch(fwd.input().view(), fwd.reconstruction().view(), penalty);
                    dr *= weights.net;
                    dr
                });
                let d_embed = rank_active
                    .then(|| g_emb.slice(ndarray::s![c * chunk..c * chunk + rows.len(), ..]).to_owned());
                let part = enc.backward(&fwd, d_recon.as_ref(), d_embed.as_ref());
                for (acc, p) in total.layers_mut().zip(part.layers()) {
                    acc.weights += &p.weights;
                    acc.bias += &p.bias;
                }
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok((
        parts,
        Some(ModelState {
            encoders,
            users: UserEmbeddingTable { vectors: g_users },
        }),
    ))
}

/// Sum over triples of `log sigmoid(d_pos^2 - d_neg^2)`.
pub fn ranking_loss(
    batch: &[TrainingTriple],
    model: &ModelState,
    nets: &AttributeNetworkSet,
) -> Result<f64> {
    let (parts, _) = evaluate_batch(model, nets, batch, LossWeights { net: 0.0, rank: 1.0 }, ReconPenalty::default(), false)?;
    Ok(parts.rank)
}

/// `L_net + alpha * L_rank` as configured by `cfg.mode`.
pub fn joint_loss(
    batch: &[TrainingTriple],
    model: &ModelState,
    nets: &AttributeNetworkSet,
    cfg: &TrainConfig,
) -> Result<f64> {
    let penalty = ReconPenalty::new(cfg.beta)?;
    let (parts, _) = evaluate_batch(model, nets, batch, cfg.loss_weights(), penalty, false)?;
    Ok(parts.total)
}

/// Adam moments for every parameter block of a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &ModelState) -> Self {
        let sizes: Vec<usize> = model.blocks().iter().map(|(_, b)| b.len()).collect();
        Self::new(&sizes)
    }
}

/// One bias-corrected Adam update over matching parameter/gradient blocks.
/// `frozen[b]` blocks keep their values. A non-finite gradient aborts
/// before anything is touched.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[(String, &[f64])],
    frozen: &[bool],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            context: "adam parameter blocks",
            expected: state.m.len(),
            got: params.len(),
        });
    }
    for ((p, (path, g)), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Dimension {
                context: "adam block length",
                expected: p.len(),
                got: g.len(),
            });
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at {path}[{pos}]")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (b, (p, (_, g))) in params.iter_mut().zip(grads).enumerate() {
        if frozen.get(b).copied().unwrap_or(false) {
            continue;
        }
        let (m, v) = (&mut state.m[b], &mut state.v[b]);
        for idx in 0..p.len() {
            let gi = g[idx];
            m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
            v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub net: f64,
    pub rank: f64,
    pub total: f64,
}

/// Epoch-level losses; the delimited form excludes wall time so reruns
/// compare byte-for-byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
    pub wall_seconds: Vec<f64>,
}

impl LossTrace {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tl_net\tl_rank\tl_rec\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.net, e.rank, e.total));
        }
        s
    }

    pub fn timing_tsv(&self) -> String {
        let mut s = String::from("epoch\twall_seconds\n");
        for (e, w) in self.epochs.iter().zip(&self.wall_seconds) {
            s.push_str(&format!("{}\t{:.3}\n", e.epoch, w));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub adam: AdamState,
    pub trace: LossTrace,
}

/// Train from a fresh seeded initialization. `on_epoch` sees the state after
/// every completed epoch (checkpointing hook); a non-finite epoch loss
/// aborts, leaving the previous epoch as the last good state.
pub fn train<F>(
    ds: &InteractionDataset,
    nets: &AttributeNetworkSet,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelState, &AdamState, &LossTrace) -> Result<()>,
{
    cfg.validate()?;
    if nets.n_items() != ds.n_items() {
        return Err(Error::Dimension {
            context: "network items vs dataset items",
            expected: ds.n_items(),
            got: nets.n_items(),
        });
    }
    let penalty = ReconPenalty::new(cfg.beta)?;
    let weights = cfg.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelState::init(nets.n_fields(), ds.n_users(), ds.n_items(), cfg, &mut rng);
    let mut adam = AdamState::for_model(&model);
    let n_blocks = adam.m.len();
    let mut frozen = vec![false; n_blocks];
    if cfg.mode == TrainMode::L2 {
        frozen[n_blocks - 1] = true;
    }
    let sampler = TripleSampler::new(ds)?;
    let batches = cfg
        .batches_per_epoch
        .unwrap_or_else(|| ds.n_train_actions().div_ceil(cfg.batch_size))
        .max(1);
    let mut trace = LossTrace::default();
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut acc = EpochLoss {
            epoch,
            net: 0.0,
            rank: 0.0,
            total: 0.0,
        };
        for _ in 0..batches {
            let batch = sampler.sample(cfg.batch_size, cfg.negatives_per_pair, &mut rng);
            let (parts, grads) = evaluate_batch(&model, nets, &batch, weights, penalty, true)?;
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite in epoch {epoch}; last good state is epoch {}",
                    epoch as i64 - 1
                )));
            }
            acc.net += parts.net;
            acc.rank += parts.rank;
            acc.total += parts.total;
            let grads = grads.expect("requested gradients");
            let grad_blocks = grads.blocks();
            let owned: Vec<(String, &[f64])> = grad_blocks.into_iter().collect();
            let mut params = model.blocks_mut();
            adam_step(&mut params, &owned, &frozen, &mut adam, cfg.learning_rate)?;
        }
        info!(
            "epoch {epoch}: l_net={:.4} l_rank={:.4} l_rec={:.4}",
            acc.net, acc.rank, acc.total
        );
        trace.epochs.push(acc);
        trace.wall_seconds.push(started.elapsed().as_secs_f64());
        on_epoch(epoch, &model, &adam, &trace)?;
    }
    Ok(TrainOutcome { model, adam, trace })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ERANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model, beyond its raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub epoch: usize,
    pub config: TrainConfig,
    pub n_users: usize,
    pub n_fields: usize,
    pub layer_dims: Vec<usize>,
    /// Item ids removed from training (cold-start protocol).
    pub excluded_items: Vec<String>,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ModelState,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn new(epoch: usize, cfg: &TrainConfig, model: &ModelState, adam: &AdamState, excluded_items: Vec<String>) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                epoch,
                config: cfg.clone(),
                n_users: model.users.n_users(),
                n_fields: model.n_fields(),
                layer_dims: model.encoders.first().map(|e| e.layer_dims.clone()).unwrap_or_default(),
                excluded_items,
                adam_step: adam.step,
            },
            model: model.clone(),
            adam: adam.clone(),
        }
    }

    /// Layout: magic, u32 version, u32 header length, JSON header, then the
    /// model blocks, Adam first moments and Adam second moments as
    /// little-endian f64 in [`ModelState::blocks`] order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let push = |out: &mut Vec<u8>, vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, b) in self.model.blocks() {
            push(&mut out, b);
        }
        for b in self.adam.m.iter().chain(&self.adam.v) {
            push(&mut out, b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let cfg = &header.config;
        if header.layer_dims.len() < 2 {
            return Err(bad("layer dims too short"));
        }
        let n_items = header.layer_dims[0];
        let mut model = ModelState {
            encoders: (0..header.n_fields)
                .map(|k| Autoencoder::zeros(k, &header.layer_dims))
                .collect(),
            users: UserEmbeddingTable {
                vectors: Array2::zeros((header.n_users, cfg.embedding_dim)),
            },
        };
        if cfg.layer_dims(n_items) != header.layer_dims {
            return Err(bad("layer dims disagree with config"));
        }
        let mut cursor = 16 + hlen;
        let mut take = |dst: &mut [f64]| -> Result<()> {
            let need = dst.len() * 8;
            let src = bytes.get(cursor..cursor + need).ok_or_else(|| bad("truncated parameters"))?;
            for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            cursor += need;
            Ok(())
        };
        for b in model.blocks_mut() {
            take(b)?;
        }
        let mut adam = AdamState::for_model(&model);
        adam.step = header.adam_step;
        for b in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            take(b)?;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, model, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomically(path, |w| w.write_all(&bytes).map_err(|e| Error::io(path, e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut r| r.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying this checkpoint in reports.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }
}
