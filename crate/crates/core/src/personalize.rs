//! User embeddings, per-attribute attention and personalized similarity.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::write_atomically;
use crate::math::{dot, log_sigmoid, sigmoid, softmax, squared_distance};

/// One `d`-dimensional vector per user, stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbeddingTable {
    pub vectors: Array2<f64>,
}

impl UserEmbeddingTable {
    /// Uniform in `[-0.1, 0.1]`.
    pub fn random<R: Rng>(n_users: usize, dim: usize, rng: &mut R) -> Self {
        UserEmbeddingTable {
            vectors: Array2::from_shape_fn((n_users, dim), |_| rng.gen_range(-0.1..=0.1)),
        }
    }

    pub fn constant(n_users: usize, dim: usize, value: f64) -> Self {
        UserEmbeddingTable {
            vectors: Array2::from_elem((n_users, dim), value),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn n_users(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.vectors.row(u).to_slice().expect("standard layout")
    }
}

/// Embeddings of every item in every attribute network: `per_field[k]` is
/// `n_items × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddings {
    pub per_field: Vec<Array2<f64>>,
}

impl ItemEmbeddings {
    pub fn n_fields(&self) -> usize {
        self.per_field.len()
    }

    pub fn n_items(&self) -> usize {
        self.per_field.first().map_or(0, |m| m.nrows())
    }

    pub fn item(&self, i: usize) -> Vec<&[f64]> {
        self.per_field
            .iter()
            .map(|m| m.row(i).to_slice().expect("standard layout"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl AttentionProfile {
    pub fn dominant(&self) -> usize {
        crate::math::argmax(&self.normalized)
    }
}

/// Raw scores `h_k · z` and their softmax over the fields.
pub fn attention_scores(z: &[f64], item_embeds: &[&[f64]]) -> AttentionProfile {
    let raw: Vec<f64> = item_embeds.iter().map(|h| dot(h, z)).collect();
    let normalized = softmax(&raw);
    AttentionProfile { raw, normalized }
}

/// Attention-weighted convex combination of the per-field embeddings.
pub fn personalized_rep(profile: &AttentionProfile, item_embeds: &[&[f64]]) -> Vec<f64> {
    let d = item_embeds.first().map_or(0, |h| h.len());
    let mut rep = vec![0.0; d];
    for (w, h) in profile.normalized.iter().zip(item_embeds) {
        for (r, v) in rep.iter_mut().zip(h.iter()) {
            *r += w * v;
        }
    }
    rep
}

/// Negative squared Euclidean distance.
pub fn personalized_similarity(h_ui: &[f64], h_uj: &[f64]) -> f64 {
    -squared_distance(h_ui, h_uj)
}

/// Personalized representation of item `item_embeds` for user `z`, with the
/// profile it was built from.
pub fn represent(z: &[f64], item_embeds: &[&[f64]]) -> (AttentionProfile, Vec<f64>) {
    let profile = attention_scores(z, item_embeds);
    let rep = personalized_rep(&profile, item_embeds);
    (profile, rep)
}

/// Pull a gradient w.r.t. a personalized representation back onto the user
/// vector (accumulated into `g_z`) and the per-field embeddings.
pub fn rep_backward(
    z: &[f64],
    item_embeds: &[&[f64]],
    profile: &AttentionProfile,
    g_rep: &[f64],
    g_z: &mut [f64],
) -> Vec<Vec<f64>> {
    let w = &profile.normalized;
    // dL/d(normalized_k) = g_rep · h_k; softmax Jacobian gives dL/d(raw_k)
    let g_norm: Vec<f64> = item_embeds.iter().map(|h| dot(g_rep, h)).collect();
    let mean: f64 = w.iter().zip(&g_norm).map(|(a, b)| a * b).sum();
    let g_raw: Vec<f64> = w.iter().zip(&g_norm).map(|(a, g)| a * (g - mean)).collect();
    item_embeds
        .iter()
        .enumerate()
        .map(|(k, h)| {
            for (gz, hv) in g_z.iter_mut().zip(h.iter()) {
                *gz += g_raw[k] * hv;
            }
            g_rep
                .iter()
                .zip(z)
                .map(|(gr, zv)| w[k] * gr + g_raw[k] * zv)
                .collect()
        })
        .collect()
}

/// Gradients of one ranking term, see [`personalize_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct TripleGradients {
    pub loss: f64,
    pub z: Vec<f64>,
    pub anchor: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
}

/// Value and gradients of `log sigmoid(|h_ui - h_uj|^2 - |h_ui - h_un|^2)`
/// w.r.t. the user vector and every per-field embedding of `i`, `j`, `n`.
pub fn personalize_gradients(
    z: &[f64],
    embeds_i: &[&[f64]],
    embeds_j: &[&[f64]],
    embeds_n: &[&[f64]],
) -> TripleGradients {
    let (pi, hi) = represent(z, embeds_i);
    let (pj, hj) = represent(z, embeds_j);
    let (pn, hn) = represent(z, embeds_n);
    let t = squared_distance(&hi, &hj) - squared_distance(&hi, &hn);
    let loss = log_sigmoid(t);
    let dt = sigmoid(-t);

    // dt/dhi = 2(hi-hj) - 2(hi-hn) = 2(hn-hj); dt/dhj = -2(hi-hj); dt/dhn = 2(hi-hn)
    let g_hi: Vec<f64> = hn.iter().zip(&hj).map(|(a, b)| 2.0 * dt * (a - b)).collect();
    let g_hj: Vec<f64> = hi.iter().zip(&hj).map(|(a, b)| -2.0 * dt * (a - b)).collect();
    let g_hn: Vec<f64> = hi.iter().zip(&hn).map(|(a, b)| 2.0 * dt * (a - b)).collect();

    let mut g_z = vec![0.0; z.len()];
    let anchor = rep_backward(z, embeds_i, &pi, &g_hi, &mut g_z);
    let positive = rep_backward(z, embeds_j, &pj, &g_hj, &mut g_z);
    let negative = rep_backward(z, embeds_n, &pn, &g_hn, &mut g_z);
    TripleGradients {
        loss,
        z: g_z,
        anchor,
        positive,
        negative,
    }
}

/// Delimited export: `id<TAB>v1<TAB>...<TAB>vd` per row.
pub fn write_embeddings(path: &Path, ids: &[String], vectors: &Array2<f64>) -> Result<()> {
    if ids.len() != vectors.nrows() {
        return Err(Error::Dimension {
            context: "embedding export rows",
            expected: vectors.nrows(),
            got: ids.len(),
        });
    }
    write_atomically(path, |w| {
        for (id, row) in ids.iter().zip(vectors.rows()) {
            write!(w, "{id}").map_err(|e| Error::io(path, e))?;
            for v in row {
                write!(w, "\t{v}").map_err(|e| Error::io(path, e))?;
            }
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn raw_score_is_dot_product() {
        let p = attention_scores(&[0.5, 0.5], &[&[1.0, 2.0]]);
        assert_eq!(p.raw, vec![1.5]);
        assert_eq!(p.normalized, vec![1.0]);
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let p = attention_scores(&[1.0, 0.0], &[&[0.3, 0.1], &[0.3, 0.9], &[0.3, 0.5]]);
        for w in p.normalized {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_field_rep_is_the_embedding() {
        let e = [0.2, 0.7];
        let (_, rep) = represent(&[5.0, -3.0], &[&e]);
        assert_eq!(rep, e.to_vec());
    }

    #[test]
    fn uniform_weights_average_embeddings() {
        let p = AttentionProfile {
            raw: vec![0.0, 0.0],
            normalized: vec![0.5, 0.5],
        };
        assert_eq!(personalized_rep(&p, &[&[1.0, 0.0], &[0.0, 1.0]]), vec![0.5, 0.5]);
    }

    #[test]
    fn rep_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_vecs(&mut rng, 3, 5);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (p, rep) = represent(&z, &refs(&e));
        for c in 0..5 {
            let mut s = 0.0;
            for k in 0..3 {
                s += p.normalized[k] * e[k][c];
            }
            assert!((rep[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_values() {
        assert_eq!(personalized_similarity(&[0.3, 0.2], &[0.3, 0.2]), 0.0);
        assert_eq!(personalized_similarity(&[0.0, 0.0], &[3.0, 4.0]), -25.0);
    }

    #[test]
    fn identical_pos_and_neg_reps_scale_by_quarter() {
        let ei = [[0.1, 0.9]];
        let ej = [[0.6, 0.2]];
        let g = personalize_gradients(&[0.3, 0.3], &[&ei[0]], &[&ej[0]], &[&ej[0]]);
        assert!((g.loss - 0.5f64.ln()).abs() < 1e-15);
        // dt = sigmoid(0) = 0.5, so grads are 2*0.5*(diff) with anchor cancelling
        assert!(g.anchor[0].iter().all(|v| v.abs() < 1e-15));
        let diff: Vec<f64> = ei[0].iter().zip(&ej[0]).map(|(a, b)| a - b).collect();
        for c in 0..2 {
            assert!((g.positive[0][c] + diff[c]).abs() < 1e-15);
            assert!((g.negative[0][c] - diff[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_field_user_gradient_is_zero() {
        let g = personalize_gradients(&[0.4, -0.2], &[&[0.1, 0.2]], &[&[0.7, 0.1]], &[&[0.3, 0.9]]);
        assert!(g.z.iter().all(|&v| v == 0.0));
    }

    fn triple_loss(z: &[f64], e: &[Vec<Vec<f64>>; 3]) -> f64 {
        let (_, hi) = represent(z, &refs(&e[0]));
        let (_, hj) = represent(z, &refs(&e[1]));
        let (_, hn) = represent(z, &refs(&e[2]));
        log_sigmoid(squared_distance(&hi, &hj) - squared_distance(&hi, &hn))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
    }

    #[test]
    fn triple_gradients_match_central_differences() {
        let step = 1e-5;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (k, d) = (3, 4);
            let e = [random_vecs(&mut rng, k, d), random_vecs(&mut rng, k, d), random_vecs(&mut rng, k, d)];
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = personalize_gradients(&z, &refs(&e[0]), &refs(&e[1]), &refs(&e[2]));
            for c in 0..d {
                let mut zp = z.clone();
                zp[c] += step;
                let mut zm = z.clone();
                zm[c] -= step;
                let fd = (triple_loss(&zp, &e) - triple_loss(&zm, &e)) / (2.0 * step);
                assert!(rel(g.z[c], fd) < 1e-4, "z[{c}] {} vs {fd}", g.z[c]);
            }
            let analytic = [&g.anchor, &g.positive, &g.negative];
            for which in 0..3 {
                for f in 0..k {
                    for c in 0..d {
                        let mut ep = e.clone();
                        ep[which][f][c] += step;
                        let mut em = e.clone();
                        em[which][f][c] -= step;
                        let fd = (triple_loss(&z, &ep) - triple_loss(&z, &em)) / (2.0 * step);
                        assert!(rel(analytic[which][f][c], fd) < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn export_writes_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.tsv");
        let m = Array2::from_shape_vec((2, 2), vec![0.5, 1.0, -0.25, 2.0]).unwrap();
        write_embeddings(&p, &["a".into(), "b".into()], &m).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a\t0.5\t1\nb\t-0.25\t2\n");
        assert!(write_embeddings(&p, &["a".into()], &m).is_err());
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, len)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(raw in vec_strategy(4), c in -50.0f64..50.0) {
            let a = softmax(&raw);
            let shifted: Vec<f64> = raw.iter().map(|r| r + c).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(a.iter().all(|&w| w > 0.0));
        }

        #[test]
        fn rep_lies_in_coordinatewise_hull(e in proptest::collection::vec(vec_strategy(3), 1..5), z in vec_strategy(3)) {
            let (_, rep) = represent(&z, &refs(&e));
            for c in 0..3 {
                let lo = e.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = e.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(rep[c] >= lo - 1e-12 && rep[c] <= hi + 1e-12);
            }
        }

        #[test]
        fn scaling_user_keeps_dominant_field(e in proptest::collection::vec(vec_strategy(3), 2..5), z in vec_strategy(3), t in 1.0f64..20.0) {
            let a = attention_scores(&z, &refs(&e));
            let zt: Vec<f64> = z.iter().map(|v| v * t).collect();
            let b = attention_scores(&zt, &refs(&e));
            // compare through the raw scores to avoid softmax rounding ties
            prop_assert_eq!(crate::math::argmax(&a.raw), crate::math::argmax(&b.raw));
        }

        #[test]
        fn root_distance_is_a_metric(a in vec_strategy(4), b in vec_strategy(4), c in vec_strategy(4)) {
            let d = |x: &[f64], y: &[f64]| (-personalized_similarity(x, y)).sqrt();
            prop_assert!(d(&a, &b) <= d(&a, &c) + d(&c, &b) + 1e-9);
            prop_assert_eq!(personalized_similarity(&a, &b), personalized_similarity(&b, &a));
        }
    }
}
