use std::collections::{BTreeMap, BTreeSet, HashSet};

use eran::encoder::ReconPenalty;
use eran::evalkit::{build_slates, make_planted_dataset, PlantedConfig};
use eran::ingest::{filter_and_binarize, leave_one_out_split, InteractionDataset, ItemAttributes, RawInteraction};
use eran::math::squared_distance;
use eran::netbuild::{attach_cold_item, build_networks};
use eran::personalize::represent;
use eran::recommend::{score_item, top_k};
use eran::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn s(v: &str) -> String {
    v.to_string()
}

fn brute_filter(raw: &[RawInteraction], attrs: &[ItemAttributes], min_history: usize, th: f64) -> BTreeSet<(String, String)> {
    let complete: HashSet<&str> = attrs.iter().filter(|a| a.is_complete()).map(|a| a.item_id.as_str()).collect();
    let mut pairs: BTreeSet<(String, String)> = raw
        .iter()
        .filter(|r| r.rating > th && complete.contains(r.item_id.as_str()))
        .map(|r| (r.user_id.clone(), r.item_id.clone()))
        .collect();
    loop {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (u, _) in &pairs {
            *counts.entry(u.as_str()).or_default() += 1;
        }
        let next: BTreeSet<(String, String)> =
            pairs.iter().filter(|(u, _)| counts[u.as_str()] >= min_history).cloned().collect();
        if next == pairs {
            return pairs;
        }
        pairs = next;
    }
}

fn dataset_pairs(ds: &InteractionDataset) -> BTreeSet<(String, String)> {
    ds.positives
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (ds.user_ids[u].clone(), ds.item_ids[i].clone())))
        .collect()
}

#[test]
fn filter_matches_brute_force_and_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names = vec![s("genre"), s("director")];
    for _ in 0..40 {
        let attrs: Vec<ItemAttributes> = (0..12)
            .map(|i| {
                let missing = rng.gen_bool(0.15);
                ItemAttributes::new(
                    format!("i{i}"),
                    vec![
                        vec![format!("g{}", rng.gen_range(0..3))],
                        if missing { vec![] } else { vec![format!("d{}", rng.gen_range(0..4))] },
                    ],
                )
            })
            .collect();
        let raw: Vec<RawInteraction> = (0..80)
            .map(|_| RawInteraction {
                user_id: format!("u{}", rng.gen_range(0..8)),
                item_id: format!("i{}", rng.gen_range(0..12)),
                rating: rng.gen_range(1..=5) as f64,
                timestamp: Some(rng.gen_range(0..1000)),
            })
            .collect();
        let expected = brute_filter(&raw, &attrs, 3, 3.0);
        match filter_and_binarize(&raw, &attrs, &names, 3, 3.0) {
            Ok((ds, _)) => {
                assert_eq!(dataset_pairs(&ds), expected);
                let (raw2, attrs2) = ds.to_raw();
                let (again, _) = filter_and_binarize(&raw2, &attrs2, &names, 3, 3.0).unwrap();
                assert_eq!(again, ds);
            }
            Err(_) => assert!(expected.is_empty()),
        }
    }
}

fn planted_split(seed: u64) -> InteractionDataset {
    let p = make_planted_dataset(&PlantedConfig {
        n_users: 60,
        n_items: 50,
        min_history: 5,
        max_history: 10,
        seed,
        ..Default::default()
    })
    .unwrap();
    leave_one_out_split(&p.dataset, seed).unwrap()
}

/// Pearson chi-square statistic against uniform counts.
fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Upper 0.999 quantile of chi-square with `df` degrees of freedom
/// (Wilson-Hilferty approximation).
fn chi_square_critical(df: usize) -> f64 {
    let k = df as f64;
    let z = 3.090;
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

#[test]
fn negatives_are_uniform_over_non_positives() {
    let ds = planted_split(1);
    let sampler = TripleSampler::new(&ds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let user = ds.positives.iter().position(|p| p.len() >= 2).unwrap();
    let positives: HashSet<usize> = ds.positives[user].iter().copied().collect();
    let allowed: Vec<usize> = (0..ds.n_items()).filter(|i| !positives.contains(i)).collect();
    let mut counts = vec![0usize; ds.n_items()];
    let mut draws = 0;
    while draws < 40_000 {
        for t in sampler.sample(2000, 1, &mut rng) {
            assert!(!ds.positives[t.user].contains(&t.negative));
            assert_ne!(t.anchor, t.positive);
            if t.user == user {
                counts[t.negative] += 1;
                draws += 1;
            }
        }
    }
    let observed: Vec<usize> = allowed.iter().map(|&i| counts[i]).collect();
    assert!(chi_square(&observed) < chi_square_critical(observed.len() - 1));
}

#[test]
fn slate_negatives_are_uniform() {
    let ds = planted_split(2);
    let user = 0;
    let excluded: HashSet<usize> = ds.positives[user]
        .iter()
        .copied()
        .chain([ds.heldout.as_ref().unwrap()[user]])
        .collect();
    let pool: Vec<usize> = (0..ds.n_items()).filter(|i| !excluded.contains(i)).collect();
    let mut counts = vec![0usize; ds.n_items()];
    for seed in 0..600 {
        let slates = build_slates(&ds, seed, 20).unwrap();
        let negs = &slates[user].negatives;
        assert_eq!(negs.iter().collect::<HashSet<_>>().len(), 20);
        for &n in negs {
            assert!(!excluded.contains(&n));
            counts[n] += 1;
        }
    }
    let observed: Vec<usize> = pool.iter().map(|&i| counts[i]).collect();
    assert!(chi_square(&observed) < chi_square_critical(observed.len() - 1));
}

#[test]
fn planted_sharing_rates_match_generator_probabilities() {
    // a large item pool keeps draws without replacement from depleting
    // the matching items
    let cfg = PlantedConfig {
        n_items: 2000,
        ..Default::default()
    };
    let p = make_planted_dataset(&cfg).unwrap();
    let (mut hi, mut hi_n, mut lo, mut lo_n) = (0.0, 0usize, 0.0, 0usize);
    for u in 0..cfg.n_users {
        let len = p.dataset.positives[u].len();
        for k in 0..cfg.n_fields {
            let rate = p.sharing_rate(u, k) * len as f64;
            if k == p.preferred_field[u] {
                hi += rate;
                hi_n += len;
            } else {
                lo += rate;
                lo_n += len;
            }
        }
    }
    let ci = |p: f64, n: usize| 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    assert!((hi / hi_n as f64 - cfg.p_high).abs() < ci(cfg.p_high, hi_n), "{}", hi / hi_n as f64);
    assert!((lo / lo_n as f64 - cfg.p_low).abs() < ci(cfg.p_low, lo_n), "{}", lo / lo_n as f64);
}

#[test]
fn planted_edge_cases() {
    let p = make_planted_dataset(&PlantedConfig {
        p_high: 1.0,
        p_low: 0.0,
        n_users: 40,
        ..Default::default()
    })
    .unwrap();
    for u in 0..40 {
        assert_eq!(p.sharing_rate(u, p.preferred_field[u]), 1.0);
    }
}

#[test]
fn cold_attachment_matches_linear_scan() {
    let ds = planted_split(4);
    let nets = build_networks(&ds, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for c in 0..30 {
        let values: Vec<Vec<String>> = (0..ds.n_fields())
            .map(|k| {
                let mut v: Vec<String> = (0..rng.gen_range(1..=2))
                    .map(|_| format!("f{k}v{}", rng.gen_range(0..10)))
                    .collect();
                v.sort();
                v.dedup();
                v
            })
            .collect();
        let item = ItemAttributes::new(format!("cold{c}"), values.clone());
        let att = attach_cold_item(&nets, &item).unwrap();
        for k in 0..ds.n_fields() {
            let scan: Vec<usize> = (0..ds.n_items())
                .filter(|&i| ds.attributes[i][k].iter().any(|v| values[k].contains(v)))
                .collect();
            assert_eq!(att.rows[k], scan);
        }
    }
    let existing = ds.item_attributes(0);
    assert!(attach_cold_item(&nets, &existing).is_err());
}

fn trained_small(seed: u64) -> (InteractionDataset, eran::netbuild::AttributeNetworkSet, ModelState) {
    let ds = planted_split(seed);
    let nets = build_networks(&ds, 1);
    let cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 0.01,
        alpha: 0.3,
        epochs: 3,
        seed,
        hidden_dims: vec![8],
        embedding_dim: 4,
        ..Default::default()
    };
    let out = train(&ds, &nets, &cfg, |_, _, _, _| Ok(())).unwrap();
    (ds, nets, out.model)
}

#[test]
fn scores_and_top_k_match_double_loop() {
    let (ds, nets, model) = trained_small(6);
    let embeds = model.item_embeddings(&nets).unwrap();
    for u in 0..10 {
        let z = model.users.user(u);
        let positives = &ds.positives[u];
        let rep = |i: usize| represent(z, &embeds.item(i)).1;
        let mut expected: Vec<(usize, f64)> = Vec::new();
        for i in (0..ds.n_items()).filter(|i| !positives.contains(i)) {
            let mut total = 0.0;
            for &j in positives {
                total -= squared_distance(&rep(i), &rep(j));
            }
            let got = score_item(&model, &embeds, u, i, positives).unwrap();
            assert!((got - total).abs() < 1e-12);
            expected.push((i, total));
        }
        let candidates: Vec<usize> = expected.iter().map(|p| p.0).collect();
        // full sort with a stable tie rule
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let rec = top_k(&model, &embeds, u, positives, &candidates, 7).unwrap();
        let got: Vec<usize> = rec.items.iter().map(|r| r.item).collect();
        let want: Vec<usize> = expected.iter().take(7).map(|p| p.0).collect();
        assert_eq!(got, want);
        for r in &rec.items {
            assert!(positives.contains(&r.explanation.evidence));
            assert!((r.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_matches_reference_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 6;
    let mut params = vec![vec![0.0; n], vec![0.0; 2]];
    for b in &mut params {
        for v in b.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mut reference = params.clone();
    let mut state = AdamState::new(&[n, 2]);
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut m = vec![vec![0.0; n], vec![0.0; 2]];
    let mut v = m.clone();
    for t in 1..=10 {
        let grads: Vec<Vec<f64>> = params.iter().map(|b| b.iter().map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        {
            let named: Vec<(String, &[f64])> = grads.iter().map(|g| (s("p"), g.as_slice())).collect();
            let mut refs: Vec<&mut [f64]> = params.iter_mut().map(|b| b.as_mut_slice()).collect();
            adam_step(&mut refs, &named, &[false, true], &mut state, lr).unwrap();
        }
        for i in 0..n {
            let g = grads[0][i];
            m[0][i] = b1 * m[0][i] + (1.0 - b1) * g;
            v[0][i] = b2 * v[0][i] + (1.0 - b2) * g * g;
            let mh = m[0][i] / (1.0 - b1.powi(t));
            let vh = v[0][i] / (1.0 - b2.powi(t));
            reference[0][i] -= lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..n {
            assert!((params[0][i] - reference[0][i]).abs() < 1e-12);
        }
        // frozen block never moves
        assert_eq!(params[1], reference[1]);
    }
    assert_eq!(state.step, 10);
}

#[test]
fn adam_rejects_non_finite_gradients_untouched() {
    let mut p = vec![1.0, 2.0];
    let before = p.clone();
    let g = [f64::NAN, 0.0];
    let mut state = AdamState::new(&[2]);
    let err = adam_step(&mut [p.as_mut_slice()], &[(s("users"), &g)], &[false], &mut state, 0.1).unwrap_err();
    assert!(err.to_string().contains("users"));
    assert_eq!(p, before);
    assert_eq!(state.step, 0);
}

#[test]
fn training_reduces_joint_loss_on_small_fixture() {
    let p = make_planted_dataset(&PlantedConfig {
        n_users: 20,
        n_items: 30,
        min_history: 4,
        max_history: 8,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let ds = leave_one_out_split(&p.dataset, 9).unwrap();
    let nets = build_networks(&ds, 1);
    let cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 0.01,
        alpha: 0.3,
        epochs: 20,
        hidden_dims: vec![16],
        embedding_dim: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probe = TripleSampler::new(&ds).unwrap().sample(500, 1, &mut rng);
    let init = ModelState::init(ds.n_fields(), ds.n_users(), ds.n_items(), &cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let out = train(&ds, &nets, &cfg, |_, _, _, _| Ok(())).unwrap();
    let before = joint_loss(&probe, &init, &nets, &cfg).unwrap();
    let after = joint_loss(&probe, &out.model, &nets, &cfg).unwrap();
    assert!(after < before, "{before} -> {after}");
    let trace = &out.trace.epochs;
    assert!(trace.last().unwrap().total < trace[0].total);
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let (ds, nets, model) = trained_small(10);
    let batch = TripleSampler::new(&ds).unwrap().sample(400, 1, &mut ChaCha8Rng::seed_from_u64(0));
    let w = LossWeights { net: 1.0, rank: 1.0 };
    let (_, grads) = evaluate_batch(&model, &nets, &batch, w, ReconPenalty::default(), true).unwrap();
    for (path, g) in grads.unwrap().blocks() {
        assert!(g.iter().any(|v| *v != 0.0), "{path} has an all-zero gradient");
    }
}
