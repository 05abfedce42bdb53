mod common;

use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::Rng;
use semperturb::attack::{run_attack, AttackConfig, Goal};
use semperturb::campaign::CampaignConfig;
use semperturb::classifier::{distill, train, ClassifierModel, TrainConfig};
use semperturb::evaluation::{transfer_eval, tsr, usr, AdvDataset, AdvRecord};
use semperturb::perturb::{
    contextual_candidates, knowledge_candidates, PerturbFn, PosTag, SearchSpace, SpaceBuilder, SynonymKB,
    TypoRuleSet,
};
use semperturb::vocab::{build_index, embed_sequence, nearest_token_in_space, ContextualIndex, IndexRecord, Norm, Vocabulary};

use common::*;

fn random_index(seed: u64, vocab: &Vocabulary, entries: usize, dim: usize, integer: bool) -> ContextualIndex {
    let mut r = rng(seed);
    let records: Vec<IndexRecord> = (0..entries)
        .map(|j| IndexRecord {
            token: vocab.token(r.random_range(1..vocab.len())).unwrap().to_string(),
            vector: (0..dim)
                .map(|_| if integer { r.random_range(-2..=2) as f64 } else { r.random_range(-1.0..1.0) })
                .collect(),
            source_id: Some(j as u64),
        })
        .collect();
    build_index(records, vocab, Some(dim)).unwrap().index
}

/// Words of `[a-e]{1,3}`, so random synonym lists overlap the vocabulary.
fn small_vocab() -> Vocabulary {
    let mut tokens = vec!["<unk>".to_string()];
    for a in 'a'..='e' {
        tokens.push(a.to_string());
        for b in 'a'..='e' {
            tokens.push(format!("{a}{b}"));
        }
    }
    Vocabulary::new(tokens).unwrap()
}

fn random_kb(seed: u64, vocab: &Vocabulary) -> SynonymKB {
    let mut r = rng(seed);
    let tags = [PosTag::Noun, PosTag::Verb, PosTag::Adj, PosTag::Adv];
    let mut kb = SynonymKB::new();
    for id in 1..vocab.len() {
        for _ in 0..r.random_range(0..4) {
            let words: Vec<String> = (0..r.random_range(1..4))
                .map(|_| {
                    if r.random_bool(0.2) {
                        "not in vocabulary".to_string()
                    } else {
                        vocab.token(r.random_range(1..vocab.len())).unwrap().to_string()
                    }
                })
                .collect();
            kb.insert(vocab.token(id).unwrap(), tags[r.random_range(0..4)], words);
        }
    }
    kb
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn knn_equals_full_sort(seed in any::<u64>(), entries in 1usize..1000, dim in 1usize..5, k in 0usize..1200, integer in any::<bool>()) {
        let vocab = vocab_of(30);
        let index = random_index(seed, &vocab, entries, dim, integer);
        let query: Vec<f64> = (0..dim).map(|i| ((seed >> i) % 5) as f64 - 2.0).collect();
        let hits = index.knn(&query, k).unwrap();
        let mut order: Vec<(f64, usize)> = index
            .entries()
            .iter()
            .enumerate()
            .map(|(pos, e)| (e.vector.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), pos))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = order.iter().take(k).map(|&(_, pos)| index.entries()[pos].token_id).collect();
        let got: Vec<usize> = hits.iter().map(|h| h.token_id).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn projection_returns_original_at_its_row(seed in any::<u64>(), rows in 2usize..40, dim in 1usize..6, l1 in any::<bool>()) {
        let mut r = rng(seed);
        let vocab = vocab_of(rows);
        let model = random_model(&mut r, &vocab, dim, 2, 2);
        let m = model.embeddings();
        let original = r.random_range(0..rows);
        let space = SearchSpace::new(original, (0..rows).filter(|_| r.random_bool(0.5)));
        let p = if l1 { Norm::L1 } else { Norm::L2 };
        prop_assert_eq!(nearest_token_in_space(m.row(original), &space, m, p).unwrap(), original);
    }

    #[test]
    fn embedding_is_injective(seed in any::<u64>(), len in 1usize..6) {
        let mut r = rng(seed);
        let vocab = vocab_of(12);
        let model = random_model(&mut r, &vocab, 3, 2, 2);
        let a: Vec<usize> = (0..len).map(|_| r.random_range(0..12)).collect();
        let b: Vec<usize> = (0..len).map(|_| r.random_range(0..12)).collect();
        let ea = embed_sequence(&a, model.embeddings()).unwrap();
        let eb = embed_sequence(&b, model.embeddings()).unwrap();
        prop_assert_eq!(a == b, ea == eb);
    }

    #[test]
    fn union_contains_identity_and_every_function(seed in any::<u64>(), entries in 8usize..300, k in 8usize..60, eps in 1usize..8) {
        let vocab = small_vocab();
        let kb = random_kb(seed, &vocab);
        let index = random_index(seed ^ 1, &vocab, entries, 2, true);
        let fns = [PerturbFn::Typo, PerturbFn::Knowledge, PerturbFn::Contextual];
        let builder = SpaceBuilder::new(vocab.clone(), fns)
            .unwrap()
            .typo_rules(TypoRuleSet::english_default())
            .synonyms(kb)
            .contextual_index(index, k, eps)
            .unwrap();
        let mut r = rng(seed);
        for token in vocab.tokens().iter().skip(1) {
            let query = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
            let ps = builder.position_spaces(token, Some(&query)).unwrap();
            let id = vocab.id_of(token).unwrap();
            prop_assert!(ps.union.contains(id));
            prop_assert_eq!(ps.union.original_id(), id);
            for (_, space) in &ps.by_function {
                for &c in space.candidates() {
                    prop_assert!(ps.union.contains(c));
                }
            }
        }
    }

    #[test]
    fn contextual_counts_reach_eps(seed in any::<u64>(), entries in 1usize..1000, k in 1usize..800, eps in 1usize..12) {
        prop_assume!(k >= eps);
        let vocab = vocab_of(25);
        let index = random_index(seed, &vocab, entries, 3, seed % 2 == 0);
        let query = [0.1, -0.2, 0.3];
        let original = 1 + (seed as usize % 24);
        let space = contextual_candidates(&query, original, &index, k, eps).unwrap();
        let want = brute_contextual(&query, original, &index, k.min(index.len()), eps);
        prop_assert_eq!(space.candidates(), want.as_slice());
        let hits = index.knn(&query, k).unwrap();
        for &c in space.candidates() {
            if c != original {
                prop_assert!(hits.iter().filter(|h| h.token_id == c).count() >= eps);
            }
        }
    }

    #[test]
    fn knowledge_keeps_only_modal_pos(seed in any::<u64>()) {
        let vocab = small_vocab();
        let kb = random_kb(seed, &vocab);
        for token in vocab.tokens().iter().skip(1) {
            let mut counts: BTreeMap<PosTag, usize> = BTreeMap::new();
            for s in kb.synsets(token) {
                *counts.entry(s.pos).or_default() += s.words.len();
            }
            let modal = counts.values().copied().max().unwrap_or(0);
            let space = knowledge_candidates(token, &kb, &vocab);
            for &c in space.candidates().iter().filter(|&&c| c != space.original_id()) {
                let word = vocab.token(c).unwrap();
                prop_assert!(kb
                    .synsets(token)
                    .iter()
                    .any(|s| counts[&s.pos] == modal && s.words.iter().any(|w| w == word)));
            }
        }
    }

    #[test]
    fn forward_matches_embedded_forward(seed in any::<u64>(), len in 1usize..8) {
        let mut r = rng(seed);
        let vocab = vocab_of(15);
        let model = random_model(&mut r, &vocab, 4, 5, 3);
        let ids: Vec<usize> = (0..len).map(|_| r.random_range(0..15)).collect();
        let embs = embed_sequence(&ids, model.embeddings()).unwrap();
        prop_assert_eq!(model.forward(&ids).unwrap(), model.forward_from_embeddings(&embs).unwrap().0);
    }

    #[test]
    fn attack_is_deterministic_and_feasible(seed in any::<u64>(), targeted in any::<bool>()) {
        let mut r = rng(seed);
        let vocab = vocab_of(10);
        let model = random_model(&mut r, &vocab, 3, 4, 3);
        let n = r.random_range(1..5);
        let ids: Vec<usize> = (0..n).map(|_| r.random_range(1..10)).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
        let spaces: Vec<SearchSpace> = ids
            .iter()
            .zip(&mask)
            .map(|(&id, &m)| if m { SearchSpace::new(id, (1..10).filter(|_| r.random_bool(0.5))) } else { SearchSpace::singleton(id) })
            .collect();
        let truth = r.random_range(0..3);
        let cfg = AttackConfig {
            goal: if targeted { Goal::Targeted } else { Goal::Untargeted },
            target_class: targeted.then_some((truth + 1) % 3),
            m: 20,
            ..AttackConfig::default()
        };
        let a = run_attack(&model, &ids, truth, &spaces, &mask, &cfg).unwrap();
        let b = run_attack(&model, &ids, truth, &spaces, &mask, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..n {
            prop_assert!(spaces[i].contains(a.adversarial_ids[i]));
            // growing a space keeps the emitted token feasible
            let grown = spaces[i].union(&SearchSpace::new(ids[i], 1..10));
            prop_assert!(grown.contains(a.adversarial_ids[i]));
            if !mask[i] {
                prop_assert_eq!(a.adversarial_ids[i], ids[i]);
            }
        }
        for &g in &a.objective_trace {
            prop_assert!(g >= -cfg.kappa);
        }
    }

    #[test]
    fn rates_match_counting_loop(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let vocab = vocab_of(8);
        let model = random_model(&mut r, &vocab, 3, 3, 3);
        let records: Vec<AdvRecord> = (0..n)
            .map(|_| {
                let ids: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(0..8)).collect();
                let truth = r.random_range(0..3);
                AdvRecord {
                    original_ids: ids.clone(),
                    adversarial_ids: ids.clone(),
                    truth,
                    target: Some((truth + r.random_range(1..3)) % 3),
                    success: false,
                    perturbed_positions: vec![],
                    mask: vec![true; ids.len()],
                }
            })
            .collect();
        let ds = AdvDataset { records, vocab_fingerprint: vocab.fingerprint() };
        let (nt, nu) = naive_rates(&ds, &model);
        let (t, u) = (tsr(&ds, &model).unwrap(), usr(&ds, &model).unwrap());
        prop_assert!((t - nt.unwrap()).abs() <= 1e-12);
        prop_assert!((u - nu).abs() <= 1e-12);
        prop_assert!(t <= u);
        prop_assert_eq!(transfer_eval(&ds, &model).unwrap(), transfer_eval(&ds, &model).unwrap());
    }

    #[test]
    fn config_rejects_out_of_range_settings(k in 0usize..20, eps in 0usize..20, kappa in -2.0f64..2.0, p in 0u8..4, m in 0usize..3) {
        let text = format!("[perturb]\nk = {k}\neps = {eps}\n[attack]\nkappa = {kappa}\np = {p}\nm = {m}\n");
        let valid = k >= eps && eps >= 1 && kappa >= 0.0 && (p == 1 || p == 2) && m >= 1;
        prop_assert_eq!(CampaignConfig::parse(&text, Path::new(".")).is_ok(), valid);
    }

    #[test]
    fn model_bytes_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let vocab = vocab_of(9);
        let model = random_model(&mut r, &vocab, 3, 4, 2);
        let back = ClassifierModel::from_bytes(&model.to_bytes(), Path::new("m")).unwrap();
        prop_assert_eq!(back, model);
    }
}

fn fifty_samples(seed: u64) -> (ClassifierModel, Vec<Vec<usize>>, Vec<usize>) {
    let mut r = rng(seed);
    let vocab = vocab_of(20);
    let model = random_model(&mut r, &vocab, 6, 8, 3);
    let inputs: Vec<Vec<usize>> = (0..50)
        .map(|_| (0..r.random_range(1..6)).map(|_| r.random_range(0..20)).collect())
        .collect();
    let labels = (0..50).map(|_| r.random_range(0..3)).collect();
    (model, inputs, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn full_batch_loss_never_increases(seed in any::<u64>()) {
        let (mut model, inputs, labels) = fifty_samples(seed);
        let cfg = TrainConfig { lr: 1e-3, epochs: 30, batch_size: 50, ..TrainConfig::default() };
        let curve = train(&mut model, &inputs, &labels, &cfg).unwrap().loss_curve;
        for w in curve.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn one_hot_distillation_is_training(seed in any::<u64>(), batch in 1usize..20) {
        let (model, inputs, labels) = fifty_samples(seed);
        let cfg = TrainConfig { epochs: 5, batch_size: batch, ..TrainConfig::default() };
        let mut trained = model.clone();
        let report = train(&mut trained, &inputs, &labels, &cfg).unwrap();
        let one_hot: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| if c == y { 1.0 } else { 0.0 }).collect()).collect();
        let mut student = model;
        let dreport = distill(&mut student, &inputs, &one_hot, &cfg).unwrap();
        prop_assert_eq!(report.loss_curve, dreport.loss_curve);
        prop_assert_eq!(trained, student);
    }
}
