//! Independent reference implementations shared by the integration tests.
//! Nothing here calls the library routine it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semperturb::attack::{AttackObjective, Goal};
use semperturb::classifier::{ClassifierModel, ModelShape};
use semperturb::evaluation::AdvDataset;
use semperturb::vocab::{ContextualIndex, EmbeddingMatrix, Norm, Vocabulary};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vocab_of(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("t{i}"))).unwrap()
}

pub fn random_model(r: &mut ChaCha8Rng, vocab: &Vocabulary, dim: usize, hidden: usize, classes: usize) -> ClassifierModel {
    let shape = ModelShape {
        vocab_size: vocab.len(),
        dim,
        hidden,
        classes,
    };
    ClassifierModel::random(shape, vocab, r.random_range(0.5..2.0), r.random()).unwrap()
}

fn dist(a: &[f64], b: &[f64], p: Norm) -> f64 {
    match p {
        Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Norm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// Enumerates every candidate; the first minimum in ascending id order wins.
pub fn exhaustive_projection(point: &[f64], candidates: &[usize], m: &EmbeddingMatrix, p: Norm) -> usize {
    let mut ids = candidates.to_vec();
    ids.sort_unstable();
    let dists: Vec<f64> = ids.iter().map(|&id| dist(point, m.row(id), p)).collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    ids[dists.iter().position(|&d| d == min).unwrap()]
}

/// Sorts every entry by (distance, position), keeps the first `k`, counts
/// tokens and keeps those with at least `eps` hits plus the original.
pub fn brute_contextual(query: &[f64], original: usize, index: &ContextualIndex, k: usize, eps: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize, usize)> = index
        .entries()
        .iter()
        .enumerate()
        .map(|(pos, e)| (dist(query, &e.vector, Norm::L2), pos, e.token_id))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, _, t) in order.iter().take(k) {
        *counts.entry(t).or_default() += 1;
    }
    let mut out: Vec<usize> = counts.into_iter().filter(|&(_, n)| n >= eps).map(|(t, _)| t).collect();
    if !out.contains(&original) {
        out.push(original);
    }
    out.sort_unstable();
    out
}

/// Argmax of the logits with lowest-index tie breaking.
pub fn predict(model: &ClassifierModel, ids: &[usize]) -> usize {
    let z = model.forward(ids).unwrap();
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}

/// (tsr, usr) by a plain counting loop; tsr is `None` when any target is
/// missing.
pub fn naive_rates(dataset: &AdvDataset, model: &ClassifierModel) -> (Option<f64>, f64) {
    let n = dataset.records.len() as f64;
    let mut t_hits = 0usize;
    let mut u_hits = 0usize;
    let mut all_targeted = true;
    for r in &dataset.records {
        let pred = predict(model, &r.adversarial_ids);
        if pred != r.truth {
            u_hits += 1;
        }
        match r.target {
            Some(t) if t == pred => t_hits += 1,
            Some(_) => {}
            None => all_targeted = false,
        }
    }
    (all_targeted.then(|| t_hits as f64 / n), u_hits as f64 / n)
}

/// Central differences of the objective's loss with respect to `e*`.
pub fn finite_difference(obj: &AttackObjective, e_star: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut grad = vec![vec![0.0; e_star[0].len()]; e_star.len()];
    let mut probe = e_star.to_vec();
    for i in 0..e_star.len() {
        for j in 0..e_star[i].len() {
            let x = e_star[i][j];
            probe[i][j] = x + h;
            let up = obj.value(&probe).unwrap();
            probe[i][j] = x - h;
            let down = obj.value(&probe).unwrap();
            probe[i][j] = x;
            grad[i][j] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// Whether `e*` sits within `tol` of a point where the loss is not
/// differentiable: a hidden unit at zero, a logit tie, the κ floor, or
/// (for ℓ1) a zero coordinate.
pub fn near_ridge(obj: &AttackObjective, e_star: &[Vec<f64>], tol: f64) -> bool {
    let shifted: Vec<Vec<f64>> = obj
        .base
        .iter()
        .zip(e_star)
        .map(|(e, d)| e.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    let (z, trace) = obj.model.forward_from_embeddings(&shifted).unwrap();
    if trace.pre_activation.iter().any(|a| a.abs() < tol) {
        return true;
    }
    let mut others: Vec<f64> = z.iter().enumerate().filter(|&(i, _)| i != obj.class).map(|(_, &v)| v).collect();
    others.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if others.len() > 1 && (others[0] - others[1]).abs() < tol {
        return true;
    }
    let margin = match obj.goal {
        Goal::Targeted => others[0] - z[obj.class],
        Goal::Untargeted => z[obj.class] - others[0],
    };
    if (margin + obj.kappa).abs() < tol {
        return true;
    }
    obj.p == Norm::L1 && e_star.iter().flatten().any(|x| x.abs() < tol)
}

pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let diff: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Sentences with at least one single-token substitution (over the whole
/// vocabulary except the unknown token) that changes the prediction away
/// from the truth.
pub fn single_substitution_adversarial(model: &ClassifierModel, ids: &[usize], truth: usize) -> bool {
    let m = model.embeddings();
    let vocab_size = m.rows();
    for i in 0..ids.len() {
        for b in 1..vocab_size {
            if b == ids[i] {
                continue;
            }
            let mut x = ids.to_vec();
            x[i] = b;
            if predict(model, &x) != truth {
                return true;
            }
        }
    }
    false
}
