//! Embedding-space attack: an additive perturbation on the input
//! embeddings is optimized with Adam against `‖e*‖_p + c·g(z)`, and after
//! every step each attackable position is projected onto the closest token
//! of its search space.

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ClassifierModel};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::perturb::SearchSpace;
use crate::vocab::{embed_sequence, nearest_token_in_space, EmbeddingMatrix, Norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    #[default]
    Untargeted,
    Targeted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Weight of the attack objective against the perturbation norm.
    pub c: f64,
    /// Confidence margin; the objective is floored at `-kappa`.
    pub kappa: f64,
    /// Maximum number of optimization steps.
    pub m: usize,
    pub p: Norm,
    /// Adam base step size.
    pub alpha: f64,
    pub goal: Goal,
    pub target_class: Option<usize>,
    pub early_exit: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            c: 100.0,
            kappa: 1.0,
            m: 100,
            p: Norm::L2,
            alpha: 0.1,
            goal: Goal::Untargeted,
            target_class: None,
            early_exit: false,
            seed: 1111,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c must be positive, got {}", self.c)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be nonnegative, got {}", self.kappa)));
        }
        if self.m < 1 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Largest logit other than `t`, lowest index on ties.
fn runner_up(logits: &[f64], t: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &z) in logits.iter().enumerate() {
        if i != t && best.is_none_or(|b| z > logits[b]) {
            best = Some(i);
        }
    }
    best.expect("at least two classes")
}

fn check_classes(logits: &[f64], t: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::SingleClass);
    }
    if t >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: t,
            classes: logits.len(),
        });
    }
    Ok(())
}

/// `max(max_{i≠t} z_i − z_t, −κ)`
pub fn g_targeted(logits: &[f64], t: usize, kappa: f64) -> Result<f64> {
    check_classes(logits, t)?;
    Ok((logits[runner_up(logits, t)] - logits[t]).max(-kappa))
}

/// `max(z_t − max_{i≠t} z_i, −κ)`
pub fn g_untargeted(logits: &[f64], t: usize, kappa: f64) -> Result<f64> {
    check_classes(logits, t)?;
    Ok((logits[t] - logits[runner_up(logits, t)]).max(-kappa))
}

/// Objective value and its gradient with respect to the logits. The
/// gradient is zero where the floor is active.
pub fn objective_with_grad(logits: &[f64], goal: Goal, t: usize, kappa: f64) -> Result<(f64, Vec<f64>)> {
    check_classes(logits, t)?;
    let j = runner_up(logits, t);
    let (margin, plus, minus) = match goal {
        Goal::Targeted => (logits[j] - logits[t], j, t),
        Goal::Untargeted => (logits[t] - logits[j], t, j),
    };
    let mut grad = vec![0.0; logits.len()];
    if margin > -kappa {
        grad[plus] = 1.0;
        grad[minus] = -1.0;
        Ok((margin, grad))
    } else {
        Ok((-kappa, grad))
    }
}

fn flat_norm<V: AsRef<[f64]>>(e_star: &[V], p: Norm) -> f64 {
    match p {
        Norm::L1 => e_star.iter().map(|v| Norm::L1.norm(v.as_ref())).sum(),
        Norm::L2 => e_star
            .iter()
            .flat_map(|v| v.as_ref().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt(),
    }
}

/// `‖e*‖_p + c·g`, the norm taken over all positions concatenated.
pub fn attack_loss<V: AsRef<[f64]>>(e_star: &[V], g_value: f64, c: f64, p: Norm) -> f64 {
    flat_norm(e_star, p) + c * g_value
}

/// Subgradient of the concatenated p-norm; zero at the origin (L2) and at
/// zero coordinates (L1).
fn norm_grad(e_star: &[Vec<f64>], p: Norm) -> Vec<Vec<f64>> {
    match p {
        Norm::L1 => e_star
            .iter()
            .map(|v| {
                v.iter()
                    .map(|&x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect(),
        Norm::L2 => {
            let n = flat_norm(e_star, Norm::L2);
            e_star
                .iter()
                .map(|v| v.iter().map(|&x| if n > 0.0 { x / n } else { 0.0 }).collect())
                .collect()
        }
    }
}

/// The continuous attack loss as a function of the perturbation `e*`,
/// with the objective evaluated on `e + e*`.
pub struct AttackObjective<'a> {
    pub model: &'a ClassifierModel,
    pub base: &'a [Vec<f64>],
    pub goal: Goal,
    /// Target class (targeted) or ground truth (untargeted).
    pub class: usize,
    pub c: f64,
    pub kappa: f64,
    pub p: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub g: f64,
    pub logits: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
}

impl AttackObjective<'_> {
    fn shifted(&self, e_star: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.base
            .iter()
            .zip(e_star)
            .map(|(e, d)| e.iter().zip(d).map(|(a, b)| a + b).collect())
            .collect()
    }

    pub fn value(&self, e_star: &[Vec<f64>]) -> Result<f64> {
        let (logits, _) = self.model.forward_from_embeddings(&self.shifted(e_star))?;
        let (g, _) = objective_with_grad(&logits, self.goal, self.class, self.kappa)?;
        Ok(attack_loss(e_star, g, self.c, self.p))
    }

    pub fn evaluate(&self, e_star: &[Vec<f64>]) -> Result<LossEval> {
        if e_star.len() != self.base.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} perturbation rows for {} positions",
                e_star.len(),
                self.base.len()
            )));
        }
        let (logits, trace) = self.model.forward_from_embeddings(&self.shifted(e_star))?;
        let (g, dg) = objective_with_grad(&logits, self.goal, self.class, self.kappa)?;
        let model_grad = self.model.grad_wrt_embeddings(&trace, &dg)?;
        let mut grad = norm_grad(e_star, self.p);
        for (row, mg) in grad.iter_mut().zip(&model_grad) {
            for (x, m) in row.iter_mut().zip(mg) {
                *x += self.c * m;
            }
        }
        Ok(LossEval {
            loss: attack_loss(e_star, g, self.c, self.p),
            g,
            logits,
            grad,
        })
    }
}

/// Substitution step: every attackable position takes the token of its
/// space nearest to `e_i + e*_i`; the rest keep their original token.
pub fn project(
    ids: &[usize],
    base: &[Vec<f64>],
    e_star: &[Vec<f64>],
    spaces: &[SearchSpace],
    mask: &[bool],
    matrix: &EmbeddingMatrix,
    p: Norm,
) -> Result<Vec<usize>> {
    let mut shifted = vec![0.0; matrix.dim()];
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            if !mask[i] {
                return Ok(id);
            }
            for ((s, e), d) in shifted.iter_mut().zip(&base[i]).zip(&e_star[i]) {
                *s = e + d;
            }
            nearest_token_in_space(&shifted, &spaces[i], matrix, p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial_ids: Vec<usize>,
    pub success: bool,
    pub perturbed_positions: Vec<usize>,
    pub iterations_used: usize,
    /// Continuous loss at the start of every optimization step.
    pub loss_trace: Vec<f64>,
    /// Objective values behind `loss_trace`.
    pub objective_trace: Vec<f64>,
    pub final_logits: Vec<f64>,
}

fn goal_met(logits: &[f64], goal: Goal, class: usize) -> bool {
    let pred = argmax(logits);
    match goal {
        Goal::Targeted => pred == class,
        Goal::Untargeted => pred != class,
    }
}

struct Candidate {
    ids: Vec<usize>,
    perturbed: Vec<usize>,
    loss: f64,
    logits: Vec<f64>,
}

impl Candidate {
    /// Fewer substitutions first, then lower discrete loss.
    fn better_than(&self, other: &Candidate) -> bool {
        (self.perturbed.len(), self.loss) < (other.perturbed.len(), other.loss)
    }
}

/// Runs the attack on one sentence. `truth` is the ground-truth label;
/// a targeted attack takes its class from `cfg.target_class`.
///
/// Masked-off positions keep a zero perturbation and never change. The
/// best successful candidate (fewest substitutions, then lowest loss) is
/// returned; without any success, the last projection is returned.
pub fn run_attack(
    model: &ClassifierModel,
    ids: &[usize],
    truth: usize,
    spaces: &[SearchSpace],
    mask: &[bool],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let n = ids.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if spaces.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} tokens, {} spaces, {} mask entries",
            spaces.len(),
            mask.len()
        )));
    }
    let classes = model.classes();
    if classes < 2 {
        return Err(Error::SingleClass);
    }
    if truth >= classes {
        return Err(Error::LabelOutOfRange { label: truth, classes });
    }
    let class = match cfg.goal {
        Goal::Untargeted => truth,
        Goal::Targeted => {
            let t = cfg
                .target_class
                .ok_or_else(|| Error::Config("targeted attack needs target_class".into()))?;
            if t >= classes {
                return Err(Error::LabelOutOfRange { label: t, classes });
            }
            if t == truth {
                return Err(Error::TargetEqualsTruth(t));
            }
            t
        }
    };
    for (i, (space, &id)) in spaces.iter().zip(ids).enumerate() {
        if space.is_empty() {
            return Err(Error::MaskSpaceConflict {
                position: i,
                reason: "attackable position has an empty search space".into(),
            });
        }
        if space.original_id() != id {
            return Err(Error::MaskSpaceConflict {
                position: i,
                reason: format!("space built for token {} but position holds {id}", space.original_id()),
            });
        }
    }

    let matrix = model.embeddings();
    let base = embed_sequence(ids, matrix)?;
    let dim = matrix.dim();
    let discrete_loss = |cand_ids: &[usize], logits: &[f64]| -> Result<f64> {
        let (g, _) = objective_with_grad(logits, cfg.goal, class, cfg.kappa)?;
        let diff: Vec<Vec<f64>> = cand_ids
            .iter()
            .zip(&base)
            .map(|(&id, e)| matrix.row(id).iter().zip(e).map(|(a, b)| a - b).collect())
            .collect();
        Ok(attack_loss(&diff, g, cfg.c, cfg.p))
    };

    let original_logits = model.forward(ids)?;
    if goal_met(&original_logits, cfg.goal, class) {
        return Ok(AttackResult {
            adversarial_ids: ids.to_vec(),
            success: true,
            perturbed_positions: Vec::new(),
            iterations_used: 0,
            loss_trace: Vec::new(),
            objective_trace: Vec::new(),
            final_logits: original_logits,
        });
    }

    let objective = AttackObjective {
        model,
        base: &base,
        goal: cfg.goal,
        class,
        c: cfg.c,
        kappa: cfg.kappa,
        p: cfg.p,
    };
    let mut e_star = vec![vec![0.0; dim]; n];
    let mut adam = Adam::new(cfg.alpha, &vec![dim; n]);
    let mut loss_trace = Vec::with_capacity(cfg.m);
    let mut objective_trace = Vec::with_capacity(cfg.m);
    let mut best: Option<Candidate> = None;
    let mut last = Candidate {
        ids: ids.to_vec(),
        perturbed: Vec::new(),
        loss: f64::INFINITY,
        logits: original_logits,
    };
    let mut iterations = 0;

    for _ in 0..cfg.m {
        iterations += 1;
        let eval = objective.evaluate(&e_star)?;
        loss_trace.push(eval.loss);
        objective_trace.push(eval.g);
        let mut grad = eval.grad;
        for (row, &attackable) in grad.iter_mut().zip(mask) {
            if !attackable {
                row.fill(0.0);
            }
        }
        {
            let mut tensors: Vec<(&mut [f64], &[f64])> = e_star
                .iter_mut()
                .zip(&grad)
                .map(|(p, g)| (p.as_mut_slice(), g.as_slice()))
                .collect();
            adam.step(&mut tensors);
        }

        let x_adv = project(ids, &base, &e_star, spaces, mask, matrix, cfg.p)?;
        let logits = model.forward(&x_adv)?;
        let perturbed: Vec<usize> = (0..n).filter(|&i| x_adv[i] != ids[i]).collect();
        let cand = Candidate {
            loss: discrete_loss(&x_adv, &logits)?,
            ids: x_adv,
            perturbed,
            logits,
        };
        let success = goal_met(&cand.logits, cfg.goal, class);
        if success {
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
            if cfg.early_exit {
                break;
            }
        } else {
            last = cand;
        }
    }

    let (chosen, success) = match best {
        Some(b) => (b, true),
        None => (last, false),
    };
    Ok(AttackResult {
        adversarial_ids: chosen.ids,
        success,
        perturbed_positions: chosen.perturbed,
        iterations_used: iterations,
        loss_trace,
        objective_trace,
        final_logits: chosen.logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelShape;
    use crate::vocab::Vocabulary;

    #[test]
    fn targeted_objective_values() {
        assert_eq!(g_targeted(&[2.0, 5.0, 1.0], 0, 1.0).unwrap(), 3.0);
        assert_eq!(g_targeted(&[5.0, 1.0, 1.0], 0, 1.0).unwrap(), -1.0);
        assert_eq!(g_targeted(&[1.0, 1.0], 0, 0.0).unwrap(), 0.0);
        assert!(matches!(g_targeted(&[1.0], 0, 1.0), Err(Error::SingleClass)));
    }

    #[test]
    fn untargeted_objective_values() {
        assert_eq!(g_untargeted(&[5.0, 2.0], 0, 1.0).unwrap(), 3.0);
        assert_eq!(g_untargeted(&[2.0, 5.0], 0, 1.0).unwrap(), -1.0);
        assert!(matches!(g_untargeted(&[2.0], 0, 1.0), Err(Error::SingleClass)));
        // two classes: untargeted on t equals targeted on the other class
        for z in [[0.3, -1.0], [2.0, 2.5], [-4.0, 1.0]] {
            for kappa in [0.0, 0.5, 3.0] {
                assert_eq!(g_untargeted(&z, 0, kappa).unwrap(), g_targeted(&z, 1, kappa).unwrap());
            }
        }
    }

    #[test]
    fn objective_gradient_respects_floor() {
        let (g, dg) = objective_with_grad(&[5.0, 1.0, 0.0], Goal::Targeted, 0, 1.0).unwrap();
        assert_eq!(g, -1.0);
        assert_eq!(dg, vec![0.0; 3]);
        let (g, dg) = objective_with_grad(&[2.0, 5.0, 1.0], Goal::Targeted, 0, 1.0).unwrap();
        assert_eq!(g, 3.0);
        assert_eq!(dg, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_by_hand() {
        let zero = vec![vec![0.0, 0.0]];
        assert_eq!(attack_loss(&zero, 3.0, 100.0, Norm::L2), 300.0);
        let e = vec![vec![3.0, 4.0]];
        assert_eq!(attack_loss(&e, -1.0, 100.0, Norm::L2), -95.0);
        assert_eq!(attack_loss(&e, -1.0, 100.0, Norm::L1), -93.0);
        // global norm over concatenated rows
        let two = vec![vec![3.0], vec![4.0]];
        assert_eq!(attack_loss(&two, 0.0, 1.0, Norm::L2), 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        for bad in [
            AttackConfig { kappa: -0.5, ..Default::default() },
            AttackConfig { m: 0, ..Default::default() },
            AttackConfig { c: 0.0, ..Default::default() },
            AttackConfig { alpha: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let toml_cfg: AttackConfig = toml::from_str("c = 10000.0\nkappa = 0.0\np = 1\ngoal = \"targeted\"").unwrap();
        assert_eq!(toml_cfg.p, Norm::L1);
        assert_eq!(toml_cfg.m, 100);
        assert!(toml::from_str::<AttackConfig>("p = 3").is_err());
    }

    fn toy() -> (Vocabulary, ClassifierModel) {
        let v = Vocabulary::new(["<unk>", "a", "b", "c", "d"]).unwrap();
        let m = ClassifierModel::random(
            ModelShape { vocab_size: 5, dim: 4, hidden: 8, classes: 2 },
            &v,
            1.0,
            21,
        )
        .unwrap();
        (v, m)
    }

    #[test]
    fn already_misclassified_succeeds_immediately() {
        let (_, m) = toy();
        let ids = vec![1, 2];
        let pred = m.predict(&ids).unwrap();
        let wrong = 1 - pred;
        let spaces: Vec<SearchSpace> = ids.iter().map(|&i| SearchSpace::new(i, 1..5)).collect();
        let r = run_attack(&m, &ids, wrong, &spaces, &[true, true], &AttackConfig::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.iterations_used, 0);
        assert!(r.perturbed_positions.is_empty());
        assert_eq!(r.adversarial_ids, ids);
    }

    #[test]
    fn frozen_spaces_keep_sentence() {
        let (_, m) = toy();
        let ids = vec![1, 2, 3];
        let truth = m.predict(&ids).unwrap();
        let spaces: Vec<SearchSpace> = ids.iter().map(|&i| SearchSpace::singleton(i)).collect();
        let cfg = AttackConfig { m: 10, ..Default::default() };
        let r = run_attack(&m, &ids, truth, &spaces, &[true; 3], &cfg).unwrap();
        assert!(!r.success);
        assert_eq!(r.adversarial_ids, ids);
        assert_eq!(r.iterations_used, 10);
        assert_eq!(r.loss_trace.len(), 10);
    }

    #[test]
    fn precondition_errors() {
        let (_, m) = toy();
        let ids = vec![1, 2];
        let spaces = vec![SearchSpace::singleton(1), SearchSpace::singleton(2)];
        let cfg = AttackConfig {
            goal: Goal::Targeted,
            target_class: Some(0),
            ..Default::default()
        };
        assert!(matches!(
            run_attack(&m, &ids, 0, &spaces, &[true, true], &cfg),
            Err(Error::TargetEqualsTruth(0))
        ));
        let wrong_space = vec![SearchSpace::singleton(3), SearchSpace::singleton(2)];
        assert!(matches!(
            run_attack(&m, &ids, 0, &wrong_space, &[true, true], &AttackConfig::default()),
            Err(Error::MaskSpaceConflict { position: 0, .. })
        ));
        assert!(run_attack(&m, &ids, 0, &spaces[..1], &[true, true], &AttackConfig::default()).is_err());
    }

    #[test]
    fn identity_projection_at_zero() {
        let (_, m) = toy();
        let ids = vec![4, 1, 3];
        let base = embed_sequence(&ids, m.embeddings()).unwrap();
        let zero = vec![vec![0.0; 4]; 3];
        let spaces: Vec<SearchSpace> = ids.iter().map(|&i| SearchSpace::new(i, 0..5)).collect();
        for p in [Norm::L1, Norm::L2] {
            let x = project(&ids, &base, &zero, &spaces, &[true; 3], m.embeddings(), p).unwrap();
            assert_eq!(x, ids);
        }
    }

    #[test]
    fn deterministic_results() {
        let (_, m) = toy();
        let ids = vec![1, 2, 3, 4];
        let truth = m.predict(&ids).unwrap();
        let spaces: Vec<SearchSpace> = ids.iter().map(|&i| SearchSpace::new(i, 1..5)).collect();
        let cfg = AttackConfig { m: 30, ..Default::default() };
        let a = run_attack(&m, &ids, truth, &spaces, &[true, false, true, true], &cfg).unwrap();
        let b = run_attack(&m, &ids, truth, &spaces, &[true, false, true, true], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.adversarial_ids[1], 2);
    }
}
