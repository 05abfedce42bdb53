//! Targeted/untargeted success rates, perturbation rates, search-space
//! statistics and zero-query transfer of a fixed adversarial dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::perturb::{PerturbFn, PositionSpaces};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdvRecord {
    pub original_ids: Vec<usize>,
    pub adversarial_ids: Vec<usize>,
    pub truth: usize,
    pub target: Option<usize>,
    /// Success as judged by the generating model.
    pub success: bool,
    pub perturbed_positions: Vec<usize>,
    /// Attackable positions.
    pub mask: Vec<bool>,
}

impl AdvRecord {
    pub fn attackable(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdvDataset {
    pub records: Vec<AdvRecord>,
    pub vocab_fingerprint: u64,
}

/// Substituted positions over attackable positions.
pub fn perturbation_rate(record: &AdvRecord) -> f64 {
    let attackable = record.attackable();
    if attackable == 0 {
        return 0.0;
    }
    record.perturbed_positions.len() as f64 / attackable as f64
}

fn predictions(dataset: &AdvDataset, model: &ClassifierModel) -> Result<Vec<usize>> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.records.iter().map(|r| model.predict(&r.adversarial_ids)).collect()
}

pub fn tsr(dataset: &AdvDataset, model: &ClassifierModel) -> Result<f64> {
    if let Some(i) = dataset.records.iter().position(|r| r.target.is_none()) {
        return Err(Error::MissingTarget(i));
    }
    let preds = predictions(dataset, model)?;
    let hits = dataset
        .records
        .iter()
        .zip(&preds)
        .filter(|(r, &p)| r.target == Some(p))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn usr(dataset: &AdvDataset, model: &ClassifierModel) -> Result<f64> {
    let preds = predictions(dataset, model)?;
    let hits = dataset.records.iter().zip(&preds).filter(|(r, &p)| r.truth != p).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean number of non-identity candidates per position, by function and
/// for the union.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceStats {
    pub positions: usize,
    pub per_function: Vec<(PerturbFn, f64)>,
    pub union: f64,
}

pub fn space_stats(spaces: &[PositionSpaces]) -> SpaceStats {
    let positions = spaces.len();
    let mean = |total: usize| if positions == 0 { 0.0 } else { total as f64 / positions as f64 };
    let mut functions: Vec<PerturbFn> = Vec::new();
    for s in spaces {
        for (f, _) in &s.by_function {
            if !functions.contains(f) {
                functions.push(*f);
            }
        }
    }
    functions.sort();
    let per_function = functions
        .into_iter()
        .map(|f| {
            let total: usize = spaces
                .iter()
                .flat_map(|s| s.by_function.iter())
                .filter(|(g, _)| *g == f)
                .map(|(_, s)| s.alternatives())
                .sum();
            (f, mean(total))
        })
        .collect();
    let union_total = spaces.iter().map(|s| s.union.alternatives()).sum();
    SpaceStats {
        positions,
        per_function,
        union: mean(union_total),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub records: usize,
    /// Present only when every record carries a target.
    pub tsr: Option<f64>,
    pub usr: f64,
    pub targeted_successes: Option<usize>,
    pub untargeted_successes: usize,
    /// Averaged over untargeted-successful records only.
    pub mean_perturbation_untargeted: Option<f64>,
    /// Averaged over targeted-successful records only.
    pub mean_perturbation_targeted: Option<f64>,
    pub rejected: usize,
    pub space_stats: Option<SpaceStats>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Success rates and perturbation costs of `dataset` against `model`.
pub fn evaluate(dataset: &AdvDataset, model: &ClassifierModel) -> Result<MetricsReport> {
    let preds = predictions(dataset, model)?;
    let n = preds.len();
    let untargeted: Vec<bool> = dataset.records.iter().zip(&preds).map(|(r, &p)| p != r.truth).collect();
    let all_targeted = dataset.records.iter().all(|r| r.target.is_some());
    let targeted: Option<Vec<bool>> = all_targeted.then(|| {
        dataset
            .records
            .iter()
            .zip(&preds)
            .map(|(r, &p)| r.target == Some(p))
            .collect()
    });
    let untargeted_successes = untargeted.iter().filter(|&&s| s).count();
    let targeted_successes = targeted.as_ref().map(|t| t.iter().filter(|&&s| s).count());
    let rate_where = |flags: &[bool]| {
        mean_of(
            dataset
                .records
                .iter()
                .zip(flags)
                .filter(|(_, &s)| s)
                .map(|(r, _)| perturbation_rate(r)),
        )
    };
    Ok(MetricsReport {
        records: n,
        tsr: targeted_successes.map(|k| k as f64 / n as f64),
        usr: untargeted_successes as f64 / n as f64,
        targeted_successes,
        untargeted_successes,
        mean_perturbation_untargeted: rate_where(&untargeted),
        mean_perturbation_targeted: targeted.as_deref().and_then(rate_where),
        rejected: 0,
        space_stats: None,
    })
}

/// Re-scores fixed adversarial texts against a model never queried while
/// generating them.
pub fn transfer_eval(dataset: &AdvDataset, other: &ClassifierModel) -> Result<MetricsReport> {
    if other.vocab_fingerprint() != dataset.vocab_fingerprint {
        return Err(Error::VocabMismatch(format!(
            "dataset vocabulary {:016x} differs from model vocabulary {:016x}",
            dataset.vocab_fingerprint,
            other.vocab_fingerprint()
        )));
    }
    evaluate(dataset, other)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// `key = value` lines.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "records = {}", self.records);
        let _ = writeln!(out, "rejected = {}", self.rejected);
        let _ = writeln!(out, "usr = {:.6}", self.usr);
        let _ = writeln!(out, "untargeted_successes = {}", self.untargeted_successes);
        let _ = writeln!(out, "tsr = {}", fmt_opt(self.tsr));
        let _ = writeln!(
            out,
            "targeted_successes = {}",
            self.targeted_successes.map_or_else(|| "-".into(), |k| k.to_string())
        );
        let _ = writeln!(out, "perturbation_untargeted = {}", fmt_opt(self.mean_perturbation_untargeted));
        let _ = writeln!(out, "perturbation_targeted = {}", fmt_opt(self.mean_perturbation_targeted));
        out.push_str("perturbation_averaging = successful_records_only\n");
        if let Some(stats) = &self.space_stats {
            out.push_str(&stats.to_kv_string());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "records,{}", self.records);
        let _ = writeln!(out, "rejected,{}", self.rejected);
        let _ = writeln!(out, "usr,{:.6}", self.usr);
        let _ = writeln!(out, "tsr,{}", fmt_opt(self.tsr));
        let _ = writeln!(out, "perturbation_untargeted,{}", fmt_opt(self.mean_perturbation_untargeted));
        let _ = writeln!(out, "perturbation_targeted,{}", fmt_opt(self.mean_perturbation_targeted));
        if let Some(stats) = &self.space_stats {
            for (f, m) in &stats.per_function {
                let _ = writeln!(out, "space_mean_{},{m:.6}", f.name());
            }
            let _ = writeln!(out, "space_mean_union,{:.6}", stats.union);
        }
        out
    }
}

impl SpaceStats {
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "space_positions = {}", self.positions);
        for (f, m) in &self.per_function {
            let _ = writeln!(out, "space_mean_{} = {m:.6}", f.name());
        }
        let _ = writeln!(out, "space_mean_union = {:.6}", self.union);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("function,mean_candidates\n");
        for (f, m) in &self.per_function {
            let _ = writeln!(out, "{},{m:.6}", f.name());
        }
        let _ = writeln!(out, "union,{:.6}", self.union);
        out
    }
}

fn join_tokens(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(" ")
}

fn join_list<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        "-".into()
    } else {
        items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl AdvDataset {
    /// One tab-separated line per record: original tokens, adversarial
    /// tokens, label, target (`-` if none), perturbed indices (`-` if
    /// none), attack mask as 0/1 characters, success flag.
    pub fn to_file_string(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mask: String = r.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                join_tokens(&r.original_ids, vocab),
                join_tokens(&r.adversarial_ids, vocab),
                r.truth,
                r.target.map_or_else(|| "-".into(), |t| t.to_string()),
                join_list(&r.perturbed_positions),
                mask,
                u8::from(r.success),
            );
        }
        out
    }

    pub fn parse(text: &str, vocab: &Vocabulary, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::malformed(path, lineno, reason);
            let fields: Vec<&str> = line.split('\t').collect();
            if !(5..=7).contains(&fields.len()) {
                return Err(bad(format!("expected 5 to 7 tab-separated fields, got {}", fields.len())));
            }
            let to_ids = |text: &str| -> Result<Vec<usize>> {
                text.split(' ')
                    .map(|t| {
                        vocab
                            .id_of(t)
                            .ok_or_else(|| Error::VocabMismatch(format!("{}:{lineno}: token {t:?} not in vocabulary", path.display())))
                    })
                    .collect()
            };
            let original_ids = to_ids(fields[0])?;
            let adversarial_ids = to_ids(fields[1])?;
            if original_ids.len() != adversarial_ids.len() {
                return Err(bad("original and adversarial lengths differ".into()));
            }
            let truth = fields[2].parse().map_err(|_| bad(format!("bad label {:?}", fields[2])))?;
            let target = match fields[3] {
                "-" | "" => None,
                t => Some(t.parse().map_err(|_| bad(format!("bad target {t:?}")))?),
            };
            if target == Some(truth) {
                return Err(bad("target equals label".into()));
            }
            let perturbed_positions = match fields[4] {
                "-" | "" => Vec::new(),
                list => list
                    .split(',')
                    .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad index {s:?}"))))
                    .collect::<Result<Vec<_>>>()?,
            };
            if perturbed_positions.iter().any(|&p| p >= original_ids.len()) {
                return Err(bad("perturbed index beyond sentence length".into()));
            }
            let mask = match fields.get(5) {
                Some(m) if !m.is_empty() => {
                    let mask: Vec<bool> = m
                        .chars()
                        .map(|c| match c {
                            '1' => Ok(true),
                            '0' => Ok(false),
                            _ => Err(bad(format!("bad mask {m:?}"))),
                        })
                        .collect::<Result<_>>()?;
                    if mask.len() != original_ids.len() {
                        return Err(bad("mask length differs from sentence length".into()));
                    }
                    mask
                }
                _ => vec![true; original_ids.len()],
            };
            let success = match fields.get(6) {
                Some(&"1") => true,
                Some(&"0") | None => false,
                Some(s) => return Err(bad(format!("bad success flag {s:?}"))),
            };
            records.push(AdvRecord {
                original_ids,
                adversarial_ids,
                truth,
                target,
                success,
                perturbed_positions,
                mask,
            });
        }
        Ok(Self {
            records,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, vocab, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelShape;
    use crate::perturb::SearchSpace;
    use crate::vocab::EmbeddingMatrix;

    /// Single-token inputs: token `cK` is predicted as class K.
    fn lookup_model() -> (Vocabulary, ClassifierModel) {
        let v = Vocabulary::new(["<unk>", "c0", "c1", "c2"]).unwrap();
        let emb = EmbeddingMatrix::from_rows(vec![vec![0.0], vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        // h0 = relu(x), h1 = relu(x - 1)
        let w1 = vec![1.0, 1.0];
        let b1 = vec![0.0, -1.0];
        let w2 = vec![-1.0, 1.0, 0.0, 0.0, -2.0, 2.0];
        let b2 = vec![0.5, 0.0, -0.5];
        let m = ClassifierModel::from_parts(emb, w1, b1, w2, b2, v.fingerprint()).unwrap();
        (v, m)
    }

    fn record(adv: usize, truth: usize, target: Option<usize>) -> AdvRecord {
        AdvRecord {
            original_ids: vec![adv],
            adversarial_ids: vec![adv],
            truth,
            target,
            success: false,
            perturbed_positions: vec![],
            mask: vec![true],
        }
    }

    #[test]
    fn lookup_model_predicts_its_token() {
        let (_, m) = lookup_model();
        assert_eq!(m.predict(&[1]).unwrap(), 0);
        assert_eq!(m.predict(&[2]).unwrap(), 1);
        assert_eq!(m.predict(&[3]).unwrap(), 2);
    }

    #[test]
    fn tsr_counts_target_hits() {
        let (v, m) = lookup_model();
        // predictions [1,1,0], targets [1,1,1]
        let d = AdvDataset {
            records: vec![record(2, 0, Some(1)), record(2, 0, Some(1)), record(1, 2, Some(1))],
            vocab_fingerprint: v.fingerprint(),
        };
        assert!((tsr(&d, &m).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let all = AdvDataset {
            records: vec![record(2, 0, Some(1)), record(3, 0, Some(2))],
            vocab_fingerprint: v.fingerprint(),
        };
        assert_eq!(tsr(&all, &m).unwrap(), 1.0);
        let empty = AdvDataset { records: vec![], vocab_fingerprint: v.fingerprint() };
        assert!(matches!(tsr(&empty, &m), Err(Error::EmptyDataset)));
        assert!(matches!(usr(&empty, &m), Err(Error::EmptyDataset)));
        let missing = AdvDataset {
            records: vec![record(2, 0, Some(1)), record(2, 0, None)],
            vocab_fingerprint: v.fingerprint(),
        };
        assert!(matches!(tsr(&missing, &m), Err(Error::MissingTarget(1))));
    }

    #[test]
    fn usr_counts_label_misses() {
        let (v, m) = lookup_model();
        // predictions [0,1,2], truths [0,0,0]
        let d = AdvDataset {
            records: vec![record(1, 0, None), record(2, 0, None), record(3, 0, None)],
            vocab_fingerprint: v.fingerprint(),
        };
        assert!((usr(&d, &m).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let clean = AdvDataset {
            records: vec![record(1, 0, None), record(3, 2, None)],
            vocab_fingerprint: v.fingerprint(),
        };
        assert_eq!(usr(&clean, &m).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_rates() {
        let mut r = AdvRecord {
            original_ids: vec![1; 20],
            adversarial_ids: vec![1; 20],
            truth: 0,
            target: None,
            success: true,
            perturbed_positions: vec![3],
            mask: vec![true; 20],
        };
        assert_eq!(perturbation_rate(&r), 0.05);
        r.perturbed_positions.clear();
        assert_eq!(perturbation_rate(&r), 0.0);
        r.original_ids.truncate(10);
        r.adversarial_ids.truncate(10);
        r.mask = vec![true, true, true, true, true, true, true, true, false, false];
        r.perturbed_positions = vec![0, 5];
        assert_eq!(perturbation_rate(&r), 0.25);
    }

    #[test]
    fn transfer_to_constant_model() {
        let v = Vocabulary::new(["<unk>", "a", "b"]).unwrap();
        let shape = ModelShape { vocab_size: 3, dim: 2, hidden: 2, classes: 3 };
        let mut constant = ClassifierModel::zeros(shape, &v).unwrap();
        // zero weights with b2 favouring class 2
        constant = ClassifierModel::from_parts(
            constant.embeddings().clone(),
            vec![0.0; 4],
            vec![0.0; 2],
            vec![0.0; 6],
            vec![0.0, 0.0, 1.0],
            v.fingerprint(),
        )
        .unwrap();
        let truths = [0, 2, 1, 2, 0];
        let d = AdvDataset {
            records: truths.iter().map(|&t| record(1, t, None)).collect(),
            vocab_fingerprint: v.fingerprint(),
        };
        let rep = transfer_eval(&d, &constant).unwrap();
        assert_eq!(rep.usr, 3.0 / 5.0);
        assert_eq!(rep.untargeted_successes, 3);
        assert_eq!(rep.tsr, None);
        let other_vocab = Vocabulary::new(["<unk>", "a", "c"]).unwrap();
        let foreign = AdvDataset { records: d.records.clone(), vocab_fingerprint: other_vocab.fingerprint() };
        assert!(matches!(transfer_eval(&foreign, &constant), Err(Error::VocabMismatch(_))));
        assert_eq!(transfer_eval(&d, &constant).unwrap(), rep);
    }

    #[test]
    fn space_stats_means() {
        let pos = |alts: usize| PositionSpaces {
            by_function: vec![(PerturbFn::Typo, SearchSpace::new(0, 1..=alts))],
            union: SearchSpace::new(0, 1..=alts),
        };
        let s = space_stats(&[pos(3), pos(5)]);
        assert_eq!(s.per_function, vec![(PerturbFn::Typo, 4.0)]);
        assert_eq!(s.union, 4.0);
        let singles = space_stats(&[pos(0), pos(0)]);
        assert_eq!(singles.union, 0.0);
        assert_eq!(space_stats(&[]).union, 0.0);
    }

    #[test]
    fn dataset_file_round_trip() {
        let v = Vocabulary::new(["<unk>", "a", "b", "c"]).unwrap();
        let d = AdvDataset {
            records: vec![
                AdvRecord {
                    original_ids: vec![1, 2, 3],
                    adversarial_ids: vec![1, 3, 3],
                    truth: 0,
                    target: Some(1),
                    success: true,
                    perturbed_positions: vec![1],
                    mask: vec![false, true, true],
                },
                record(2, 1, None),
            ],
            vocab_fingerprint: v.fingerprint(),
        };
        let text = d.to_file_string(&v);
        assert_eq!(text.lines().next().unwrap(), "a b c\ta c c\t0\t1\t1\t011\t1");
        assert_eq!(AdvDataset::parse(&text, &v, Path::new("d")).unwrap(), d);
        // minimal five-column form
        let five = AdvDataset::parse("a b\ta a\t1\t-\t1\n", &v, Path::new("d")).unwrap();
        assert_eq!(five.records[0].mask, vec![true, true]);
        assert!(matches!(
            AdvDataset::parse("a zz\ta a\t1\t-\t1\n", &v, Path::new("d")),
            Err(Error::VocabMismatch(_))
        ));
        assert!(AdvDataset::parse("a b\ta\t1\t-\t-\n", &v, Path::new("d")).is_err());
    }
}
