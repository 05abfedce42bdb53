use serde::Serialize;
use wasm_bindgen::prelude::*;

use semperturb::campaign::sentence_spaces;
use semperturb::classifier::{train, ClassifierModel, ModelShape, TrainConfig};
use semperturb::perturb::{contextual_candidates, PerturbFn, SearchSpace, SpaceBuilder};
use semperturb::synth::{clustered_resources, generate, ClusteredResources, SyntheticSpec, SyntheticTask};
use semperturb::vocab::{build_index, nearest_token_in_space, EmbeddingMatrix, IndexRecord, Norm, Vocabulary};
use semperturb::{run_attack, AttackConfig, Error, Result};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn norm(p: u8) -> Result<Norm> {
    Norm::try_from(p).map_err(Error::Config)
}

#[derive(Debug, Serialize)]
pub struct NeighborView {
    /// Positions of the `k` nearest points, nearest first.
    pub neighbors: Vec<usize>,
    /// (label, hits among the neighbors) for every label that appears.
    pub counts: Vec<(usize, usize)>,
    /// Labels kept in the search space, the original included.
    pub space: Vec<usize>,
}

/// Nearest-neighbor vote over labelled 2-D points. `points` is flat
/// `[x0, y0, x1, y1, ...]` and `labels` has one entry per point.
pub fn neighbor_view(points: &[f64], labels: &[u32], query: [f64; 2], original: u32, k: usize, eps: usize) -> Result<NeighborView> {
    if points.len() != 2 * labels.len() {
        return Err(Error::ShapeMismatch(format!("{} coordinates for {} labels", points.len(), labels.len())));
    }
    let top = labels.iter().copied().max().unwrap_or(0).max(original) as usize;
    let vocab = Vocabulary::new((0..=top).map(|i| format!("w{i}")))?;
    let records = labels.iter().zip(points.chunks(2)).map(|(&l, xy)| IndexRecord {
        token: format!("w{l}"),
        vector: xy.to_vec(),
        source_id: None,
    });
    let index = build_index(records, &vocab, Some(2))?.index;
    let hits = index.knn(&query, k)?;
    let mut counts = vec![0usize; top + 1];
    for h in &hits {
        counts[h.token_id] += 1;
    }
    // knn reports tokens, so recover positions by re-ranking with the same tie rule
    let mut order: Vec<(f64, usize)> = points
        .chunks(2)
        .enumerate()
        .map(|(i, xy)| (Norm::L2.distance(xy, &query), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let space = contextual_candidates(&query, original as usize, &index, k, eps)?;
    Ok(NeighborView {
        neighbors: order.into_iter().take(hits.len()).map(|(_, i)| i).collect(),
        counts: counts.into_iter().enumerate().filter(|&(_, n)| n > 0).collect(),
        space: space.candidates().to_vec(),
    })
}

/// For each cell of a `width` x `height` grid over `[-extent, extent]^2`,
/// the index of the candidate nearest to the cell centre under `p`.
pub fn nearest_map(candidates: &[f64], p: u8, width: usize, height: usize, extent: f64) -> Result<Vec<u32>> {
    if candidates.is_empty() || !candidates.len().is_multiple_of(2) {
        return Err(Error::ShapeMismatch("candidates must be non-empty (x, y) pairs".into()));
    }
    let p = norm(p)?;
    let matrix = EmbeddingMatrix::from_flat(2, candidates.to_vec())?;
    let space = SearchSpace::new(0, 0..matrix.rows());
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        let y = extent - 2.0 * extent * (row as f64 + 0.5) / height as f64;
        for col in 0..width {
            let x = -extent + 2.0 * extent * (col as f64 + 0.5) / width as f64;
            out.push(nearest_token_in_space(&[x, y], &space, &matrix, p)? as u32);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct AttackView {
    pub original: Vec<String>,
    pub adversarial: Vec<String>,
    pub perturbed_positions: Vec<usize>,
    pub space_sizes: Vec<usize>,
    pub truth: usize,
    pub prediction_before: usize,
    pub prediction_after: usize,
    pub success: bool,
    pub loss_trace: Vec<f64>,
}

/// A small synthetic task with a trained victim, kept alive between calls.
pub struct Demo {
    task: SyntheticTask,
    resources: ClusteredResources,
    model: ClassifierModel,
}

impl Demo {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = SyntheticSpec {
            vocab_size: 160,
            sentences: 40,
            keyword_pairs: 15,
            seed,
            ..SyntheticSpec::default()
        };
        let mut task = generate(&spec);
        let resources = clustered_resources(&task, seed);
        task.corpus.attach_queries(&resources.side);
        let shape = ModelShape {
            dim: 16,
            hidden: 32,
            ..ModelShape::new(task.vocab.len(), 2)
        };
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let mut model = ClassifierModel::random(shape, &task.vocab, cfg.init_scale, seed)?;
        train(&mut model, &task.inputs(), &task.labels(), &cfg)?;
        Ok(Self { task, resources, model })
    }

    pub fn sentences(&self) -> Vec<String> {
        self.task.corpus.sentences.iter().map(|s| s.tokens.join(" ")).collect()
    }

    fn builder(&self, functions: &[PerturbFn]) -> Result<SpaceBuilder> {
        let mut b = SpaceBuilder::new(self.task.vocab.clone(), functions.iter().copied())?;
        for f in functions {
            b = match f {
                PerturbFn::Typo => b.typo_rules(self.resources.typo.clone()),
                PerturbFn::Knowledge => b.synonyms(self.resources.kb.clone()),
                PerturbFn::Contextual => b.contextual_index(self.resources.index.clone(), self.resources.k, self.resources.eps)?,
                PerturbFn::FullVocabulary => b,
            };
        }
        Ok(b)
    }

    pub fn attack(&self, sentence: usize, functions: &[PerturbFn], c: f64, p: u8) -> Result<AttackView> {
        let s = self
            .task
            .corpus
            .sentences
            .get(sentence)
            .ok_or_else(|| Error::Config(format!("no sentence {sentence}")))?;
        let builder = self.builder(functions)?;
        let (spaces, _) = sentence_spaces(&builder, &self.task.corpus, sentence)?;
        let ids = s.ids(&self.task.vocab);
        let cfg = AttackConfig {
            c,
            p: norm(p)?,
            ..AttackConfig::default()
        };
        let mask = vec![true; ids.len()];
        let result = run_attack(&self.model, &ids, s.label, &spaces, &mask, &cfg)?;
        let words = |ids: &[usize]| ids.iter().map(|&i| self.task.vocab.token(i).unwrap_or("?").to_string()).collect();
        Ok(AttackView {
            original: words(&ids),
            adversarial: words(&result.adversarial_ids),
            perturbed_positions: result.perturbed_positions,
            space_sizes: spaces.iter().map(SearchSpace::len).collect(),
            truth: s.label,
            prediction_before: self.model.predict(&ids)?,
            prediction_after: self.model.predict(&result.adversarial_ids)?,
            success: result.success,
            loss_trace: result.loss_trace,
        })
    }
}

fn parse_functions(list: &str) -> Result<Vec<PerturbFn>> {
    list.split(',')
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(|f| match f {
            "typo" => Ok(PerturbFn::Typo),
            "knowledge" => Ok(PerturbFn::Knowledge),
            "contextual" => Ok(PerturbFn::Contextual),
            other => Err(Error::Config(format!("unknown function {other:?}"))),
        })
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

#[wasm_bindgen]
pub fn contextual_neighbors(points: &[f64], labels: &[u32], qx: f64, qy: f64, original: u32, k: usize, eps: usize) -> std::result::Result<String, JsError> {
    neighbor_view(points, labels, [qx, qy], original, k, eps).map(|v| to_json(&v)).map_err(js)
}

#[wasm_bindgen]
pub fn projection_map(candidates: &[f64], p: u8, width: usize, height: usize, extent: f64) -> std::result::Result<Vec<u32>, JsError> {
    nearest_map(candidates, p, width, height, extent).map_err(js)
}

#[wasm_bindgen]
pub struct AttackDemo(Demo);

#[wasm_bindgen]
impl AttackDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<AttackDemo, JsError> {
        Demo::new(seed as u64).map(AttackDemo).map_err(js)
    }

    pub fn sentences(&self) -> String {
        to_json(&self.0.sentences())
    }

    /// `functions` is a comma-separated subset of typo, knowledge, contextual.
    pub fn attack(&self, sentence: usize, functions: &str, c: f64, p: u8) -> std::result::Result<String, JsError> {
        let functions = parse_functions(functions).map_err(js)?;
        self.0.attack(sentence, &functions, c, p).map(|v| to_json(&v)).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbor_vote_keeps_dense_labels() {
        let points = [0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 0.2, 0.2, 5.0, 5.0, 5.1, 5.0];
        let labels = [1, 1, 2, 2, 3, 3];
        let v = neighbor_view(&points, &labels, [0.0, 0.0], 0, 4, 2).unwrap();
        assert_eq!(v.neighbors, vec![0, 1, 2, 3]);
        assert_eq!(v.counts, vec![(1, 2), (2, 2)]);
        assert_eq!(v.space, vec![0, 1, 2]);
        let v = neighbor_view(&points, &labels, [0.0, 0.0], 0, 4, 3).unwrap();
        assert_eq!(v.space, vec![0]);
        assert!(neighbor_view(&points, &labels[..2], [0.0, 0.0], 0, 4, 2).is_err());
    }

    #[test]
    fn projection_map_splits_by_norm() {
        let candidates = [-1.0, 0.0, 1.0, 0.0];
        let map = nearest_map(&candidates, 2, 4, 2, 2.0).unwrap();
        assert_eq!(map, vec![0, 0, 1, 1, 0, 0, 1, 1]);
        // the origin is nearer (1, 1) under l2 and (0, 1.5) under l1
        let candidates = [1.0, 1.0, 0.0, 1.5];
        assert_eq!(nearest_map(&candidates, 2, 1, 1, 1.0).unwrap(), vec![0]);
        assert_eq!(nearest_map(&candidates, 1, 1, 1, 1.0).unwrap(), vec![1]);
        assert!(nearest_map(&candidates, 3, 1, 1, 1.0).is_err());
        assert!(nearest_map(&[1.0], 2, 1, 1, 1.0).is_err());
    }

    #[test]
    fn demo_attack_reports_a_consistent_view() {
        let demo = Demo::new(7).unwrap();
        assert_eq!(demo.sentences().len(), 40);
        let all = parse_functions("typo, knowledge,contextual").unwrap();
        let mut flipped = 0;
        for i in 0..demo.sentences().len() {
            let v = demo.attack(i, &all, 100.0, 2).unwrap();
            assert_eq!(v.original.len(), v.adversarial.len());
            assert_eq!(v.success, v.prediction_after != v.truth);
            for (pos, (a, b)) in v.original.iter().zip(&v.adversarial).enumerate() {
                assert_eq!(a != b, v.perturbed_positions.contains(&pos));
            }
            flipped += v.success as usize;
        }
        assert!(flipped > 0);
        assert!(demo.attack(0, &[], 100.0, 2).is_err());
        assert!(parse_functions("typo,bogus").is_err());
        assert!(demo.attack(99, &all, 100.0, 2).is_err());
    }
}
