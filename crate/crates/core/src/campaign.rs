//! Campaign configuration and the per-corpus attack runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackResult, Goal};
use crate::classifier::{validate_distribution, ClassifierModel, ModelShape, TrainConfig};
use crate::corpus::{Corpus, SideVectors, Tokenizer};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, space_stats, AdvDataset, AdvRecord, MetricsReport, SpaceStats};
use crate::perturb::{
    validate_neighbors, Language, PerturbFn, PositionSpaces, SearchSpace, SpaceBuilder, SynonymKB, TypoRuleSet,
    DEFAULT_EPS, DEFAULT_K,
};
use crate::vocab::{load_embeddings, load_index, load_vocabulary, Vocabulary};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourcePaths {
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Static embeddings used as contextual fallback queries.
    pub embeddings: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub side_vectors: Option<PathBuf>,
    pub typo_rules: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub functions: Vec<PerturbFn>,
    pub k: usize,
    pub eps: usize,
    /// Query the contextual index with static embedding rows when a
    /// position has no side vector.
    pub static_fallback: bool,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            functions: vec![PerturbFn::Typo, PerturbFn::Knowledge, PerturbFn::Contextual],
            k: DEFAULT_K,
            eps: DEFAULT_EPS,
            static_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: ModelShape::DEFAULT_DIM,
            hidden: ModelShape::DEFAULT_HIDDEN,
            classes: 2,
        }
    }
}

impl ModelSection {
    pub fn shape(&self, vocab: &Vocabulary) -> ModelShape {
        ModelShape {
            vocab_size: vocab.len(),
            dim: self.dim,
            hidden: self.hidden,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub tokenizer: Tokenizer,
    pub language: Language,
    pub parallelism: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            tokenizer: Tokenizer::Whitespace,
            language: Language::English,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    /// Trained or distilled model.
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Metrics as CSV.
    pub table: Option<PathBuf>,
    pub teacher_outputs: Option<PathBuf>,
    pub spaces_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub resources: ResourcePaths,
    pub perturb: PerturbSection,
    pub attack: AttackConfig,
    pub train: TrainConfig,
    pub model: ModelSection,
    pub run: RunSection,
    pub output: OutputPaths,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl CampaignConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let r = &mut cfg.resources;
        for p in [
            &mut r.vocab,
            &mut r.corpus,
            &mut r.model,
            &mut r.embeddings,
            &mut r.index,
            &mut r.side_vectors,
            &mut r.typo_rules,
            &mut r.synonyms,
        ] {
            resolve(base, p);
        }
        let o = &mut cfg.output;
        for p in [
            &mut o.model,
            &mut o.dataset,
            &mut o.report,
            &mut o.table,
            &mut o.teacher_outputs,
            &mut o.spaces_report,
        ] {
            resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.perturb.functions.is_empty() {
            return Err(Error::NoFunctionEnabled);
        }
        validate_neighbors(self.perturb.k, self.perturb.eps)?;
        self.attack.validate()?;
        self.train.validate()?;
        if self.run.parallelism < 1 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.model.classes < 2 {
            return Err(Error::SingleClass);
        }
        if self.model.dim < 1 || self.model.hidden < 1 {
            return Err(Error::Config("model dim and hidden must be positive".into()));
        }
        Ok(())
    }

    fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("missing `{what}` path")))
    }

    pub fn vocab_path(&self) -> Result<&Path> {
        Self::require(&self.resources.vocab, "resources.vocab")
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        Self::require(&self.resources.corpus, "resources.corpus")
    }

    pub fn model_path(&self) -> Result<&Path> {
        Self::require(&self.resources.model, "resources.model")
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        load_vocabulary(self.vocab_path()?)
    }

    /// Loads the corpus and attaches side vectors when configured.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let mut corpus = Corpus::load(self.corpus_path()?, self.run.tokenizer)?;
        if let Some(p) = &self.resources.side_vectors {
            corpus.attach_queries(&SideVectors::load(p)?);
        }
        Ok(corpus)
    }

    /// Loads every resource the enabled functions need.
    pub fn space_builder(&self, vocab: &Vocabulary, model: Option<&ClassifierModel>) -> Result<SpaceBuilder> {
        let fns = &self.perturb.functions;
        let mut builder = SpaceBuilder::new(vocab.clone(), fns.iter().copied())?.language(self.run.language);
        if fns.contains(&PerturbFn::Typo) {
            let rules = match (&self.resources.typo_rules, self.run.language) {
                (Some(p), _) => TypoRuleSet::load(p)?,
                (None, Language::English) => TypoRuleSet::english_default(),
                (None, Language::Chinese) => {
                    return Err(Error::Config("typo function in chinese mode needs `resources.typo_rules`".into()))
                }
            };
            builder = builder.typo_rules(rules);
        }
        if fns.contains(&PerturbFn::Knowledge) {
            let path = Self::require(&self.resources.synonyms, "resources.synonyms")?;
            builder = builder.synonyms(SynonymKB::load(path)?);
        }
        if fns.contains(&PerturbFn::Contextual) {
            let path = Self::require(&self.resources.index, "resources.index")?;
            let index = load_index(path, vocab)?.index;
            let index_dim = index.dim();
            builder = builder.contextual_index(index, self.perturb.k, self.perturb.eps)?;
            if self.perturb.static_fallback {
                let matrix = match (&self.resources.embeddings, model) {
                    (Some(p), _) => load_embeddings(p, vocab)?,
                    (None, Some(m)) => m.embeddings().clone(),
                    (None, None) => {
                        return Err(Error::Config("static_fallback needs embeddings or a model".into()))
                    }
                };
                if matrix.dim() != index_dim {
                    return Err(Error::DimensionMismatch {
                        expected: index_dim,
                        actual: matrix.dim(),
                    });
                }
                builder = builder.static_fallback(matrix);
            }
        }
        Ok(builder)
    }
}

/// A corpus record skipped before attacking.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub sentence: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CampaignOutput {
    pub dataset: AdvDataset,
    /// Corpus index of every dataset record.
    pub sentence_indices: Vec<usize>,
    pub results: Vec<AttackResult>,
    pub rejected: Vec<Rejection>,
    pub report: MetricsReport,
}

impl CampaignOutput {
    pub fn rejection_log(&self) -> String {
        let mut out = String::new();
        for r in &self.rejected {
            let _ = writeln!(out, "sentence {}: {}", r.sentence, r.reason);
        }
        out
    }
}

enum Outcome {
    Done(Box<(AdvRecord, AttackResult, Vec<PositionSpaces>)>),
    Rejected(String),
}

/// Target class for a targeted record; drawn from the non-truth classes by
/// a per-sentence stream so it does not depend on scheduling.
fn pick_target(cfg: &AttackConfig, sentence: usize, truth: usize, classes: usize) -> usize {
    if let Some(t) = cfg.target_class {
        return t;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(sentence as u64));
    let t = rng.random_range(0..classes - 1);
    if t >= truth {
        t + 1
    } else {
        t
    }
}

/// Builds per-position spaces; masked-off positions get singletons.
pub fn sentence_spaces(
    builder: &SpaceBuilder,
    corpus: &Corpus,
    sentence: usize,
) -> Result<(Vec<SearchSpace>, Vec<PositionSpaces>)> {
    let s = &corpus.sentences[sentence];
    let ids = s.ids(builder.vocab());
    let mask = s.mask_or_all();
    let mut spaces = Vec::with_capacity(ids.len());
    let mut audited = Vec::new();
    for (pos, token) in s.tokens.iter().enumerate() {
        if mask[pos] {
            let ps = builder.position_spaces(token, s.query(pos))?;
            spaces.push(ps.union.clone());
            audited.push(ps);
        } else {
            spaces.push(SearchSpace::singleton(ids[pos]));
        }
    }
    Ok((spaces, audited))
}

fn attack_one(
    model: &ClassifierModel,
    builder: &SpaceBuilder,
    corpus: &Corpus,
    cfg: &AttackConfig,
    sentence: usize,
) -> Result<Outcome> {
    let s = &corpus.sentences[sentence];
    let classes = model.classes();
    if s.label >= classes {
        return Ok(Outcome::Rejected(format!("label {} out of range for {classes} classes", s.label)));
    }
    let mut cfg = cfg.clone();
    let target = match cfg.goal {
        Goal::Untargeted => None,
        Goal::Targeted => {
            let t = pick_target(&cfg, sentence, s.label, classes);
            if t == s.label {
                return Ok(Outcome::Rejected(format!("target class {t} equals the true label")));
            }
            cfg.target_class = Some(t);
            Some(t)
        }
    };
    let ids = s.ids(builder.vocab());
    let mask = s.mask_or_all();
    let (spaces, audited) = sentence_spaces(builder, corpus, sentence)?;
    let result = match run_attack(model, &ids, s.label, &spaces, &mask, &cfg) {
        Ok(r) => r,
        Err(e @ (Error::TargetEqualsTruth(_) | Error::LabelOutOfRange { .. })) => {
            return Ok(Outcome::Rejected(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let record = AdvRecord {
        original_ids: ids,
        adversarial_ids: result.adversarial_ids.clone(),
        truth: s.label,
        target,
        success: result.success,
        perturbed_positions: result.perturbed_positions.clone(),
        mask,
    };
    Ok(Outcome::Done(Box::new((record, result, audited))))
}

#[cfg(feature = "parallel")]
fn map_sentences<F>(n: usize, parallelism: usize, job: F) -> Result<Vec<Outcome>>
where
    F: Fn(usize) -> Result<Outcome> + Sync + Send,
{
    use rayon::prelude::*;
    if parallelism <= 1 {
        return (0..n).map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&job).collect())
}

#[cfg(not(feature = "parallel"))]
fn map_sentences<F>(n: usize, _parallelism: usize, job: F) -> Result<Vec<Outcome>>
where
    F: Fn(usize) -> Result<Outcome>,
{
    (0..n).map(job).collect()
}

/// Attacks every corpus sentence. Results are in corpus order whatever the
/// degree of parallelism.
pub fn run_campaign(
    model: &ClassifierModel,
    builder: &SpaceBuilder,
    corpus: &Corpus,
    cfg: &AttackConfig,
    parallelism: usize,
) -> Result<CampaignOutput> {
    cfg.validate()?;
    model.check_vocab(builder.vocab())?;
    let outcomes = map_sentences(corpus.len(), parallelism, |i| attack_one(model, builder, corpus, cfg, i))?;
    let mut records = Vec::new();
    let mut sentence_indices = Vec::new();
    let mut results = Vec::new();
    let mut rejected = Vec::new();
    let mut audited = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Outcome::Done(done) => {
                let (record, result, spaces) = *done;
                records.push(record);
                results.push(result);
                sentence_indices.push(i);
                audited.extend(spaces);
            }
            Outcome::Rejected(reason) => rejected.push(Rejection { sentence: i, reason }),
        }
    }
    let dataset = AdvDataset {
        records,
        vocab_fingerprint: builder.vocab().fingerprint(),
    };
    let mut report = evaluate(&dataset, model)?;
    report.rejected = rejected.len();
    report.space_stats = Some(space_stats(&audited));
    Ok(CampaignOutput {
        dataset,
        sentence_indices,
        results,
        rejected,
        report,
    })
}

/// Space statistics over every attackable position of the corpus.
pub fn audit_spaces(builder: &SpaceBuilder, corpus: &Corpus) -> Result<SpaceStats> {
    let mut all = Vec::new();
    for i in 0..corpus.len() {
        all.extend(sentence_spaces(builder, corpus, i)?.1);
    }
    Ok(space_stats(&all))
}

/// `index\tp0,…,pC−1` lines.
pub fn teacher_outputs_to_string(outputs: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for (i, p) in outputs.iter().enumerate() {
        let _ = write!(out, "{i}\t");
        for (j, x) in p.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{x}");
        }
        out.push('\n');
    }
    out
}

/// Reads one distribution per sentence; every index in `0..sentences` must
/// appear exactly once.
pub fn parse_teacher_outputs(text: &str, sentences: usize, classes: usize, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; sentences];
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::malformed(path, lineno, reason);
        let (idx, probs) = line.split_once('\t').ok_or_else(|| bad("expected `index<TAB>probabilities`".into()))?;
        let idx: usize = idx.trim().parse().map_err(|_| bad(format!("bad sentence index {idx:?}")))?;
        if idx >= sentences {
            return Err(bad(format!("sentence index {idx} beyond corpus of {sentences}")));
        }
        let p: Vec<f64> = probs
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("bad probability {f:?}"))))
            .collect::<Result<_>>()?;
        validate_distribution(idx, &p, classes).map_err(|e| bad(e.to_string()))?;
        if slots[idx].replace(p).is_some() {
            return Err(bad(format!("duplicate sentence index {idx}")));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::malformed(path, 0, format!("no distribution for sentence {i}"))))
        .collect()
}

/// Writes `contents`, creating parent directories.
pub fn write_output(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
