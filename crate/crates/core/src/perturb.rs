//! Per-position candidate search spaces: typo, knowledge-base and
//! contextual-neighbor perturbation functions, and their union.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{ContextualIndex, EmbeddingMatrix, Vocabulary};

/// Candidate token ids for one position. Always contains the original id;
/// candidates are kept sorted ascending without duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    original_id: usize,
    candidates: Vec<usize>,
}

impl SearchSpace {
    pub fn new(original_id: usize, candidates: impl IntoIterator<Item = usize>) -> Self {
        let mut set: BTreeSet<usize> = candidates.into_iter().collect();
        set.insert(original_id);
        Self {
            original_id,
            candidates: set.into_iter().collect(),
        }
    }

    pub fn singleton(original_id: usize) -> Self {
        Self {
            original_id,
            candidates: vec![original_id],
        }
    }

    pub fn original_id(&self) -> usize {
        self.original_id
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.candidates.len() == 1
    }

    pub fn contains(&self, id: usize) -> bool {
        self.candidates.binary_search(&id).is_ok()
    }

    /// Number of non-identity substitutions.
    pub fn alternatives(&self) -> usize {
        self.candidates.len() - 1
    }

    pub fn union(&self, other: &SearchSpace) -> SearchSpace {
        debug_assert_eq!(self.original_id, other.original_id);
        SearchSpace::new(self.original_id, self.candidates.iter().chain(&other.candidates).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypoRule {
    Insert,
    Delete,
    Swap,
    SubKeyboard,
    SubVisual,
}

impl TypoRule {
    pub const ALL: [TypoRule; 5] = [
        TypoRule::Insert,
        TypoRule::Delete,
        TypoRule::Swap,
        TypoRule::SubKeyboard,
        TypoRule::SubVisual,
    ];
}

/// Character-level typo rules (English) and homophone/glyph tables
/// (character languages).
#[derive(Debug, Clone, PartialEq)]
pub struct TypoRuleSet {
    keyboard_neighbors: BTreeMap<char, Vec<char>>,
    visual_subs: BTreeMap<char, Vec<char>>,
    enabled: BTreeSet<TypoRule>,
    homophones: HashMap<String, Vec<String>>,
    glyphs: HashMap<String, Vec<String>>,
    homophone_cap: usize,
}

pub const DEFAULT_HOMOPHONE_CAP: usize = 5;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TypoRulesFile {
    #[serde(default)]
    rules: Option<Vec<TypoRule>>,
    #[serde(default)]
    homophone_cap: Option<usize>,
    #[serde(default)]
    keyboard: BTreeMap<String, String>,
    #[serde(default)]
    visual: BTreeMap<String, String>,
    #[serde(default)]
    homophones: HashMap<String, Vec<String>>,
    #[serde(default)]
    glyphs: HashMap<String, Vec<String>>,
}

const QWERTY_ROWS: [&str; 3] = ["qwertyuiop", "asdfghjkl", "zxcvbnm"];

impl TypoRuleSet {
    pub fn new(
        keyboard_neighbors: BTreeMap<char, Vec<char>>,
        visual_subs: BTreeMap<char, Vec<char>>,
        enabled: impl IntoIterator<Item = TypoRule>,
    ) -> Result<Self> {
        for (name, map) in [("keyboard", &keyboard_neighbors), ("visual", &visual_subs)] {
            if let Some((c, _)) = map.iter().find(|(c, subs)| subs.contains(c)) {
                return Err(Error::Config(format!("{name} table maps {c:?} to itself")));
            }
        }
        Ok(Self {
            keyboard_neighbors,
            visual_subs,
            enabled: enabled.into_iter().collect(),
            homophones: HashMap::new(),
            glyphs: HashMap::new(),
            homophone_cap: DEFAULT_HOMOPHONE_CAP,
        })
    }

    /// QWERTY row-adjacency, a small look-alike table and every rule enabled.
    pub fn english_default() -> Self {
        let mut keyboard = BTreeMap::new();
        for row in QWERTY_ROWS {
            let chars: Vec<char> = row.chars().collect();
            for (i, &c) in chars.iter().enumerate() {
                let mut near = Vec::new();
                if i > 0 {
                    near.push(chars[i - 1]);
                }
                if i + 1 < chars.len() {
                    near.push(chars[i + 1]);
                }
                keyboard.insert(c, near);
            }
        }
        let visual: BTreeMap<char, Vec<char>> = [
            ('o', vec!['0']),
            ('l', vec!['1']),
            ('i', vec!['1']),
            ('a', vec!['@']),
            ('e', vec!['3']),
            ('s', vec!['$']),
        ]
        .into_iter()
        .collect();
        Self::new(keyboard, visual, TypoRule::ALL).expect("built-in tables are valid")
    }

    pub fn with_tables(
        mut self,
        homophones: HashMap<String, Vec<String>>,
        glyphs: HashMap<String, Vec<String>>,
        homophone_cap: usize,
    ) -> Result<Self> {
        if homophone_cap == 0 {
            return Err(Error::Config("homophone_cap must be positive".into()));
        }
        self.homophones = homophones;
        self.glyphs = glyphs;
        self.homophone_cap = homophone_cap;
        Ok(self)
    }

    pub fn homophone_cap(&self) -> usize {
        self.homophone_cap
    }

    pub fn is_enabled(&self, rule: TypoRule) -> bool {
        self.enabled.contains(&rule)
    }

    /// Parses the TOML rules file:
    ///
    /// ```toml
    /// rules = ["insert", "delete", "swap", "sub_keyboard", "sub_visual"]
    /// homophone_cap = 5
    /// [keyboard]
    /// q = "wa"
    /// [visual]
    /// o = "0"
    /// [homophones]
    /// "什" = ["甚", "神"]
    /// [glyphs]
    /// "什" = ["汁"]
    /// ```
    ///
    /// Omitted `keyboard`/`visual` tables fall back to the English defaults;
    /// omitted `rules` enables every rule.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let file: TypoRulesFile =
            toml::from_str(text).map_err(|e| Error::malformed(path, 0, e.to_string()))?;
        let defaults = Self::english_default();
        let char_map = |raw: BTreeMap<String, String>, fallback: &BTreeMap<char, Vec<char>>| {
            if raw.is_empty() {
                return Ok(fallback.clone());
            }
            raw.into_iter()
                .map(|(k, v)| {
                    let mut chars = k.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => Ok((c, v.chars().collect())),
                        _ => Err(Error::malformed(path, 0, format!("table key {k:?} is not a single character"))),
                    }
                })
                .collect::<Result<BTreeMap<_, _>>>()
        };
        let keyboard = char_map(file.keyboard, &defaults.keyboard_neighbors)?;
        let visual = char_map(file.visual, &defaults.visual_subs)?;
        let rules = file.rules.unwrap_or_else(|| TypoRule::ALL.to_vec());
        Self::new(keyboard, visual, rules)?.with_tables(
            file.homophones,
            file.glyphs,
            file.homophone_cap.unwrap_or(DEFAULT_HOMOPHONE_CAP),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every single-edit variant of `word` produced by the enabled rules.
    /// Never yields the empty string or `word` itself.
    pub fn edits(&self, word: &str) -> BTreeSet<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = BTreeSet::new();
        let mut emit = |v: Vec<char>| {
            if !v.is_empty() && v != chars {
                out.insert(v.into_iter().collect::<String>());
            }
        };
        for i in 0..chars.len() {
            let c = chars[i];
            if self.is_enabled(TypoRule::Insert) {
                for &n in self.keyboard_neighbors.get(&c).into_iter().flatten() {
                    let mut v = chars.clone();
                    v.insert(i + 1, n);
                    emit(v);
                }
            }
            if self.is_enabled(TypoRule::Delete) {
                let mut v = chars.clone();
                v.remove(i);
                emit(v);
            }
            if self.is_enabled(TypoRule::Swap) && i + 1 < chars.len() {
                let mut v = chars.clone();
                v.swap(i, i + 1);
                emit(v);
            }
            for (rule, table) in [
                (TypoRule::SubKeyboard, &self.keyboard_neighbors),
                (TypoRule::SubVisual, &self.visual_subs),
            ] {
                if !self.is_enabled(rule) {
                    continue;
                }
                for &n in table.get(&c).into_iter().flatten() {
                    let mut v = chars.clone();
                    v[i] = n;
                    emit(v);
                }
            }
        }
        out
    }
}

fn normalize(token: &str) -> String {
    token.to_lowercase()
}

fn space_from_strings<'a>(
    original_id: usize,
    strings: impl IntoIterator<Item = &'a str>,
    vocab: &Vocabulary,
) -> SearchSpace {
    let ids = strings
        .into_iter()
        .filter_map(|s| vocab.id_of(&normalize(s)))
        .filter(|&id| id != vocab.unk_id());
    SearchSpace::new(original_id, ids)
}

/// Resolves the original token; `None` means the position is out of
/// vocabulary and gets the singleton `{unk}` space.
fn original(token: &str, vocab: &Vocabulary) -> Option<usize> {
    vocab.id_of(&normalize(token)).filter(|&id| id != vocab.unk_id())
}

pub fn typo_candidates(token: &str, rules: &TypoRuleSet, vocab: &Vocabulary) -> SearchSpace {
    let Some(original_id) = original(token, vocab) else {
        return SearchSpace::singleton(vocab.unk_id());
    };
    let edits = rules.edits(&normalize(token));
    space_from_strings(original_id, edits.iter().map(String::as_str), vocab)
}

/// Glyph-similar tokens plus the first `homophone_cap` homophones.
pub fn homophone_glyph_candidates(token: &str, rules: &TypoRuleSet, vocab: &Vocabulary) -> SearchSpace {
    let Some(original_id) = original(token, vocab) else {
        return SearchSpace::singleton(vocab.unk_id());
    };
    let key = normalize(token);
    let glyphs = rules.glyphs.get(&key).into_iter().flatten();
    let homophones = rules
        .homophones
        .get(&key)
        .into_iter()
        .flat_map(|h| h.iter().take(rules.homophone_cap));
    space_from_strings(original_id, glyphs.chain(homophones).map(String::as_str), vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl PosTag {
    pub fn parse(tag: &str) -> Option<Self> {
        match tag.to_ascii_uppercase().as_str() {
            "NOUN" | "N" => Some(PosTag::Noun),
            "VERB" | "V" => Some(PosTag::Verb),
            "ADJ" | "A" | "S" => Some(PosTag::Adj),
            "ADV" | "R" => Some(PosTag::Adv),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synset {
    pub pos: PosTag,
    pub words: Vec<String>,
}

/// Lemma → synsets. Synonyms within a synset are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymKB {
    entries: HashMap<String, Vec<Synset>>,
}

impl SynonymKB {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lemma: &str, pos: PosTag, words: impl IntoIterator<Item = impl Into<String>>) {
        let mut seen = BTreeSet::new();
        let words = words
            .into_iter()
            .map(Into::into)
            .filter(|w: &String| seen.insert(w.clone()))
            .collect();
        self.entries
            .entry(normalize(lemma))
            .or_default()
            .push(Synset { pos, words });
    }

    pub fn synsets(&self, lemma: &str) -> &[Synset] {
        self.entries.get(&normalize(lemma)).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One record per line: `lemma<TAB>POS:syn1,syn2|POS:syn3`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kb = Self::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (lemma, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(path, lineno, "expected lemma<TAB>synsets"))?;
            if lemma.is_empty() {
                return Err(Error::malformed(path, lineno, "empty lemma"));
            }
            for synset in rest.split('|') {
                let (tag, words) = synset
                    .split_once(':')
                    .ok_or_else(|| Error::malformed(path, lineno, format!("synset {synset:?} lacks a POS tag")))?;
                let pos = PosTag::parse(tag.trim())
                    .ok_or_else(|| Error::malformed(path, lineno, format!("unknown POS tag {tag:?}")))?;
                let words: Vec<&str> = words.split(',').map(str::trim).filter(|w| !w.is_empty()).collect();
                kb.insert(lemma, pos, words);
            }
        }
        Ok(kb)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Lemmas in sorted order, synsets in insertion order.
    pub fn to_file_string(&self) -> String {
        let mut lemmas: Vec<&String> = self.entries.keys().collect();
        lemmas.sort();
        let mut out = String::new();
        for lemma in lemmas {
            let synsets: Vec<String> = self.entries[lemma]
                .iter()
                .map(|s| format!("{}:{}", s.pos.name(), s.words.join(",")))
                .collect();
            out.push_str(lemma);
            out.push('\t');
            out.push_str(&synsets.join("|"));
            out.push('\n');
        }
        out
    }
}

/// Synonyms whose POS is the most frequent among the token's synset pairs.
/// Tied POS groups are all kept.
pub fn knowledge_candidates(token: &str, kb: &SynonymKB, vocab: &Vocabulary) -> SearchSpace {
    let Some(original_id) = original(token, vocab) else {
        return SearchSpace::singleton(vocab.unk_id());
    };
    let synsets = kb.synsets(token);
    let mut counts: BTreeMap<PosTag, usize> = BTreeMap::new();
    for s in synsets {
        *counts.entry(s.pos).or_default() += s.words.len();
    }
    let Some(&modal) = counts.values().max() else {
        return SearchSpace::singleton(original_id);
    };
    let words = synsets
        .iter()
        .filter(|s| counts[&s.pos] == modal)
        .flat_map(|s| s.words.iter().map(String::as_str));
    space_from_strings(original_id, words, vocab)
}

/// Tokens occurring at least `eps` times among the `k` index entries
/// nearest to `query`.
pub fn contextual_candidates(
    query: &[f64],
    original_id: usize,
    index: &ContextualIndex,
    k: usize,
    eps: usize,
) -> Result<SearchSpace> {
    let hits = index.knn(query, k)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for h in &hits {
        *counts.entry(h.token_id).or_default() += 1;
    }
    Ok(SearchSpace::new(
        original_id,
        counts
            .into_iter()
            .filter(|&(id, n)| n >= eps && id != original_id)
            .map(|(id, _)| id),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbFn {
    Typo,
    Knowledge,
    Contextual,
    /// Every in-vocabulary token; an unconstrained reference space.
    FullVocabulary,
}

impl PerturbFn {
    pub fn name(self) -> &'static str {
        match self {
            PerturbFn::Typo => "typo",
            PerturbFn::Knowledge => "knowledge",
            PerturbFn::Contextual => "contextual",
            PerturbFn::FullVocabulary => "full_vocabulary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    /// Word tokens; the typo function applies character edits.
    #[default]
    English,
    /// Character tokens; the typo function uses homophone/glyph tables.
    Chinese,
}

/// Paper-scale English defaults for the contextual function.
pub const DEFAULT_K: usize = 700;
pub const DEFAULT_EPS: usize = 8;

/// Holds every resource a perturbation function needs and builds spaces
/// position by position.
#[derive(Debug, Clone)]
pub struct SpaceBuilder {
    vocab: Vocabulary,
    functions: BTreeSet<PerturbFn>,
    language: Language,
    typo: Option<TypoRuleSet>,
    kb: Option<SynonymKB>,
    index: Option<ContextualIndex>,
    static_fallback: Option<EmbeddingMatrix>,
    k: usize,
    eps: usize,
}

/// Per-function spaces for one position plus their union.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSpaces {
    pub by_function: Vec<(PerturbFn, SearchSpace)>,
    pub union: SearchSpace,
}

impl SpaceBuilder {
    pub fn new(vocab: Vocabulary, functions: impl IntoIterator<Item = PerturbFn>) -> Result<Self> {
        let functions: BTreeSet<PerturbFn> = functions.into_iter().collect();
        if functions.is_empty() {
            return Err(Error::NoFunctionEnabled);
        }
        Ok(Self {
            vocab,
            functions,
            language: Language::English,
            typo: None,
            kb: None,
            index: None,
            static_fallback: None,
            k: DEFAULT_K,
            eps: DEFAULT_EPS,
        })
    }

    pub fn language(mut self, language: Language) -> Self {
        self.language = language;
        self
    }

    pub fn typo_rules(mut self, rules: TypoRuleSet) -> Self {
        self.typo = Some(rules);
        self
    }

    pub fn synonyms(mut self, kb: SynonymKB) -> Self {
        self.kb = Some(kb);
        self
    }

    pub fn contextual_index(mut self, index: ContextualIndex, k: usize, eps: usize) -> Result<Self> {
        validate_neighbors(k, eps)?;
        self.index = Some(index);
        self.k = k;
        self.eps = eps;
        Ok(self)
    }

    /// Uses static embedding rows as contextual queries when a position has
    /// no contextual vector of its own.
    pub fn static_fallback(mut self, embeddings: EmbeddingMatrix) -> Self {
        self.static_fallback = Some(embeddings);
        self
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn functions(&self) -> impl Iterator<Item = PerturbFn> + '_ {
        self.functions.iter().copied()
    }

    fn single(&self, f: PerturbFn, token: &str, query: Option<&[f64]>) -> Result<SearchSpace> {
        let vocab = &self.vocab;
        let Some(original_id) = original(token, vocab) else {
            return Ok(SearchSpace::singleton(vocab.unk_id()));
        };
        Ok(match f {
            PerturbFn::Typo => match (&self.typo, self.language) {
                (Some(rules), Language::English) => typo_candidates(token, rules, vocab),
                (Some(rules), Language::Chinese) => homophone_glyph_candidates(token, rules, vocab),
                (None, _) => SearchSpace::singleton(original_id),
            },
            PerturbFn::Knowledge => match &self.kb {
                Some(kb) => knowledge_candidates(token, kb, vocab),
                None => SearchSpace::singleton(original_id),
            },
            PerturbFn::Contextual => {
                let Some(index) = &self.index else {
                    return Ok(SearchSpace::singleton(original_id));
                };
                let query = match (query, &self.static_fallback) {
                    (Some(q), _) => q,
                    (None, Some(m)) => m.row(original_id),
                    (None, None) => return Ok(SearchSpace::singleton(original_id)),
                };
                contextual_candidates(query, original_id, index, self.k, self.eps)?
            }
            PerturbFn::FullVocabulary => SearchSpace::new(original_id, 1..vocab.len()),
        })
    }

    pub fn position_spaces(&self, token: &str, query: Option<&[f64]>) -> Result<PositionSpaces> {
        let mut by_function = Vec::with_capacity(self.functions.len());
        let mut union: Option<SearchSpace> = None;
        for f in self.functions() {
            let space = self.single(f, token, query)?;
            union = Some(match union {
                Some(u) => u.union(&space),
                None => space.clone(),
            });
            by_function.push((f, space));
        }
        Ok(PositionSpaces {
            by_function,
            union: union.expect("at least one function is enabled"),
        })
    }

    /// Union of the enabled functions' spaces.
    pub fn combined_space(&self, token: &str, query: Option<&[f64]>) -> Result<SearchSpace> {
        Ok(self.position_spaces(token, query)?.union)
    }
}

pub fn validate_neighbors(k: usize, eps: usize) -> Result<()> {
    if eps == 0 || k < eps {
        return Err(Error::Config(format!("need k >= eps >= 1, got k={k}, eps={eps}")));
    }
    Ok(())
}
