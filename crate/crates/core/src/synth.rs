//! Synthetic keyword-separable corpora and clustered perturbation
//! resources for end-to-end runs without external data.
//!
//! Each class owns a set of keywords; keyword `i` of class 0 is paired with
//! keyword `i` of class 1. Every sentence holds exactly one keyword of its
//! class among neutral filler, and swapping it for its partner yields the
//! sentence's twin of the other class. Pairs are split across three families, one
//! per perturbation function, and the clustered resources connect the two
//! sides of a pair only through that family's function.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Sentence, SideVectors, Tokenizer};
use crate::perturb::{PerturbFn, PosTag, SynonymKB, TypoRuleSet};
use crate::vocab::{ContextualIndex, IndexRecord, Vocabulary, build_index};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Including the unknown token.
    pub vocab_size: usize,
    pub sentences: usize,
    pub keyword_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            sentences: 200,
            keyword_pairs: 45,
            min_len: 6,
            max_len: 10,
            seed: 1111,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordPair {
    pub family: PerturbFn,
    /// Token id of the class-0 and class-1 keyword.
    pub ids: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub pairs: Vec<KeywordPair>,
}

impl SyntheticTask {
    pub fn inputs(&self) -> Vec<Vec<usize>> {
        self.corpus.ids(&self.vocab)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.corpus.labels()
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    w
}

const FAMILIES: [PerturbFn; 3] = [PerturbFn::Typo, PerturbFn::Knowledge, PerturbFn::Contextual];

pub fn generate(spec: &SyntheticSpec) -> SyntheticTask {
    assert!(spec.vocab_size > 2 * spec.keyword_pairs + 1, "vocabulary too small for keywords");
    assert!(spec.min_len >= 1 && spec.max_len >= spec.min_len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used: BTreeSet<String> = BTreeSet::new();
    let fresh = |used: &mut BTreeSet<String>, rng: &mut ChaCha8Rng, syllables: usize| loop {
        let w = word(rng, syllables);
        if used.insert(w.clone()) {
            return w;
        }
    };

    let mut tokens = vec!["<unk>".to_string()];
    let mut pair_tokens = Vec::new();
    for i in 0..spec.keyword_pairs {
        let family = FAMILIES[i % FAMILIES.len()];
        let (a, b) = if family == PerturbFn::Typo {
            // class-1 keyword is the class-0 keyword with one letter deleted
            loop {
                let a = fresh(&mut used, &mut rng, 3);
                let mut chars: Vec<char> = a.chars().collect();
                chars.remove(3);
                let b: String = chars.into_iter().collect();
                if used.insert(b.clone()) {
                    break (a, b);
                }
            }
        } else {
            (fresh(&mut used, &mut rng, 3), fresh(&mut used, &mut rng, 3))
        };
        pair_tokens.push((family, a, b));
    }
    for (_, a, b) in &pair_tokens {
        tokens.push(a.clone());
        tokens.push(b.clone());
    }
    while tokens.len() < spec.vocab_size {
        let syl = rng.random_range(2..=3);
        tokens.push(fresh(&mut used, &mut rng, syl));
    }
    let vocab = Vocabulary::new(tokens).expect("generated tokens are unique");
    let pairs: Vec<KeywordPair> = pair_tokens
        .iter()
        .map(|(family, a, b)| KeywordPair {
            family: *family,
            ids: [vocab.id_of(a).unwrap(), vocab.id_of(b).unwrap()],
        })
        .collect();
    let neutral_start = 1 + 2 * spec.keyword_pairs;
    let neutral: Vec<usize> = (neutral_start..vocab.len()).collect();

    // sentences come in twins sharing filler and keyword position, one per
    // class, so filler words carry no label information
    let mut sentences = Vec::with_capacity(spec.sentences);
    while sentences.len() < spec.sentences {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let filler: Vec<usize> = (0..len - 1).map(|_| *neutral.choose(&mut rng).unwrap()).collect();
        let at = rng.random_range(0..len);
        for label in 0..2 {
            if sentences.len() == spec.sentences {
                break;
            }
            let mut ids = filler.clone();
            ids.insert(at, pair.ids[label]);
            let toks = ids.iter().map(|&id| vocab.token(id).unwrap().to_string()).collect();
            sentences.push(Sentence::new(toks, label));
        }
    }
    SyntheticTask {
        vocab,
        corpus: Corpus {
            sentences,
            tokenizer: Tokenizer::Whitespace,
        },
        pairs,
    }
}

/// Resources in which each keyword pair is reachable only through its
/// family's perturbation function.
#[derive(Debug, Clone)]
pub struct ClusteredResources {
    pub typo: TypoRuleSet,
    pub kb: SynonymKB,
    pub index: ContextualIndex,
    pub side: SideVectors,
    pub k: usize,
    pub eps: usize,
}

pub const CONTEXT_DIM: usize = 8;

pub fn clustered_resources(task: &SyntheticTask, seed: u64) -> ClusteredResources {
    let vocab = &task.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let per_token = 12;
    let k = per_token;
    let eps = 4;

    let mut kb = SynonymKB::new();
    let neutral_start = 1 + 2 * task.pairs.len();
    let neutral: Vec<usize> = (neutral_start..vocab.len()).collect();
    let tok = |id: usize| vocab.token(id).unwrap().to_string();
    for pair in task.pairs.iter().filter(|p| p.family == PerturbFn::Knowledge) {
        let [a, b] = pair.ids;
        for (x, y) in [(a, b), (b, a)] {
            // one off-POS sense that the modal-POS filter must drop
            let decoy = *neutral.choose(&mut rng).unwrap();
            kb.insert(&tok(x), PosTag::Adj, [tok(y)]);
            kb.insert(&tok(x), PosTag::Adj, [tok(x)]);
            kb.insert(&tok(x), PosTag::Noun, [tok(decoy)]);
        }
    }

    // one cluster centre per token; contextual pairs share theirs
    let mut centre_of: HashMap<usize, usize> = HashMap::new();
    let mut centres: Vec<Vec<f64>> = Vec::new();
    let mut new_centre = |rng: &mut ChaCha8Rng| {
        centres.push((0..CONTEXT_DIM).map(|_| rng.random_range(-50.0..50.0)).collect());
        centres.len() - 1
    };
    for pair in &task.pairs {
        if pair.family == PerturbFn::Contextual {
            let c = new_centre(&mut rng);
            centre_of.insert(pair.ids[0], c);
            centre_of.insert(pair.ids[1], c);
        }
    }
    for id in 1..vocab.len() {
        if let std::collections::hash_map::Entry::Vacant(e) = centre_of.entry(id) {
            e.insert(new_centre(&mut rng));
        }
    }
    let mut records = Vec::new();
    for id in 1..vocab.len() {
        let c = &centres[centre_of[&id]];
        let shared = task
            .pairs
            .iter()
            .any(|p| p.family == PerturbFn::Contextual && p.ids.contains(&id));
        let n = if shared { per_token / 2 } else { per_token };
        for j in 0..n {
            records.push(IndexRecord {
                token: tok(id),
                vector: c.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect(),
                source_id: Some(j as u64),
            });
        }
    }
    let index = build_index(records, vocab, Some(CONTEXT_DIM)).expect("uniform dimension").index;

    let mut side = SideVectors::new(CONTEXT_DIM);
    for (s, sentence) in task.corpus.sentences.iter().enumerate() {
        for (pos, token) in sentence.tokens.iter().enumerate() {
            let Some(id) = vocab.id_of(token) else { continue };
            if id == vocab.unk_id() {
                continue;
            }
            let c = &centres[centre_of[&id]];
            let q = c.iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
            side.insert(s, pos, q).expect("uniform dimension");
        }
    }

    ClusteredResources {
        typo: TypoRuleSet::english_default(),
        kb,
        index,
        side,
        k,
        eps,
    }
}
