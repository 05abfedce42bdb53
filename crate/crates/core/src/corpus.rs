//! Labeled corpus files, tokenization and per-position contextual query
//! vectors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Split on whitespace and lowercase.
    #[default]
    Whitespace,
    /// One token per non-whitespace character.
    Chars,
}

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_lowercase).collect(),
            Tokenizer::Chars => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }

    fn join(self, tokens: &[String]) -> String {
        match self {
            Tokenizer::Whitespace => tokens.join(" "),
            Tokenizer::Chars => tokens.concat(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub label: usize,
    /// Attackable positions; `None` means every position.
    pub mask: Option<Vec<bool>>,
    /// Key of this sentence's block in the side vector file.
    pub query_ref: Option<usize>,
    /// Contextual query vector per position, when available.
    pub queries: Option<Vec<Option<Vec<f64>>>>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, label: usize) -> Self {
        Self {
            tokens,
            label,
            mask: None,
            query_ref: None,
            queries: None,
        }
    }

    pub fn mask_or_all(&self) -> Vec<bool> {
        self.mask.clone().unwrap_or_else(|| vec![true; self.tokens.len()])
    }

    pub fn query(&self, position: usize) -> Option<&[f64]> {
        self.queries.as_ref()?.get(position)?.as_deref()
    }

    pub fn ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.tokens.iter().map(|t| vocab.id_or_unk(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub tokenizer: Tokenizer,
}

impl Corpus {
    /// Tab-separated records: text, label, optional 0/1 mask (`-` to skip),
    /// optional side-vector sentence key.
    pub fn parse(text: &str, tokenizer: Tokenizer, path: &Path) -> Result<Self> {
        let mut sentences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::malformed(path, lineno, reason);
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=4).contains(&fields.len()) {
                return Err(bad(format!("expected 2 to 4 tab-separated fields, got {}", fields.len())));
            }
            let tokens = tokenizer.tokenize(fields[0]);
            if tokens.is_empty() {
                return Err(bad("empty text".into()));
            }
            let label = fields[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad label {:?}", fields[1])))?;
            let mask = match fields.get(2).map(|s| s.trim()) {
                None | Some("") | Some("-") => None,
                Some(m) => {
                    let mask: Vec<bool> = m
                        .chars()
                        .map(|c| match c {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            _ => Err(bad(format!("bad mask {m:?}"))),
                        })
                        .collect::<Result<_>>()?;
                    if mask.len() != tokens.len() {
                        return Err(bad(format!("mask has {} entries for {} tokens", mask.len(), tokens.len())));
                    }
                    Some(mask)
                }
            };
            let query_ref = match fields.get(3).map(|s| s.trim()) {
                None | Some("") | Some("-") => None,
                Some(r) => Some(r.parse().map_err(|_| bad(format!("bad query reference {r:?}")))?),
            };
            sentences.push(Sentence {
                tokens,
                label,
                mask,
                query_ref,
                queries: None,
            });
        }
        Ok(Self { sentences, tokenizer })
    }

    pub fn load(path: impl AsRef<Path>, tokenizer: Tokenizer) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, tokenizer, path)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&self.tokenizer.join(&s.tokens));
            let _ = write!(out, "\t{}", s.label);
            if s.mask.is_some() || s.query_ref.is_some() {
                let mask = s.mask.as_ref().map_or_else(
                    || "-".to_string(),
                    |m| m.iter().map(|&b| if b { '1' } else { '0' }).collect(),
                );
                let _ = write!(out, "\t{mask}");
            }
            if let Some(r) = s.query_ref {
                let _ = write!(out, "\t{r}");
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Attaches side vectors. A sentence without an explicit reference uses
    /// its own 0-based position in the corpus as key.
    pub fn attach_queries(&mut self, side: &SideVectors) {
        for (i, s) in self.sentences.iter_mut().enumerate() {
            let key = s.query_ref.unwrap_or(i);
            let queries: Vec<Option<Vec<f64>>> =
                (0..s.tokens.len()).map(|pos| side.get(key, pos).map(<[f64]>::to_vec)).collect();
            s.queries = queries.iter().any(Option::is_some).then_some(queries);
        }
    }

    pub fn ids(&self, vocab: &Vocabulary) -> Vec<Vec<usize>> {
        self.sentences.iter().map(|s| s.ids(vocab)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.label).collect()
    }
}

/// `sentence position f1 … fd` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideVectors {
    dim: usize,
    vectors: HashMap<(usize, usize), Vec<f64>>,
}

impl SideVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, sentence: usize, position: usize, vector: Vec<f64>) -> Result<()> {
        if self.vectors.is_empty() && self.dim == 0 {
            self.dim = vector.len();
        }
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        self.vectors.insert((sentence, position), vector);
        Ok(())
    }

    pub fn get(&self, sentence: usize, position: usize) -> Option<&[f64]> {
        self.vectors.get(&(sentence, position)).map(Vec::as_slice)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut side = Self::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::malformed(path, lineno, reason);
            let mut fields = line.split_whitespace();
            let mut int = |what: &str| -> Result<usize> {
                let f = fields.next().ok_or_else(|| bad(format!("missing {what}")))?;
                f.parse().map_err(|_| bad(format!("bad {what} {f:?}")))
            };
            let sentence = int("sentence index")?;
            let position = int("position")?;
            let vector: Vec<f64> = fields
                .map(|f| match f.parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(x),
                    _ => Err(bad(format!("bad number {f:?}"))),
                })
                .collect::<Result<_>>()?;
            if vector.is_empty() {
                return Err(bad("no vector components".into()));
            }
            side.insert(sentence, position, vector).map_err(|e| bad(e.to_string()))?;
        }
        Ok(side)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_file_string(&self) -> String {
        let mut keys: Vec<_> = self.vectors.keys().copied().collect();
        keys.sort_unstable();
        let mut out = String::new();
        for (s, p) in keys {
            let _ = write!(out, "{s} {p}");
            for x in &self.vectors[&(s, p)] {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizers() {
        assert_eq!(Tokenizer::Whitespace.tokenize(" The  cat\tSAT "), vec!["the", "cat", "sat"]);
        assert_eq!(Tokenizer::Chars.tokenize("拿 什么"), vec!["拿", "什", "么"]);
    }

    #[test]
    fn parse_corpus_fields() {
        let text = "a b c\t1\n\nx y\t0\t01\nz\t1\t-\t7\n";
        let c = Corpus::parse(text, Tokenizer::Whitespace, Path::new("c.tsv")).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.sentences[1].mask, Some(vec![false, true]));
        assert_eq!(c.sentences[2].query_ref, Some(7));
        assert_eq!(c.sentences[0].mask_or_all(), vec![true; 3]);
        let back = Corpus::parse(&c.to_file_string(), Tokenizer::Whitespace, Path::new("c.tsv")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_corpus_errors() {
        let p = Path::new("c.tsv");
        assert!(Corpus::parse("a b\tx\n", Tokenizer::Whitespace, p).is_err());
        assert!(Corpus::parse("a b\t0\t1\n", Tokenizer::Whitespace, p).is_err());
        assert!(Corpus::parse("a b\n", Tokenizer::Whitespace, p).is_err());
        assert!(Corpus::parse("a b\t0\t12\n", Tokenizer::Whitespace, p).is_err());
    }

    #[test]
    fn side_vectors_attach() {
        let side = SideVectors::parse("0 0 1 2\n0 1 3 4\n5 0 9 9\n", Path::new("s")).unwrap();
        assert_eq!(side.dim(), 2);
        assert_eq!(side.len(), 3);
        let mut c = Corpus::parse("a b\t0\nc\t1\t-\t5\nd\t0\n", Tokenizer::Whitespace, Path::new("c")).unwrap();
        c.attach_queries(&side);
        assert_eq!(c.sentences[0].query(1), Some(&[3.0, 4.0][..]));
        assert_eq!(c.sentences[1].query(0), Some(&[9.0, 9.0][..]));
        assert!(c.sentences[2].queries.is_none());
        assert!(SideVectors::parse("0 0 1 2\n0 1 3\n", Path::new("s")).is_err());
        let again = SideVectors::parse(&side.to_file_string(), Path::new("s")).unwrap();
        assert_eq!(again, side);
    }
}
