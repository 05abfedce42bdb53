//! Vocabulary, embedding matrix, contextual index and the nearest-neighbor
//! queries built on top of them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::SearchSpace;

/// Token ↔ id map. Id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK_ID: usize = 0;

    /// Builds a vocabulary whose first token is the unknown token.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_lines(tokens.into_iter().map(Into::into), Path::new("<memory>"))
    }

    fn from_lines(lines: impl Iterator<Item = String>, origin: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (line, token) in lines.enumerate() {
            if token.is_empty() {
                return Err(Error::malformed(origin, line + 1, "empty token"));
            }
            if token.chars().any(char::is_whitespace) {
                return Err(Error::malformed(origin, line + 1, format!("token {token:?} contains whitespace")));
            }
            if ids.insert(token.clone(), tokens.len()).is_some() {
                return Err(Error::malformed(origin, line + 1, format!("duplicate token {token:?}")));
            }
            tokens.push(token);
        }
        if tokens.is_empty() {
            return Err(Error::malformed(origin, 0, "missing unknown-token declaration on line 1"));
        }
        Ok(Self { tokens, ids })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| l.trim_end_matches('\r').to_string()), origin)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK_ID
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Maps a token to its id, falling back to the unknown token.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id_of(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::IdOutOfRange { id, size: self.len() })
        }
    }

    /// FNV-1a hash of the ordered token list. Two models can only exchange
    /// token ids when their fingerprints agree.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        for token in &self.tokens {
            for byte in token.bytes().chain(std::iter::once(b'\n')) {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(PRIME);
            }
        }
        hash
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::parse(&text, path)
}

/// Norm order used for the perturbation cost and the substitution step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Norm::L2 => euclidean(a, b),
        }
    }

    pub fn order(self) -> u8 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }
}

impl TryFrom<u8> for Norm {
    type Error = String;

    fn try_from(p: u8) -> Result<Self, String> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(format!("norm order must be 1 or 2, got {other}")),
        }
    }
}

impl From<Norm> for u8 {
    fn from(n: Norm) -> u8 {
        n.order()
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Row-major `|V| × dim` matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::ShapeMismatch("embedding matrix needs at least one non-empty row".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(dim, data)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding matrix"));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_file_string(&self, vocab: &Vocabulary) -> String {
        let mut out = format!("{} {}\n", self.rows(), self.dim);
        for (id, token) in vocab.tokens().iter().enumerate() {
            out.push_str(token);
            for x in self.row(id) {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }
}

/// Looks up the embedding row of every id.
pub fn embed_sequence(ids: &[usize], matrix: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|&id| {
            if id < matrix.rows() {
                Ok(matrix.row(id).to_vec())
            } else {
                Err(Error::IdOutOfRange { id, size: matrix.rows() })
            }
        })
        .collect()
}

fn parse_floats<'a>(
    fields: impl Iterator<Item = &'a str>,
    path: &Path,
    line: usize,
) -> Result<Vec<f64>> {
    fields
        .map(|f| match f.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            Ok(_) => Err(Error::malformed(path, line, format!("non-finite value {f:?}"))),
            Err(_) => Err(Error::malformed(path, line, format!("bad number {f:?}"))),
        })
        .collect()
}

fn parse_header(line: Option<&str>, path: &Path, expected_fields: usize) -> Result<Vec<usize>> {
    let line = line.ok_or_else(|| Error::malformed(path, 1, "missing header"))?;
    let fields: Vec<usize> = line
        .split_whitespace()
        .map(|f| f.parse::<usize>().map_err(|_| Error::malformed(path, 1, format!("bad header field {f:?}"))))
        .collect::<Result<_>>()?;
    if fields.len() != expected_fields {
        return Err(Error::malformed(path, 1, format!("header needs {expected_fields} integers")));
    }
    Ok(fields)
}

/// Parses an embedding file whose token order must match `vocab`.
pub fn parse_embeddings(text: &str, vocab: &Vocabulary, path: &Path) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines();
    let header = parse_header(lines.next(), path, 2)?;
    let (rows, dim) = (header[0], header[1]);
    if rows != vocab.len() {
        return Err(Error::malformed(path, 1, format!("{rows} rows but vocabulary has {}", vocab.len())));
    }
    if dim == 0 {
        return Err(Error::malformed(path, 1, "dimension must be positive"));
    }
    let mut data = Vec::with_capacity(rows * dim);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        if seen >= rows {
            return Err(Error::malformed(path, lineno, "more rows than declared"));
        }
        if vocab.token(seen) != Some(token) {
            return Err(Error::malformed(
                path,
                lineno,
                format!("token {token:?} does not match vocabulary entry {:?}", vocab.token(seen).unwrap_or("")),
            ));
        }
        let row = parse_floats(fields, path, lineno)?;
        if row.len() != dim {
            return Err(Error::malformed(path, lineno, format!("expected {dim} values, got {}", row.len())));
        }
        data.extend(row);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::malformed(path, 0, format!("declared {rows} rows, found {seen}")));
    }
    EmbeddingMatrix::from_flat(dim, data)
}

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, vocab, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub token_id: usize,
    pub vector: Vec<f64>,
    pub source_id: Option<u64>,
}

/// Bank of contextual vectors, each tagged with the token it embeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborHit {
    pub token_id: usize,
    pub distance: f64,
}

impl ContextualIndex {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// The `k` entries closest to `query` in Euclidean distance, nearest
    /// first. Equal distances keep index order.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(pos, e)| (euclidean(query, &e.vector), pos))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(distance, pos)| NeighborHit {
                token_id: self.entries[pos].token_id,
                distance,
            })
            .collect())
    }

    pub fn to_file_string(&self, vocab: &Vocabulary) -> String {
        let mut out = format!("{}\n", self.dim);
        for e in &self.entries {
            out.push_str(vocab.token(e.token_id).unwrap_or_default());
            match e.source_id {
                Some(s) => {
                    let _ = write!(out, " {s}");
                }
                None => out.push_str(" -"),
            }
            for x in &e.vector {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn knn_query(index: &ContextualIndex, query: &[f64], k: usize) -> Result<Vec<NeighborHit>> {
    index.knn(query, k)
}

/// One pre-extracted contextual vector, keyed by token string.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub token: String,
    pub vector: Vec<f64>,
    pub source_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltIndex {
    pub index: ContextualIndex,
    pub dropped: usize,
}

/// Keeps records whose token is in `vocab`, in input order. `dim` is used
/// only when the stream is empty.
pub fn build_index(
    records: impl IntoIterator<Item = IndexRecord>,
    vocab: &Vocabulary,
    dim: Option<usize>,
) -> Result<BuiltIndex> {
    let mut entries = Vec::new();
    let mut dropped = 0;
    let mut index_dim = None;
    for (n, rec) in records.into_iter().enumerate() {
        let expected = *index_dim.get_or_insert(rec.vector.len());
        if rec.vector.len() != expected || expected == 0 {
            return Err(Error::InconsistentDimension {
                record: n,
                expected,
                actual: rec.vector.len(),
            });
        }
        if rec.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("index vector"));
        }
        match vocab.id_of(&rec.token) {
            Some(token_id) => entries.push(IndexEntry {
                token_id,
                vector: rec.vector,
                source_id: rec.source_id,
            }),
            None => dropped += 1,
        }
    }
    let dim = index_dim.or(dim).unwrap_or(0);
    Ok(BuiltIndex {
        index: ContextualIndex { dim, entries },
        dropped,
    })
}

pub fn parse_index(text: &str, vocab: &Vocabulary, path: &Path) -> Result<BuiltIndex> {
    let mut lines = text.lines();
    let dim = parse_header(lines.next(), path, 1)?[0];
    if dim == 0 {
        return Err(Error::malformed(path, 1, "dimension must be positive"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default().to_string();
        let source = fields
            .next()
            .ok_or_else(|| Error::malformed(path, lineno, "missing source id"))?;
        let source_id = match source {
            "-" => None,
            s => Some(
                s.parse::<u64>()
                    .map_err(|_| Error::malformed(path, lineno, format!("bad source id {s:?}")))?,
            ),
        };
        let vector = parse_floats(fields, path, lineno)?;
        if vector.len() != dim {
            return Err(Error::malformed(path, lineno, format!("expected {dim} values, got {}", vector.len())));
        }
        records.push(IndexRecord {
            token,
            vector,
            source_id,
        });
    }
    build_index(records, vocab, Some(dim))
}

pub fn load_index(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<BuiltIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_index(&text, vocab, path)
}

/// The member of `space` whose embedding row is closest to `perturbed`
/// under `norm`; ties go to the lowest token id.
pub fn nearest_token_in_space(
    perturbed: &[f64],
    space: &SearchSpace,
    matrix: &EmbeddingMatrix,
    norm: Norm,
) -> Result<usize> {
    if perturbed.len() != matrix.dim() {
        return Err(Error::DimensionMismatch {
            expected: matrix.dim(),
            actual: perturbed.len(),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    // candidates are sorted ascending, so a strict comparison keeps the lowest id on ties
    for &id in space.candidates() {
        if id >= matrix.rows() {
            return Err(Error::IdOutOfRange { id, size: matrix.rows() });
        }
        let d = norm.distance(perturbed, matrix.row(id));
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, id));
        }
    }
    best.map(|(_, id)| id).ok_or(Error::EmptySpace)
}
