//! Word embeddings and the lexical grid fed to the lexical branch.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize_token;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),
    #[error("word {word:?} appears twice (line {line})")]
    DuplicateWord { word: String, line: usize },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("header announces {expected} words, file holds {found}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("transcript line {line}: {reason}")]
    MalformedTranscript { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Range of the seeded unknown-word vector.
pub const UNK_RANGE: f32 = 0.25;

/// Frozen word vectors plus one appended unknown-word row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: HashMap<String, usize>,
    words: Vec<String>,
    matrix: Vec<f32>,
    dim: usize,
}

impl EmbeddingTable {
    /// Builds a table from (word, vector) pairs and appends the seeded UNK row.
    pub fn from_entries<I>(entries: I, dim: usize, unk_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        if dim == 0 {
            return Err(TextError::MalformedHeader("dimension must be positive".into()));
        }
        let mut table = Self { vocab: HashMap::new(), words: Vec::new(), matrix: Vec::new(), dim };
        for (i, (word, vec)) in entries.into_iter().enumerate() {
            table.push(word, &vec, i + 2)?;
        }
        table.append_unk(unk_seed);
        Ok(table)
    }

    fn push(&mut self, word: String, vec: &[f32], line: usize) -> Result<()> {
        if vec.len() != self.dim {
            return Err(TextError::DimensionMismatch { line, expected: self.dim, found: vec.len() });
        }
        let key = word.to_lowercase();
        if self.vocab.contains_key(&key) {
            return Err(TextError::DuplicateWord { word, line });
        }
        self.vocab.insert(key, self.words.len());
        self.words.push(word);
        self.matrix.extend_from_slice(vec);
        Ok(())
    }

    fn append_unk(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..self.dim {
            self.matrix.push(rng.gen_range(-UNK_RANGE..=UNK_RANGE));
        }
    }

    /// Reads the `V d` header text format.
    pub fn load(path: &Path, unk_seed: u64) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(BufReader::new(file), unk_seed)
    }

    pub fn read<R: BufRead>(reader: R, unk_seed: u64) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| TextError::MalformedHeader("empty file".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parsed: Option<(usize, usize)> = match fields.as_slice() {
            [v, d] => v.parse().ok().zip(d.parse().ok()),
            _ => None,
        };
        let (count, dim) = parsed.ok_or_else(|| TextError::MalformedHeader(header.clone()))?;
        if dim == 0 {
            return Err(TextError::MalformedHeader(header));
        }
        let mut table = Self {
            vocab: HashMap::with_capacity(count),
            words: Vec::with_capacity(count),
            matrix: Vec::with_capacity((count + 1) * dim),
            dim,
        };
        let mut values = Vec::with_capacity(dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default().to_string();
            values.clear();
            for p in parts {
                let v: f32 = p.parse().map_err(|_| TextError::MalformedLine {
                    line: lineno,
                    reason: format!("{p:?} is not a number"),
                })?;
                values.push(v);
            }
            table.push(word, &values, lineno)?;
        }
        if table.words.len() != count {
            return Err(TextError::RowCountMismatch { expected: count, found: table.words.len() });
        }
        table.append_unk(unk_seed);
        Ok(table)
    }

    /// Writes the known words back in the text format (UNK row excluded).
    /// Values use the shortest representation that parses back exactly.
    pub fn dump(&self) -> String {
        let mut out = format!("{} {}\n", self.words.len(), self.dim);
        for (i, word) in self.words.iter().enumerate() {
            out.push_str(word);
            for v in &self.matrix[i * self.dim..(i + 1) * self.dim] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_row(&self) -> usize {
        self.words.len()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.vocab.get(&token.to_lowercase()).copied().unwrap_or(self.unk_row())
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn lookup(&self, token: &str) -> &[f32] {
        self.row(self.index_of(token))
    }

    pub fn unk_vector(&self) -> &[f32] {
        self.row(self.unk_row())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedWord {
    pub token: String,
    pub end_ms: u64,
}

/// Reads a `{token, end_ms}` JSON-lines transcript. Tokens are normalized
/// and must arrive in non-decreasing `end_ms` order.
pub fn read_transcript(path: &Path) -> Result<Vec<TimedWord>> {
    let file = std::fs::File::open(path)?;
    let mut words: Vec<TimedWord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut w: TimedWord = serde_json::from_str(&line)
            .map_err(|e| TextError::MalformedTranscript { line: i + 1, reason: e.to_string() })?;
        if words.last().is_some_and(|prev| prev.end_ms > w.end_ms) {
            return Err(TextError::MalformedTranscript {
                line: i + 1,
                reason: "end_ms decreases".into(),
            });
        }
        w.token = normalize_token(&w.token);
        words.push(w);
    }
    Ok(words)
}

/// The last up-to-`n` tokens ending at or before the anchor, oldest first.
pub fn lexical_window(transcript: &[TimedWord], anchor_ms: u64, n: usize) -> Vec<String> {
    let end = transcript.partition_point(|w| w.end_ms <= anchor_ms);
    let start = end.saturating_sub(n);
    transcript[start..end].iter().map(|w| w.token.clone()).collect()
}

/// n × d matrix, row-major. Padding rows are zero and come first.
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalGrid {
    pub data: Vec<f32>,
    pub n: usize,
    pub dim: usize,
    pub n_real: usize,
}

impl LexicalGrid {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Stacks embeddings for `tokens` (oldest first) at the bottom of an n × d
/// grid. If more than `n` tokens are given only the last `n` are kept.
pub fn build_grid<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable, n: usize) -> LexicalGrid {
    let dim = table.dim();
    let tokens = &tokens[tokens.len().saturating_sub(n)..];
    let pad = n - tokens.len();
    let mut data = vec![0.0f32; n * dim];
    for (i, tok) in tokens.iter().enumerate() {
        let r = pad + i;
        data[r * dim..(r + 1) * dim].copy_from_slice(table.lookup(tok.as_ref()));
    }
    LexicalGrid { data, n, dim, n_real: tokens.len() }
}
