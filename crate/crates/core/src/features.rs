//! Per-instance feature computation and the `BCFV` feature cache.
//!
//! A cache directory holds one `.bcfv` file per (instance, feature block)
//! plus `index.json` recording the feature hash and embedding dimension.
//! File names embed the feature hash, so a changed feature configuration
//! never reuses stale files.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::BcInstance;
use crate::dsp::{self, DspError, FeatureKind, FeatureMatrix, FrameSpec};
use crate::textfeat::{self, EmbeddingTable, TextError};

pub const MAGIC: &[u8; 4] = b"BCFV";
pub const VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
/// Kind code used for lexical grids; acoustic kinds use [`FeatureKind::code`].
pub const LEXICAL_CODE: u8 = 2;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad feature file {path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("instance {instance}: {source}")]
    Instance { instance: String, source: Box<FeatureError> },
    #[error("missing input file {0}")]
    MissingInput(PathBuf),
    #[error("cache at {dir} was built with feature hash {found}, expected {expected}")]
    HashMismatch { dir: PathBuf, found: String, expected: String },
    #[error("cache has no entry for instance {0}")]
    NotCached(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Raw contents of a `.bcfv` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub kind_code: u8,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn encode_bcfv(file: &FeatureFile) -> Vec<u8> {
    let mut buf = Vec::with_capacity(17 + file.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(file.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(file.cols as u32).to_le_bytes());
    buf.push(file.kind_code);
    for v in &file.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_bcfv(bytes: &[u8]) -> std::result::Result<FeatureFile, String> {
    if bytes.len() < 17 {
        return Err("truncated header".into());
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let kind_code = bytes[16];
    let body = &bytes[17..];
    if body.len() != rows * cols * 4 {
        return Err(format!("expected {} data bytes, found {}", rows * cols * 4, body.len()));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(FeatureFile { kind_code, rows, cols, data })
}

pub fn write_bcfv(path: &Path, file: &FeatureFile) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_bcfv(file))?;
    Ok(())
}

pub fn read_bcfv(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path)?;
    decode_bcfv(&bytes).map_err(|reason| FeatureError::BadFile { path: path.to_path_buf(), reason })
}

impl From<&FeatureMatrix> for FeatureFile {
    fn from(m: &FeatureMatrix) -> Self {
        Self { kind_code: m.kind.code(), rows: m.rows, cols: m.cols(), data: m.data.clone() }
    }
}

/// Everything that determines the cached feature values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub n_words: usize,
    pub window_ms: u64,
    pub frame: FrameSpec,
    pub feature_kind: FeatureKind,
    pub unk_seed: u64,
    /// SHA-256 of the embedding file contents.
    pub embeddings_sha256: String,
}

impl FeatureSpec {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Where audio and transcripts live.
///
/// Audio: `<audio_dir>/<conversation>.<channel>.wav`.
/// Transcripts: `<transcript_dir>/<manual|automatic>/<conversation>.<channel>.jsonl`.
#[derive(Debug, Clone)]
pub struct InputLayout {
    pub audio_dir: PathBuf,
    pub transcript_dir: PathBuf,
}

impl InputLayout {
    pub fn audio_path(&self, inst: &BcInstance) -> PathBuf {
        self.audio_dir.join(format!("{}.{}.wav", inst.conversation_id, inst.frontchannel))
    }

    pub fn transcript_path(&self, inst: &BcInstance) -> PathBuf {
        self.transcript_dir
            .join(inst.transcript_source.as_str())
            .join(format!("{}.{}.jsonl", inst.conversation_id, inst.frontchannel))
    }
}

/// Computes the acoustic matrix and lexical grid for one instance.
pub fn instance_features(
    inst: &BcInstance,
    layout: &InputLayout,
    table: &EmbeddingTable,
    spec: &FeatureSpec,
) -> Result<(FeatureMatrix, textfeat::LexicalGrid)> {
    let audio = layout.audio_path(inst);
    if !audio.exists() {
        return Err(FeatureError::MissingInput(audio));
    }
    let wave = dsp::read_wav(&audio)?;
    let window = dsp::extract_window(&wave, inst.anchor_ms, spec.window_ms)?;
    let acoustic = dsp::extract(&window, &spec.frame, spec.feature_kind)?;

    let transcript = layout.transcript_path(inst);
    if !transcript.exists() {
        return Err(FeatureError::MissingInput(transcript));
    }
    let words = textfeat::read_transcript(&transcript)?;
    let tokens = textfeat::lexical_window(&words, inst.anchor_ms, spec.n_words);
    let grid = textfeat::build_grid(&tokens, table, spec.n_words);
    Ok((acoustic, grid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub feature_hash: String,
    pub spec: FeatureSpec,
    pub word_dim: usize,
}

pub struct FeatureCache {
    dir: PathBuf,
    index: CacheIndex,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub written: usize,
    pub skipped: usize,
}

impl FeatureCache {
    /// Opens (or initializes) a cache directory for `spec`.
    pub fn create(dir: &Path, spec: FeatureSpec, word_dim: usize) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let index = CacheIndex { feature_hash: spec.hash(), spec, word_dim };
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index)?;
        if std::fs::read_to_string(&path).ok().as_deref() != Some(json.as_str()) {
            std::fs::write(&path, json)?;
        }
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(INDEX_FILE))
            .map_err(|_| FeatureError::MissingInput(dir.join(INDEX_FILE)))?;
        let index: CacheIndex = serde_json::from_str(&text)?;
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn index(&self) -> &CacheIndex {
        &self.index
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn short_hash(&self) -> &str {
        &self.index.feature_hash[..16]
    }

    pub fn acoustic_path(&self, inst: &BcInstance) -> PathBuf {
        self.dir.join(format!("{}.{}.acoustic.bcfv", inst.key(), self.short_hash()))
    }

    pub fn lexical_path(&self, inst: &BcInstance) -> PathBuf {
        self.dir.join(format!("{}.{}.lexical.bcfv", inst.key(), self.short_hash()))
    }

    /// Computes and stores features for every instance not already cached.
    /// Runs on the current rayon pool; output does not depend on its size.
    pub fn fill(&self, instances: &[BcInstance], layout: &InputLayout, table: &EmbeddingTable) -> Result<CacheStats> {
        let results: Vec<Result<bool>> = instances
            .par_iter()
            .map(|inst| {
                let (ap, lp) = (self.acoustic_path(inst), self.lexical_path(inst));
                if ap.exists() && lp.exists() {
                    return Ok(false);
                }
                let wrap = |e: FeatureError| FeatureError::Instance { instance: inst.key(), source: Box::new(e) };
                let (acoustic, grid) = instance_features(inst, layout, table, &self.index.spec).map_err(wrap)?;
                write_bcfv(&ap, &FeatureFile::from(&acoustic)).map_err(wrap)?;
                let lex = FeatureFile { kind_code: LEXICAL_CODE, rows: grid.n, cols: grid.dim, data: grid.data };
                write_bcfv(&lp, &lex).map_err(wrap)?;
                Ok(true)
            })
            .collect();
        let mut stats = CacheStats::default();
        for r in results {
            if r? {
                stats.written += 1;
            } else {
                stats.skipped += 1;
            }
        }
        Ok(stats)
    }

    /// Returns (lexical grid, acoustic matrix) for a cached instance.
    pub fn load(&self, inst: &BcInstance) -> Result<(FeatureFile, FeatureFile)> {
        let (ap, lp) = (self.acoustic_path(inst), self.lexical_path(inst));
        if !ap.exists() || !lp.exists() {
            return Err(FeatureError::NotCached(inst.key()));
        }
        let lex = read_bcfv(&lp)?;
        let ac = read_bcfv(&ap)?;
        let expected_ac = self.index.spec.feature_kind.code();
        if lex.kind_code != LEXICAL_CODE || ac.kind_code != expected_ac {
            return Err(FeatureError::BadFile { path: ap, reason: "unexpected kind code".into() });
        }
        Ok((lex, ac))
    }

    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.index.feature_hash != expected {
            return Err(FeatureError::HashMismatch {
                dir: self.dir.clone(),
                found: self.index.feature_hash.clone(),
                expected: expected.to_string(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bcfv_layout() {
        let f = FeatureFile { kind_code: 1, rows: 2, cols: 3, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5] };
        let bytes = encode_bcfv(&f);
        assert_eq!(&bytes[..4], b"BCFV");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 17 + 24);
        assert_eq!(decode_bcfv(&bytes).unwrap(), f);
    }

    #[test]
    fn bcfv_rejects_damage() {
        let f = FeatureFile { kind_code: 0, rows: 1, cols: 2, data: vec![1.0, 2.0] };
        let bytes = encode_bcfv(&f);
        assert!(decode_bcfv(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_bcfv(&bytes[..10]).is_err());
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(decode_bcfv(&v).unwrap_err().contains("version"));
        let mut v = bytes;
        v[0] = b'Z';
        assert!(decode_bcfv(&v).is_err());
    }

    #[test]
    fn feature_hash_tracks_spec() {
        let spec = FeatureSpec {
            n_words: 5,
            window_ms: 1500,
            frame: FrameSpec::default(),
            feature_kind: FeatureKind::Mfcc13,
            unk_seed: 0,
            embeddings_sha256: "x".into(),
        };
        let other = FeatureSpec { window_ms: 2000, ..spec.clone() };
        assert_eq!(spec.hash(), spec.clone().hash());
        assert_ne!(spec.hash(), other.hash());
        assert_eq!(spec.hash().len(), 64);
    }
}
