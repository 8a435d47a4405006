//! Generator for a small, separable fixture corpus in the on-disk layout
//! the command-line pipeline reads.
//!
//! Each conversation has one frontchannel (`A`) recording made of fixed
//! slots. A slot ends at an anchor and carries three class cues: a tone
//! whose frequency depends on the class, a usually-matching class keyword
//! as the last word before the anchor, and a listener whose conversations
//! lean towards one class.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{BcCategory, Channel, ManifestRow, RowKind, TranscriptSource};
use crate::dsp::{self, Waveform};
use crate::textfeat::TimedWord;

/// Tone frequency per class (Hz).
pub const CLASS_TONES: [f32; 3] = [220.0, 480.0, 900.0];
/// Last word before each anchor, per class.
pub const CLASS_KEYWORDS: [&str; 3] = ["so", "anyway", "really"];
const FILLER: [&str; 8] = ["the", "we", "went", "to", "a", "and", "then", "it"];
const ASSESSMENTS: [&str; 3] = ["wow", "yeah", "oh really"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub conversations: usize,
    pub slots_per_conversation: usize,
    pub slot_ms: u64,
    pub sample_rate_hz: u32,
    pub word_dim: usize,
    /// Distinct listeners; listener `s` leans towards class `s % 3`.
    pub listeners: usize,
    /// Share of a conversation's slots drawn from its listener's class.
    pub listener_bias: f64,
    /// Probability that the last word is the slot's own class keyword
    /// rather than a random one. The tone is always class-dependent.
    pub keyword_reliability: f64,
    /// Conversations in the train and validation splits; the rest are test.
    pub train_conversations: usize,
    pub validation_conversations: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            conversations: 30,
            slots_per_conversation: 10,
            slot_ms: 2000,
            sample_rate_hz: 8000,
            word_dim: 16,
            listeners: 6,
            listener_bias: 0.6,
            keyword_reliability: 0.8,
            train_conversations: 20,
            validation_conversations: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSummary {
    pub instances: usize,
    pub class_counts: [usize; 3],
}

/// Paths inside a generated fixture directory.
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub root: PathBuf,
}

impl FixturePaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }
    pub fn speakers(&self) -> PathBuf {
        self.root.join("speakers.csv")
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.txt"))
    }
    pub fn audio_dir(&self) -> PathBuf {
        self.root.join("audio")
    }
    pub fn transcript_dir(&self) -> PathBuf {
        self.root.join("transcripts")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.txt")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

fn conversation_id(i: usize) -> String {
    format!("syn{i:03}")
}

fn slot_classes(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, lean: usize) -> Vec<usize> {
    let n = spec.slots_per_conversation;
    let biased = (n as f64 * spec.listener_bias).round() as usize;
    let mut classes: Vec<usize> = (0..n).map(|i| if i < biased { lean } else { (lean + 1 + i % 2) % 3 }).collect();
    classes.shuffle(rng);
    classes
}

fn slot_audio(rng: &mut ChaCha8Rng, class: usize, spec: &SyntheticSpec, out: &mut Vec<f32>) {
    let sr = spec.sample_rate_hz as f32;
    let len = (spec.slot_ms * spec.sample_rate_hz as u64 / 1000) as usize;
    let freq = CLASS_TONES[class] * rng.gen_range(0.95..1.05);
    let amp = rng.gen_range(0.2..0.5);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    for i in 0..len {
        let t = i as f32 / sr;
        let noise = rng.gen_range(-0.02..0.02);
        out.push(amp * (std::f32::consts::TAU * freq * t + phase).sin() + noise);
    }
}

fn slot_words(rng: &mut ChaCha8Rng, class: usize, start_ms: u64, spec: &SyntheticSpec) -> Vec<TimedWord> {
    let count = rng.gen_range(3..7);
    let step = (spec.slot_ms - 100) / (count as u64 + 1);
    let mut words: Vec<TimedWord> = (0..count)
        .map(|i| TimedWord { token: FILLER.choose(rng).unwrap().to_string(), end_ms: start_ms + step * (i as u64 + 1) })
        .collect();
    let keyword = if rng.gen_bool(spec.keyword_reliability) { class } else { rng.gen_range(0..3) };
    words.push(TimedWord { token: CLASS_KEYWORDS[keyword].to_string(), end_ms: start_ms + spec.slot_ms - 50 });
    words
}

fn manifest_row(rng: &mut ChaCha8Rng, conv: &str, anchor_ms: u64, class: usize) -> ManifestRow {
    let (kind, realization) = match BcCategory::from_index(class).expect("class index") {
        BcCategory::NoBc => (RowKind::Nobc, None),
        BcCategory::Continuer => (RowKind::Bc, Some(vec!["uh-huh".to_string()])),
        BcCategory::Assessment => {
            let text = ASSESSMENTS.choose(rng).unwrap();
            (RowKind::Bc, Some(text.split(' ').map(String::from).collect()))
        }
    };
    ManifestRow {
        conversation_id: conv.to_string(),
        channel: Channel::A,
        anchor_ms,
        kind,
        realization,
        transcript_source: TranscriptSource::Manual,
    }
}

fn embeddings_text(rng: &mut ChaCha8Rng, dim: usize) -> String {
    let mut vocab: Vec<&str> = FILLER.to_vec();
    vocab.extend(CLASS_KEYWORDS);
    let mut out = format!("{} {dim}\n", vocab.len());
    for word in vocab {
        out.push_str(word);
        for _ in 0..dim {
            let _ = write!(out, " {}", rng.gen_range(-1.0f32..1.0));
        }
        out.push('\n');
    }
    out
}

/// Training settings that suit the fixture's size.
pub fn fixture_config(spec: &SyntheticSpec) -> String {
    format!(
        "[model.lexical]\nword_dim = {}\n\n[train]\nbatch_size = 16\nmax_epochs = 200\nearly_stop_patience = 20\nlearning_rate = 0.001\n",
        spec.word_dim
    )
}

/// Writes the fixture into `root` (created if needed).
pub fn generate(root: &Path, spec: &SyntheticSpec) -> std::io::Result<SyntheticSummary> {
    let paths = FixturePaths::new(root);
    let audio_dir = paths.audio_dir();
    let transcript_dir = paths.transcript_dir().join(TranscriptSource::Manual.as_str());
    std::fs::create_dir_all(&audio_dir)?;
    std::fs::create_dir_all(&transcript_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = String::new();
    let mut speakers = String::from("conversation_id,channel,speaker_key\n");
    let mut counts = [0usize; 3];
    let mut ids = Vec::new();
    for c in 0..spec.conversations {
        let conv = conversation_id(c);
        let listener = c % spec.listeners.max(1);
        let classes = slot_classes(&mut rng, spec, listener % 3);

        let mut samples = Vec::new();
        let mut transcript = String::new();
        for (slot, &class) in classes.iter().enumerate() {
            let start = slot as u64 * spec.slot_ms;
            let anchor = start + spec.slot_ms;
            slot_audio(&mut rng, class, spec, &mut samples);
            for w in slot_words(&mut rng, class, start, spec) {
                transcript.push_str(&serde_json::to_string(&w).expect("serializable"));
                transcript.push('\n');
            }
            let row = manifest_row(&mut rng, &conv, anchor, class);
            manifest.push_str(&serde_json::to_string(&row).expect("serializable"));
            manifest.push('\n');
            counts[class] += 1;
        }
        let wave = Waveform::new(samples, spec.sample_rate_hz).map_err(std::io::Error::other)?;
        dsp::write_wav(&audio_dir.join(format!("{conv}.A.wav")), &wave).map_err(std::io::Error::other)?;
        std::fs::write(transcript_dir.join(format!("{conv}.A.jsonl")), transcript)?;

        let _ = writeln!(speakers, "{conv},A,talker{c:03}");
        let _ = writeln!(speakers, "{conv},B,listener{listener:02}");
        ids.push(conv);
    }
    std::fs::write(paths.manifest(), manifest)?;
    std::fs::write(paths.speakers(), speakers)?;

    let (train, rest) = ids.split_at(spec.train_conversations.min(ids.len()));
    let (validation, test) = rest.split_at(spec.validation_conversations.min(rest.len()));
    for (name, list) in [("train", train), ("valid", validation), ("test", test)] {
        let mut text = list.join("\n");
        text.push('\n');
        std::fs::write(paths.split(name), text)?;
    }
    std::fs::write(paths.embeddings(), embeddings_text(&mut rng, spec.word_dim))?;
    std::fs::write(paths.config(), fixture_config(spec))?;
    Ok(SyntheticSummary { instances: counts.iter().sum(), class_counts: counts })
}
