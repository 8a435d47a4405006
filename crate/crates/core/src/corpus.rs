//! Backchannel instances: manifest ingestion, the continuer/assessment
//! annotation rule, listener registry and conversation-level splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("realization contains only ignorable tokens")]
    EmptyRealization,
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("no listener registered for {conversation_id}:{channel}")]
    UnknownListener { conversation_id: String, channel: Channel },
    #[error("overlapping split spec: conversation {0} appears in more than one split")]
    OverlappingSplitSpec(String),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// The three prediction targets. Ordinal codes index the confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BcCategory {
    NoBc = 0,
    Continuer = 1,
    Assessment = 2,
}

impl BcCategory {
    pub const ALL: [BcCategory; 3] = [BcCategory::NoBc, BcCategory::Continuer, BcCategory::Assessment];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            BcCategory::NoBc => "NoBc",
            BcCategory::Continuer => "Continuer",
            BcCategory::Assessment => "Assessment",
        }
    }
}

impl fmt::Display for BcCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

impl Channel {
    pub fn opposite(self) -> Channel {
        match self {
            Channel::A => Channel::B,
            Channel::B => Channel::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::A => "A",
            Channel::B => "B",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Channel::A),
            "B" | "b" => Ok(Channel::B),
            other => Err(format!("unknown channel {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptSource {
    Manual,
    Automatic,
}

impl TranscriptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TranscriptSource::Manual => "manual",
            TranscriptSource::Automatic => "automatic",
        }
    }
}

impl FromStr for TranscriptSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "manual" => Ok(TranscriptSource::Manual),
            "automatic" => Ok(TranscriptSource::Automatic),
            other => Err(format!("unknown transcript source {other:?}")),
        }
    }
}

/// One labeled prediction point. `frontchannel` is the speaker's channel;
/// the listener sits on the opposite channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BcInstance {
    pub conversation_id: String,
    pub frontchannel: Channel,
    pub anchor_ms: u64,
    pub category: BcCategory,
    pub listener_id: usize,
    pub transcript_source: TranscriptSource,
}

impl BcInstance {
    pub fn listener_channel(&self) -> Channel {
        self.frontchannel.opposite()
    }

    /// Stable key used to name cache files.
    pub fn key(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.conversation_id,
            self.frontchannel,
            self.anchor_ms,
            self.transcript_source.as_str()
        )
    }
}

/// Lowercases and strips trailing punctuation (`"Jeez!"` → `"jeez"`).
/// Bracketed markers such as `[laughter]` are returned lowercased but intact.
pub fn normalize_token(raw: &str) -> String {
    let lower = raw.trim().to_lowercase();
    if is_marker(&lower) {
        return lower;
    }
    lower
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != '-')
        .trim_end_matches('-')
        .to_string()
}

fn is_marker(token: &str) -> bool {
    [('[', ']'), ('<', '>'), ('{', '}')]
        .iter()
        .any(|&(open, close)| token.len() >= 2 && token.starts_with(open) && token.ends_with(close))
}

const DEFAULT_LEXICON: &str = include_str!("../data/continuer_lexicon.txt");

/// Word forms that make up a generic backchannel, plus forms to ignore
/// (noise and annotation markers) when deciding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContinuerLexicon {
    continuer_forms: BTreeSet<String>,
    ignorable_forms: BTreeSet<String>,
}

impl ContinuerLexicon {
    pub fn new<I, J, S, T>(continuer: I, ignorable: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let continuer_forms: BTreeSet<String> =
            continuer.into_iter().map(|s| s.as_ref().to_lowercase()).collect();
        let ignorable_forms: BTreeSet<String> =
            ignorable.into_iter().map(|s| s.as_ref().to_lowercase()).collect();
        if continuer_forms.is_empty() {
            return Err(CorpusError::InvalidLexicon("no continuer forms".into()));
        }
        if let Some(shared) = continuer_forms.intersection(&ignorable_forms).next() {
            return Err(CorpusError::InvalidLexicon(format!(
                "{shared:?} is both a continuer and an ignorable form"
            )));
        }
        Ok(Self { continuer_forms, ignorable_forms })
    }

    /// Parses the lexicon text format: `continuer <form>` or
    /// `ignorable <form>` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut continuer = Vec::new();
        let mut ignorable = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or("");
            let form = parts.next().ok_or_else(|| {
                CorpusError::InvalidLexicon(format!("line {}: missing form", lineno + 1))
            })?;
            if parts.next().is_some() {
                return Err(CorpusError::InvalidLexicon(format!(
                    "line {}: forms must be single tokens",
                    lineno + 1
                )));
            }
            match kind {
                "continuer" => continuer.push(form.to_string()),
                "ignorable" => ignorable.push(form.to_string()),
                other => {
                    return Err(CorpusError::InvalidLexicon(format!(
                        "line {}: unknown entry kind {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(continuer, ignorable)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn continuer_forms(&self) -> &BTreeSet<String> {
        &self.continuer_forms
    }

    pub fn ignorable_forms(&self) -> &BTreeSet<String> {
        &self.ignorable_forms
    }

    pub fn is_ignorable(&self, normalized: &str) -> bool {
        is_marker(normalized) || normalized.is_empty() || self.ignorable_forms.contains(normalized)
    }
}

impl Default for ContinuerLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

/// Continuer iff every non-ignorable token is a continuer form.
pub fn classify_realization<S: AsRef<str>>(tokens: &[S], lexicon: &ContinuerLexicon) -> Result<BcCategory> {
    let mut any = false;
    let mut all_continuer = true;
    for token in tokens {
        let norm = normalize_token(token.as_ref());
        if lexicon.is_ignorable(&norm) {
            continue;
        }
        any = true;
        if !lexicon.continuer_forms.contains(&norm) {
            all_continuer = false;
        }
    }
    match (any, all_continuer) {
        (false, _) => Err(CorpusError::EmptyRealization),
        (true, true) => Ok(BcCategory::Continuer),
        (true, false) => Ok(BcCategory::Assessment),
    }
}

/// Maps each (conversation, channel) to a dense listener id.
/// Id `count()` is reserved for unseen listeners.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerRegistry {
    channels: BTreeMap<String, usize>,
    speakers: Vec<String>,
}

pub fn channel_key(conversation_id: &str, channel: Channel) -> String {
    format!("{conversation_id}:{channel}")
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct SpeakerRow {
    pub conversation_id: String,
    pub channel: Channel,
    #[serde(default)]
    pub speaker_key: Option<String>,
}

impl ListenerRegistry {
    pub fn count(&self) -> usize {
        self.speakers.len()
    }

    pub fn unk(&self) -> usize {
        self.speakers.len()
    }

    pub fn get(&self, conversation_id: &str, channel: Channel) -> Option<usize> {
        self.channels.get(&channel_key(conversation_id, channel)).copied()
    }

    /// Like [`get`](Self::get) but falls back to the UNK id.
    pub fn resolve(&self, conversation_id: &str, channel: Channel) -> usize {
        self.get(conversation_id, channel).unwrap_or_else(|| self.unk())
    }

    pub fn get_key(&self, key: &str) -> Option<usize> {
        self.channels.get(key).copied()
    }

    pub fn speaker(&self, id: usize) -> Option<&str> {
        self.speakers.get(id).map(String::as_str)
    }
}

/// Builds the registry. Speaker keys get ids in sorted key order; channels
/// without a speaker key are linked to an existing speaker drawn with a
/// seeded generator, in input order.
pub fn assign_listener_ids(rows: &[SpeakerRow], seed: u64) -> ListenerRegistry {
    let known: BTreeSet<&str> = rows
        .iter()
        .filter_map(|r| r.speaker_key.as_deref())
        .filter(|k| !k.trim().is_empty())
        .collect();
    let mut speakers: Vec<String> = known.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, usize> =
        speakers.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let known_count = speakers.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = BTreeMap::new();
    for row in rows {
        let key = channel_key(&row.conversation_id, row.channel);
        let id = match row.speaker_key.as_deref().map(str::trim) {
            Some(k) if !k.is_empty() => index[k],
            _ if known_count > 0 => rng.gen_range(0..known_count),
            _ => {
                // No speaker information at all: the channel is its own speaker.
                let next = speakers.len();
                *index.entry(key.clone()).or_insert_with(|| {
                    speakers.push(key.clone());
                    next
                })
            }
        };
        channels.insert(key, id);
    }
    ListenerRegistry { channels, speakers }
}

/// Reads the `conversation_id,channel,speaker_key` table.
pub fn read_speaker_table(path: &Path) -> Result<Vec<SpeakerRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: SpeakerRow = record?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Bc,
    Nobc,
}

/// One line of the dataset manifest. `channel` is the frontchannel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub conversation_id: String,
    pub channel: Channel,
    pub anchor_ms: u64,
    pub kind: RowKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realization: Option<Vec<String>>,
    pub transcript_source: TranscriptSource,
}

/// A manifest line that could not be parsed, kept so the caller can
/// decide whether it is fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLine {
    pub line: usize,
    pub parsed: std::result::Result<ManifestRow, String>,
}

pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<RawLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ManifestRow>(&line).map_err(|e| e.to_string());
        out.push(RawLine { line: i + 1, parsed });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<RawLine>> {
    let file = std::fs::File::open(path)?;
    parse_manifest(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildOutcome {
    pub instances: Vec<BcInstance>,
    /// (line, reason) for every skipped row.
    pub malformed: Vec<(usize, String)>,
    /// Instances that fell back to the UNK listener.
    pub unknown_listeners: usize,
}

/// Labels every manifest row. In strict mode the first malformed row or
/// unregistered listener is an error; otherwise malformed rows are skipped
/// and unknown listeners map to UNK.
pub fn build_instances(
    rows: &[RawLine],
    lexicon: &ContinuerLexicon,
    registry: &ListenerRegistry,
    strict: bool,
) -> Result<BuildOutcome> {
    let mut outcome = BuildOutcome::default();
    for raw in rows {
        let labeled = match &raw.parsed {
            Ok(row) => label_row(row, lexicon),
            Err(e) => Err(e.clone()),
        };
        let (row, category) = match labeled {
            Ok(ok) => ok,
            Err(reason) => {
                if strict {
                    return Err(CorpusError::MalformedRow { line: raw.line, reason });
                }
                outcome.malformed.push((raw.line, reason));
                continue;
            }
        };
        let listener_channel = row.channel.opposite();
        let listener_id = match registry.get(&row.conversation_id, listener_channel) {
            Some(id) => id,
            None if strict => {
                return Err(CorpusError::UnknownListener {
                    conversation_id: row.conversation_id.clone(),
                    channel: listener_channel,
                })
            }
            None => {
                outcome.unknown_listeners += 1;
                registry.unk()
            }
        };
        outcome.instances.push(BcInstance {
            conversation_id: row.conversation_id.clone(),
            frontchannel: row.channel,
            anchor_ms: row.anchor_ms,
            category,
            listener_id,
            transcript_source: row.transcript_source,
        });
    }
    Ok(outcome)
}

fn label_row<'a>(
    row: &'a ManifestRow,
    lexicon: &ContinuerLexicon,
) -> std::result::Result<(&'a ManifestRow, BcCategory), String> {
    if row.conversation_id.trim().is_empty() {
        return Err("empty conversation_id".into());
    }
    match (row.kind, &row.realization) {
        (RowKind::Nobc, None) => Ok((row, BcCategory::NoBc)),
        (RowKind::Nobc, Some(_)) => Err("nobc row carries a realization".into()),
        (RowKind::Bc, None) => Err("bc row without realization".into()),
        (RowKind::Bc, Some(tokens)) => classify_realization(tokens, lexicon)
            .map(|c| (row, c))
            .map_err(|e| e.to_string()),
    }
}

/// Per-class instance counts.
pub fn class_counts(instances: &[BcInstance]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for inst in instances {
        counts[inst.category.index()] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn read(train: &Path, validation: &Path, test: &Path) -> Result<Self> {
        Ok(Self { train: read_id_list(train)?, validation: read_id_list(validation)?, test: read_id_list(test)? })
    }
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "valid" | "dev" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<BcInstance>,
    pub validation: Vec<BcInstance>,
    pub test: Vec<BcInstance>,
    /// Instances whose conversation is in no split.
    pub dropped: usize,
}

impl DatasetSplit {
    pub fn get(&self, name: SplitName) -> &[BcInstance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

pub fn split_dataset(instances: &[BcInstance], spec: &SplitSpec) -> Result<DatasetSplit> {
    let mut route: HashMap<&str, SplitName> = HashMap::new();
    let lists = [
        (SplitName::Train, &spec.train),
        (SplitName::Validation, &spec.validation),
        (SplitName::Test, &spec.test),
    ];
    for (name, ids) in lists {
        let mut seen_here = HashSet::new();
        for id in ids.iter() {
            if !seen_here.insert(id.as_str()) {
                continue;
            }
            if route.insert(id.as_str(), name).is_some() {
                return Err(CorpusError::OverlappingSplitSpec(id.clone()));
            }
        }
    }
    let mut split = DatasetSplit::default();
    for inst in instances {
        match route.get(inst.conversation_id.as_str()) {
            Some(SplitName::Train) => split.train.push(inst.clone()),
            Some(SplitName::Validation) => split.validation.push(inst.clone()),
            Some(SplitName::Test) => split.test.push(inst.clone()),
            None => split.dropped += 1,
        }
    }
    if split.dropped > 0 {
        log::warn!("{} instances belong to no split and were dropped", split.dropped);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> ContinuerLexicon {
        ContinuerLexicon::default()
    }

    #[test]
    fn classify_examples() {
        let l = lex();
        assert_eq!(classify_realization(&["uh-huh"], &l).unwrap(), BcCategory::Continuer);
        assert_eq!(classify_realization(&["oh,", "jeez!"], &l).unwrap(), BcCategory::Assessment);
        assert_eq!(classify_realization(&["uh-huh", "[laughter]"], &l).unwrap(), BcCategory::Continuer);
        assert_eq!(classify_realization(&["um-hum", "yeah"], &l).unwrap(), BcCategory::Assessment);
    }

    #[test]
    fn all_ignorable_is_an_error() {
        let l = lex();
        assert!(matches!(
            classify_realization(&["[noise]", "[laughter]"], &l),
            Err(CorpusError::EmptyRealization)
        ));
        let empty: [&str; 0] = [];
        assert!(matches!(classify_realization(&empty, &l), Err(CorpusError::EmptyRealization)));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_token("Jeez!"), "jeez");
        assert_eq!(normalize_token("Uh-huh."), "uh-huh");
        assert_eq!(normalize_token("[Laughter]"), "[laughter]");
        assert_eq!(normalize_token("uh-"), "uh");
    }

    #[test]
    fn lexicon_rejects_overlap_and_empty() {
        assert!(ContinuerLexicon::new(["uh-huh"], ["uh-huh"]).is_err());
        assert!(ContinuerLexicon::new(Vec::<String>::new(), ["x"]).is_err());
        assert!(ContinuerLexicon::parse("continuer uh huh").is_err());
        assert!(ContinuerLexicon::parse("sometimes uh-huh").is_err());
    }

    #[test]
    fn registry_dense_ids() {
        let rows = vec![
            SpeakerRow { conversation_id: "c1".into(), channel: Channel::A, speaker_key: Some("s2".into()) },
            SpeakerRow { conversation_id: "c1".into(), channel: Channel::B, speaker_key: Some("s1".into()) },
            SpeakerRow { conversation_id: "c2".into(), channel: Channel::A, speaker_key: Some("s3".into()) },
            SpeakerRow { conversation_id: "c2".into(), channel: Channel::B, speaker_key: Some("s1".into()) },
        ];
        let reg = assign_listener_ids(&rows, 7);
        assert_eq!(reg.count(), 3);
        let mut ids: Vec<usize> = ["c1:A", "c1:B", "c2:A", "c2:B"]
            .iter()
            .map(|k| reg.get_key(k).unwrap())
            .collect();
        assert_eq!(reg.get_key("c1:B"), reg.get_key("c2:B"));
        ids.sort();
        ids.dedup();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(reg.unk(), 3);
        assert_eq!(reg.resolve("nope", Channel::A), 3);
    }

    #[test]
    fn registry_missing_speaker_is_seeded() {
        let rows = vec![
            SpeakerRow { conversation_id: "c1".into(), channel: Channel::A, speaker_key: Some("s1".into()) },
            SpeakerRow { conversation_id: "c1".into(), channel: Channel::B, speaker_key: Some("s2".into()) },
            SpeakerRow { conversation_id: "c2".into(), channel: Channel::A, speaker_key: Some("s3".into()) },
            SpeakerRow { conversation_id: "c2".into(), channel: Channel::B, speaker_key: None },
        ];
        let a = assign_listener_ids(&rows, 42);
        let b = assign_listener_ids(&rows, 42);
        assert_eq!(a, b);
        assert_eq!(a.count(), 3);
        assert!(a.get("c2", Channel::B).unwrap() < 3);
    }

    #[test]
    fn registry_without_any_speaker() {
        let rows = vec![SpeakerRow { conversation_id: "c1".into(), channel: Channel::A, speaker_key: None }];
        let reg = assign_listener_ids(&rows, 0);
        assert_eq!(reg.count(), 1);
        assert_eq!(reg.get("c1", Channel::A), Some(0));
    }

    fn inst(conv: &str) -> BcInstance {
        BcInstance {
            conversation_id: conv.into(),
            frontchannel: Channel::A,
            anchor_ms: 1000,
            category: BcCategory::NoBc,
            listener_id: 0,
            transcript_source: TranscriptSource::Manual,
        }
    }

    #[test]
    fn split_routes_by_conversation() {
        let instances = vec![inst("c1"), inst("c2"), inst("c3"), inst("c1"), inst("c9")];
        let spec = SplitSpec { train: vec!["c1".into()], validation: vec!["c2".into()], test: vec!["c3".into()] };
        let split = split_dataset(&instances, &spec).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.dropped, 1);
    }

    #[test]
    fn split_overlap_rejected() {
        let spec = SplitSpec { train: vec!["c1".into()], validation: vec!["c1".into()], test: vec![] };
        assert!(matches!(split_dataset(&[], &spec), Err(CorpusError::OverlappingSplitSpec(id)) if id == "c1"));
    }

    #[test]
    fn empty_manifest() {
        let rows = parse_manifest(std::io::Cursor::new("")).unwrap();
        let reg = assign_listener_ids(&[], 0);
        let out = build_instances(&rows, &lex(), &reg, true).unwrap();
        assert!(out.instances.is_empty());
    }

    #[test]
    fn malformed_rows_skipped_or_fatal() {
        let text = concat!(
            r#"{"conversation_id":"c1","channel":"A","anchor_ms":10,"kind":"nobc","transcript_source":"manual"}"#,
            "\n",
            r#"{"conversation_id":"c1","channel":"A","anchor_ms":20,"kind":"bc","transcript_source":"manual"}"#,
            "\n",
            "not json\n",
            r#"{"conversation_id":"c1","channel":"A","anchor_ms":30,"kind":"bc","realization":["[noise]"],"transcript_source":"manual"}"#,
            "\n",
        );
        let rows = parse_manifest(std::io::Cursor::new(text)).unwrap();
        let reg = assign_listener_ids(
            &[SpeakerRow { conversation_id: "c1".into(), channel: Channel::B, speaker_key: Some("s".into()) }],
            0,
        );
        let out = build_instances(&rows, &lex(), &reg, false).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.malformed.len(), 3);
        assert_eq!(out.instances.len(), rows.len() - out.malformed.len());
        assert!(matches!(
            build_instances(&rows, &lex(), &reg, true),
            Err(CorpusError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_listener_strict_vs_lenient() {
        let text = r#"{"conversation_id":"c5","channel":"A","anchor_ms":10,"kind":"nobc","transcript_source":"automatic"}"#;
        let rows = parse_manifest(std::io::Cursor::new(text)).unwrap();
        let reg = assign_listener_ids(
            &[SpeakerRow { conversation_id: "c1".into(), channel: Channel::B, speaker_key: Some("s".into()) }],
            0,
        );
        assert!(matches!(
            build_instances(&rows, &lex(), &reg, true),
            Err(CorpusError::UnknownListener { .. })
        ));
        let out = build_instances(&rows, &lex(), &reg, false).unwrap();
        assert_eq!(out.instances[0].listener_id, reg.unk());
        assert_eq!(out.unknown_listeners, 1);
    }
}
