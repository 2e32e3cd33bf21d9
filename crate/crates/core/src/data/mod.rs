//! Click logs, entity-linked titles, vocabularies and time-based splitting.
//!
//! Logs are JSON lines, one impression each:
//! `{"user": str, "tokens": [str], "entities": [str|null], "label": 0|1, "ts": int}`.
//! `entities[i]` is the entity linked to `tokens[i]`; both lists always have the
//! same length.

mod synthetic;

pub use synthetic::{
    generate_synthetic, measure, synthesize, CorpusStats, Manifest, SyntheticCorpus, SyntheticSpec, TitleInfo,
    BASE_TIMESTAMP,
};

use crate::error::{Error, Result};
use crate::kcnn::{EncodedTitle, PAD, UNK};
use crate::kg::{EntityId, NameTable};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Tokens of a title with the entity linked to each token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TitleRecord {
    tokens: Vec<String>,
    entities: Vec<Option<String>>,
}

impl TitleRecord {
    pub fn new(tokens: Vec<String>, entities: Vec<Option<String>>) -> Result<Self> {
        if tokens.len() != entities.len() {
            return Err(Error::Dataset(format!(
                "title has {} tokens but {} entity slots",
                tokens.len(),
                entities.len()
            )));
        }
        Ok(Self { tokens, entities })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn entities(&self) -> &[Option<String>] {
        &self.entities
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn linked(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().flatten().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickLog {
    pub user: String,
    pub title: TitleRecord,
    pub label: u8,
    pub ts: i64,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    user: String,
    tokens: Vec<String>,
    entities: Vec<Option<String>>,
    label: i64,
    ts: i64,
}

impl ClickLog {
    pub fn from_json_line(line: &str, lineno: usize) -> Result<Self> {
        let data_err = |msg: String| Error::Data { line: lineno, msg };
        let raw: LogLine = serde_json::from_str(line).map_err(|e| data_err(e.to_string()))?;
        if raw.label != 0 && raw.label != 1 {
            return Err(data_err(format!("label must be 0 or 1, got {}", raw.label)));
        }
        let title = TitleRecord::new(raw.tokens, raw.entities).map_err(|e| match e {
            Error::Dataset(msg) => data_err(msg),
            other => other,
        })?;
        Ok(Self {
            user: raw.user,
            title,
            label: raw.label as u8,
            ts: raw.ts,
        })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&LogLine {
            user: self.user.clone(),
            tokens: self.title.tokens.clone(),
            entities: self.title.entities.clone(),
            label: self.label as i64,
            ts: self.ts,
        })?)
    }
}

pub fn read_logs<R: BufRead>(input: R) -> Result<Vec<ClickLog>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ClickLog::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_logs<W: Write>(mut out: W, logs: &[ClickLog]) -> Result<()> {
    for log in logs {
        writeln!(out, "{}", log.to_json_line()?)?;
    }
    Ok(())
}

/// Logs with the vocabularies they induce.
#[derive(Debug, Clone)]
pub struct LoadedLogs {
    pub logs: Vec<ClickLog>,
    pub words: Vocab,
    /// Entity names mentioned in the logs, sorted.
    pub entities: Vec<String>,
}

pub fn load_logs(path: &Path) -> Result<LoadedLogs> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let logs = read_logs(BufReader::new(file))?;
    let words = Vocab::build(&logs);
    let entities = mentioned_entities(&logs).into_iter().collect();
    Ok(LoadedLogs { logs, words, entities })
}

pub fn mentioned_entities(logs: &[ClickLog]) -> BTreeSet<String> {
    logs.iter()
        .flat_map(|l| l.title.linked().map(str::to_string))
        .collect()
}

/// Word vocabulary: `<pad>` = 0, `<unk>` = 1, then the corpus words in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build(logs: &[ClickLog]) -> Self {
        let set: BTreeSet<&str> = logs
            .iter()
            .flat_map(|l| l.title.tokens.iter().map(String::as_str))
            .filter(|w| *w != PAD_TOKEN && *w != UNK_TOKEN)
            .collect();
        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        words.extend(set.into_iter().map(str::to_string));
        Self::from_words(words).expect("reserved tokens are in place")
    }

    /// Rebuild from an id-ordered word list (as stored in checkpoints).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD] != PAD_TOKEN || words[UNK] != UNK_TOKEN {
            return Err(Error::Dataset("vocabulary must start with <pad> and <unk>".into()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    /// Word id, falling back to UNK.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Map a title to padded ids. Entities unknown to `entities` (or all, when
    /// `None`) become id 0.
    pub fn encode(&self, title: &TitleRecord, entities: Option<&NameTable>, n: usize) -> EncodedTitle {
        let words = title.tokens.iter().map(|w| self.id(w)).collect();
        let ents = title
            .entities
            .iter()
            .map(|e| {
                e.as_deref()
                    .and_then(|name| entities.and_then(|t| t.get(name)))
                    .map_or(EntityId::NONE, EntityId)
            })
            .collect();
        EncodedTitle::padded(words, ents, n).expect("title records are aligned")
    }
}

/// Split at `boundary`: train has `ts < boundary`, test has `ts >= boundary`.
pub fn time_split(logs: &[ClickLog], boundary: i64) -> (Vec<ClickLog>, Vec<ClickLog>) {
    if let (Some(lo), Some(hi)) = (logs.iter().map(|l| l.ts).min(), logs.iter().map(|l| l.ts).max()) {
        if boundary <= lo || boundary > hi {
            log::warn!("split boundary {boundary} lies outside the data range [{lo}, {hi}]");
        }
    }
    logs.iter().cloned().partition(|l| l.ts < boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng as _;

    fn line(user: &str, tokens: &[&str], ents: &[Option<&str>], label: u8, ts: i64) -> ClickLog {
        ClickLog {
            user: user.into(),
            title: TitleRecord::new(
                tokens.iter().map(|s| s.to_string()).collect(),
                ents.iter().map(|e| e.map(str::to_string)).collect(),
            )
            .unwrap(),
            label,
            ts,
        }
    }

    #[test]
    fn empty_input() {
        let logs = read_logs("".as_bytes()).unwrap();
        assert!(logs.is_empty());
        let v = Vocab::build(&logs);
        assert!(v.is_empty());
        assert!(mentioned_entities(&logs).is_empty());
    }

    #[test]
    fn parses_aligned_record() {
        let text = r#"{"user":"u1","tokens":["a","b","c"],"entities":["x",null,"y"],"label":1,"ts":5}"#;
        let logs = read_logs(text.as_bytes()).unwrap();
        assert_eq!(logs.len(), 1);
        let t = &logs[0].title;
        assert_eq!(t.tokens(), &["a", "b", "c"]);
        assert_eq!(t.entities(), &[Some("x".into()), None, Some("y".into())]);
        assert_eq!(read_logs(logs[0].to_json_line().unwrap().as_bytes()).unwrap(), logs);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let ragged = "\n{\"user\":\"u\",\"tokens\":[\"a\"],\"entities\":[],\"label\":0,\"ts\":1}";
        match read_logs(ragged.as_bytes()).unwrap_err() {
            Error::Data { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("entity slots"), "{msg}");
            }
            e => panic!("{e}"),
        }
        let bad_label = r#"{"user":"u","tokens":[],"entities":[],"label":2,"ts":1}"#;
        assert!(matches!(read_logs(bad_label.as_bytes()), Err(Error::Data { line: 1, .. })));
        assert!(matches!(read_logs("{nope".as_bytes()), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn vocabulary_is_lexicographic_and_stable() {
        let logs = vec![
            line("u", &["zeta", "alpha"], &[None, None], 1, 0),
            line("u", &["mid", "alpha"], &[None, Some("e")], 0, 1),
        ];
        let v = Vocab::build(&logs);
        assert_eq!(v.words(), &["<pad>", "<unk>", "alpha", "mid", "zeta"]);
        assert_eq!(v.id("never-seen"), UNK);
        assert_eq!(Vocab::build(&logs), v);
        let mut names = NameTable::default();
        names.intern("e");
        let enc = v.encode(&logs[1].title, Some(&names), 4);
        assert_eq!(enc.words(), &[3, 2, PAD, PAD]);
        assert_eq!(enc.entities(), &[EntityId::NONE, EntityId(1), EntityId::NONE, EntityId::NONE]);
        assert!(v.encode(&logs[1].title, None, 4).linked_entities().is_empty());
    }

    #[test]
    fn split_cases() {
        let mut rng = SeedTree::new(3).rng();
        let logs: Vec<ClickLog> = (0..200)
            .map(|i| line(&format!("u{}", i % 7), &["w"], &[None], (i % 2) as u8, rng.gen_range(0..1000)))
            .collect();
        let (train, test) = time_split(&logs, -5);
        assert!(train.is_empty() && test.len() == 200);
        let (train, test) = time_split(&logs, 500);
        assert_eq!(train.len() + test.len(), logs.len());
        let max_train = train.iter().map(|l| l.ts).max().unwrap();
        let min_test = test.iter().map(|l| l.ts).min().unwrap();
        assert!(max_train < 500 && min_test >= 500);
    }
}
