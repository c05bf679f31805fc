//! Conversion of line-delimited chat logs into corpus form.
//!
//! Each record carries `dialogue_id`, `speaker`, `text` and an optional
//! `reply_to` (1-based turn index within the dialogue). Records of one
//! dialogue appear in turn order; dialogues may interleave.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::{AddresseeGraph, Conversation, Corpus, Dialogue, Utterance, Vocab};
use crate::error::{Error, Result};

/// Number of hash buckets for ingested text.
pub const HASH_BUCKETS: u32 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChatlogFormat {
    /// One JSON object per line.
    Jsonl,
    /// `dialogue_id<TAB>speaker<TAB>text[<TAB>reply_to]`, optional header row.
    Tsv,
}

impl ChatlogFormat {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "jsonl" | "json" => Ok(ChatlogFormat::Jsonl),
            "tsv" => Ok(ChatlogFormat::Tsv),
            other => Err(Error::Config(format!("unknown chat log format '{other}'"))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct Record {
    dialogue_id: String,
    speaker: String,
    text: String,
    #[serde(default)]
    reply_to: Option<usize>,
}

struct Pending {
    line: usize,
    speaker: String,
    text: String,
    reply_to: Option<usize>,
}

/// FNV-1a over the lowercased whitespace tokens, reduced to a bucket index.
pub fn tokenize_text(text: &str) -> Vec<u32> {
    text.split_whitespace().map(|w| bucket(&w.to_lowercase())).collect()
}

fn bucket(word: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h % HASH_BUCKETS
}

pub fn ingest_chatlog(path: &Path, format: ChatlogFormat) -> Result<Corpus> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(f), format)
}

pub fn ingest_reader(reader: impl BufRead, format: ChatlogFormat) -> Result<Corpus> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Pending>> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match format {
            ChatlogFormat::Jsonl => serde_json::from_str::<Record>(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?,
            ChatlogFormat::Tsv => match parse_tsv(&line, lineno)? {
                Some(r) => r,
                None => continue,
            },
        };
        let group = groups.entry(rec.dialogue_id.clone()).or_insert_with(|| {
            order.push(rec.dialogue_id.clone());
            Vec::new()
        });
        group.push(Pending {
            line: lineno,
            speaker: rec.speaker,
            text: rec.text,
            reply_to: rec.reply_to,
        });
    }

    let mut built = Vec::new();
    let mut max_speakers = 0u32;
    for id in order {
        let records = groups.remove(&id).expect("grouped");
        if records.len() < 2 {
            continue;
        }
        let (dialogue, n_speakers) = build_dialogue(id, records)?;
        max_speakers = max_speakers.max(n_speakers);
        built.push(dialogue);
    }
    let vocab = Vocab::new(max_speakers.max(1), HASH_BUCKETS);
    let dialogues = built
        .into_iter()
        .map(|(conv, gold)| {
            let conv = Conversation {
                id: conv.id,
                utterances: conv
                    .utterances
                    .into_iter()
                    .map(|u| Utterance {
                        speaker: u.speaker,
                        tokens: u.tokens.into_iter().map(|t| resolve(&vocab, t)).collect(),
                        turn: u.turn,
                    })
                    .collect(),
            };
            Dialogue::new(conv, gold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { vocab, dialogues })
}

// Raw token encoding before the vocabulary is known: content buckets below
// HASH_BUCKETS, mentions of local speaker k at HASH_BUCKETS + k.
fn resolve(vocab: &Vocab, raw: u32) -> u32 {
    if raw < HASH_BUCKETS {
        vocab.content(raw)
    } else {
        vocab.mention(raw - HASH_BUCKETS)
    }
}

fn parse_tsv(line: &str, lineno: usize) -> Result<Option<Record>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if lineno == 1 && fields.first() == Some(&"dialogue_id") {
        return Ok(None);
    }
    if fields.len() < 3 || fields.len() > 4 {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
        });
    }
    let reply_to = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<usize>().map_err(|e| Error::Parse {
            line: lineno,
            message: format!("reply_to '{s}': {e}"),
        })?),
    };
    Ok(Some(Record {
        dialogue_id: fields[0].to_string(),
        speaker: fields[1].to_string(),
        text: fields[2].to_string(),
        reply_to,
    }))
}

fn build_dialogue(
    id: String,
    records: Vec<Pending>,
) -> Result<((Conversation, Option<AddresseeGraph>), u32)> {
    // speakers are numbered per dialogue in order of first appearance
    let mut speaker_ids: HashMap<&str, u32> = HashMap::new();
    for r in &records {
        let next = speaker_ids.len() as u32;
        speaker_ids.entry(r.speaker.as_str()).or_insert(next);
    }
    let mut parents = Vec::with_capacity(records.len());
    let mut complete = true;
    for (idx, r) in records.iter().enumerate() {
        let turn = idx + 1;
        match r.reply_to {
            Some(j) if j == 0 || j >= turn => {
                return Err(Error::Validation(format!(
                    "line {}: dialogue {id} turn {turn} replies to turn {j}, which is not earlier",
                    r.line
                )))
            }
            Some(j) => parents.push(Some(j)),
            None => {
                if turn > 1 {
                    complete = false;
                }
                parents.push(None);
            }
        }
    }
    let utterances = records
        .iter()
        .enumerate()
        .map(|(idx, r)| {
            let tokens = r
                .text
                .split_whitespace()
                .map(|w| match w.strip_prefix('@').and_then(|n| speaker_ids.get(n)) {
                    Some(&k) => HASH_BUCKETS + k,
                    None => bucket(&w.to_lowercase()),
                })
                .collect();
            Utterance {
                speaker: speaker_ids[r.speaker.as_str()],
                tokens,
                turn: idx + 1,
            }
        })
        .collect();
    let gold = if complete && parents[0].is_none() {
        Some(AddresseeGraph::from_parents(parents)?)
    } else {
        None
    };
    let n = speaker_ids.len() as u32;
    Ok(((Conversation { id, utterances }, gold), n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jsonl(lines: &[&str]) -> Result<Corpus> {
        ingest_reader(lines.join("\n").as_bytes(), ChatlogFormat::Jsonl)
    }

    #[test]
    fn chain_log_becomes_chain_graph() {
        let c = jsonl(&[
            r#"{"dialogue_id":"a","speaker":"ann","text":"hello there"}"#,
            r#"{"dialogue_id":"a","speaker":"bob","text":"hi @ann","reply_to":1}"#,
            r#"{"dialogue_id":"a","speaker":"ann","text":"how are you","reply_to":2}"#,
        ])
        .unwrap();
        assert_eq!(c.dialogues.len(), 1);
        let d = &c.dialogues[0];
        assert_eq!(d.gold_graph(), Some(&AddresseeGraph::chain(3)));
        let u2 = d.conversation().turn(2);
        assert_eq!(u2.speaker, 1);
        assert_eq!(u2.tokens[1], c.vocab.mention(0));
        assert_eq!(u2.tokens[0], c.vocab.content(bucket("hi")));
    }

    #[test]
    fn forward_reply_is_validation_error() {
        let err = jsonl(&[
            r#"{"dialogue_id":"a","speaker":"ann","text":"x"}"#,
            r#"{"dialogue_id":"a","speaker":"bob","text":"y","reply_to":3}"#,
            r#"{"dialogue_id":"a","speaker":"ann","text":"z","reply_to":1}"#,
        ])
        .unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.starts_with("line 2:"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_reply_to_means_no_gold() {
        let c = jsonl(&[
            r#"{"dialogue_id":"a","speaker":"ann","text":"x"}"#,
            r#"{"dialogue_id":"a","speaker":"bob","text":"y"}"#,
        ])
        .unwrap();
        assert!(c.dialogues[0].gold_graph().is_none());
    }

    #[test]
    fn short_dialogues_dropped_and_malformed_lines_reported() {
        let c = jsonl(&[
            r#"{"dialogue_id":"solo","speaker":"ann","text":"x"}"#,
            r#"{"dialogue_id":"b","speaker":"ann","text":"x"}"#,
            r#"{"dialogue_id":"b","speaker":"cat","text":"y"}"#,
        ])
        .unwrap();
        assert_eq!(c.dialogues.len(), 1);
        assert_eq!(c.dialogues[0].id(), "b");
        match jsonl(&[r#"{"dialogue_id":"b","speaker":"ann","text":"x"}"#, "{bad"]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tsv_with_header() {
        let text = "dialogue_id\tspeaker\ttext\treply_to\nd\tx\thello\t\nd\ty\tback\t1\n";
        let c = ingest_reader(text.as_bytes(), ChatlogFormat::Tsv).unwrap();
        assert_eq!(c.dialogues[0].gold_graph(), Some(&AddresseeGraph::chain(2)));
    }

    #[test]
    fn tokenizer_is_case_insensitive_and_stable() {
        assert_eq!(tokenize_text("Hello  WORLD"), tokenize_text("hello world"));
        assert_eq!(tokenize_text("a b c").len(), 3);
        assert!(tokenize_text("anything").iter().all(|&t| t < HASH_BUCKETS));
    }
}
