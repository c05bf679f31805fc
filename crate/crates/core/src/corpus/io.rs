//! Corpus file format: a JSON header line followed by one JSON record per
//! dialogue.
//!
//! ```text
//! {"format":"emvi-corpus","version":1,"n_speakers":8,"n_content":512}
//! {"id":"syn-000000","utterances":[{"speaker":3,"tokens":[...]},...],"gold_edges":[[2,1],...]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AddresseeGraph, Conversation, Corpus, Dialogue, Utterance, Vocab};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "emvi-corpus";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    n_speakers: u32,
    n_content: u32,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    speaker: u32,
    tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_edges: Option<Vec<(usize, usize)>>,
}

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let header = Header {
            format: FORMAT_TAG.into(),
            version: VERSION,
            n_speakers: self.vocab.n_speakers,
            n_content: self.vocab.n_content,
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for d in &self.dialogues {
            let rec = DialogueRecord {
                id: d.id().to_string(),
                utterances: d
                    .conversation()
                    .utterances
                    .iter()
                    .map(|u| UtteranceRecord {
                        speaker: u.speaker,
                        tokens: u.tokens.clone(),
                    })
                    .collect(),
                gold_edges: d.gold_graph().map(|g| g.edges()),
            };
            serde_json::to_writer(&mut out, &rec).expect("record serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Corpus> {
        let mut lines = reader.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "empty corpus file".into(),
            })?;
        let first = first.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != FORMAT_TAG || header.version != VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported format {} v{}", header.format, header.version),
            });
        }
        let vocab = Vocab::new(header.n_speakers, header.n_content);
        let mut dialogues = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let utterances = rec
                .utterances
                .into_iter()
                .enumerate()
                .map(|(i, u)| {
                    if u.speaker >= vocab.n_speakers {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!("speaker {} out of range", u.speaker),
                        });
                    }
                    if let Some(bad) = u.tokens.iter().find(|&&t| !vocab.contains(t)) {
                        return Err(Error::Parse {
                            line: lineno,
                            message: format!("token {bad} outside vocabulary"),
                        });
                    }
                    Ok(Utterance {
                        speaker: u.speaker,
                        tokens: u.tokens,
                        turn: i + 1,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let t = utterances.len();
            let gold = rec
                .gold_edges
                .map(|edges| AddresseeGraph::from_edges(t, &edges))
                .transpose()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            dialogues.push(Dialogue::new(
                Conversation {
                    id: rec.id,
                    utterances,
                },
                gold,
            )?);
        }
        Ok(Corpus { vocab, dialogues })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_record_reports_line_number() {
        let text = "{\"format\":\"emvi-corpus\",\"version\":1,\"n_speakers\":2,\"n_content\":4}\n\
                    {\"id\":\"a\",\"utterances\":[{\"speaker\":0,\"tokens\":[8]}]}\n\
                    {\"id\":\"b\",\"utterances\":[{\"speaker\":5,\"tokens\":[8]}]}\n";
        match Corpus::from_reader(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
