//! Dialogues, the synthetic generator, chat-log ingestion, and construction
//! of context-response training instances.
//!
//! Gold reply structure lives only on [`Dialogue`]. Training code receives
//! [`Conversation`]s, which carry no gold fields.

mod generate;
mod graph;
mod ingest;
mod instances;
mod io;
pub mod layout;
pub mod mlm;
mod vocab;

pub use generate::{expected_distance_histogram, generate_corpus, GeneratorConfig};
pub use graph::AddresseeGraph;
pub use ingest::{ingest_chatlog, tokenize_text, ChatlogFormat, HASH_BUCKETS};
pub use instances::{
    build_dialogue_instances, build_instances, negatives_for, NegativeConfig, NegativeType,
    TrainingInstance,
};
pub use vocab::{TokenKind, Vocab, CLS, MASK, PAD, SEP};

/// One turn of a dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: u32,
    pub tokens: Vec<u32>,
    /// 1-based position in the dialogue.
    pub turn: usize,
}

/// A dialogue as seen by training code: speakers and tokens only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// 1-based accessor.
    pub fn turn(&self, t: usize) -> &Utterance {
        &self.utterances[t - 1]
    }
}

/// A conversation plus its (optional) annotated reply structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    conversation: Conversation,
    gold: Option<AddresseeGraph>,
}

impl Dialogue {
    pub fn new(conversation: Conversation, gold: Option<AddresseeGraph>) -> crate::Result<Self> {
        if let Some(g) = &gold {
            if g.len() != conversation.len() {
                return Err(crate::Error::Validation(format!(
                    "dialogue {}: gold graph has {} turns, dialogue has {}",
                    conversation.id,
                    g.len(),
                    conversation.len()
                )));
            }
        }
        Ok(Dialogue { conversation, gold })
    }

    pub fn id(&self) -> &str {
        &self.conversation.id
    }

    pub fn len(&self) -> usize {
        self.conversation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversation.is_empty()
    }

    pub fn conversation(&self) -> &Conversation {
        &self.conversation
    }

    pub fn gold_graph(&self) -> Option<&AddresseeGraph> {
        self.gold.as_ref()
    }

    pub fn into_parts(self) -> (Conversation, Option<AddresseeGraph>) {
        (self.conversation, self.gold)
    }
}

/// A corpus file in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn conversations(&self) -> Vec<Conversation> {
        self.dialogues.iter().map(|d| d.conversation().clone()).collect()
    }

    pub fn n_positive_instances(&self) -> usize {
        self.dialogues.iter().map(|d| d.len().saturating_sub(1)).sum()
    }
}
