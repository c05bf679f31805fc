use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
const N_STRUCTURAL: u32 = 4;

/// Token id layout: four structural tokens, one speaker token per speaker,
/// one mention token per speaker, then the content tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_speakers: u32,
    pub n_content: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Structural,
    Speaker(u32),
    Mention(u32),
    Content(u32),
}

impl Vocab {
    pub fn new(n_speakers: u32, n_content: u32) -> Self {
        Vocab {
            n_speakers,
            n_content,
        }
    }

    pub fn size(&self) -> usize {
        (N_STRUCTURAL + 2 * self.n_speakers + self.n_content) as usize
    }

    pub fn speaker(&self, k: u32) -> u32 {
        debug_assert!(k < self.n_speakers);
        N_STRUCTURAL + k
    }

    pub fn mention(&self, k: u32) -> u32 {
        debug_assert!(k < self.n_speakers);
        N_STRUCTURAL + self.n_speakers + k
    }

    pub fn content(&self, c: u32) -> u32 {
        debug_assert!(c < self.n_content);
        N_STRUCTURAL + 2 * self.n_speakers + c
    }

    pub fn kind(&self, token: u32) -> TokenKind {
        let s = self.n_speakers;
        if token < N_STRUCTURAL {
            TokenKind::Structural
        } else if token < N_STRUCTURAL + s {
            TokenKind::Speaker(token - N_STRUCTURAL)
        } else if token < N_STRUCTURAL + 2 * s {
            TokenKind::Mention(token - N_STRUCTURAL - s)
        } else {
            TokenKind::Content(token - N_STRUCTURAL - 2 * s)
        }
    }

    pub fn contains(&self, token: u32) -> bool {
        (token as usize) < self.size()
    }
}
