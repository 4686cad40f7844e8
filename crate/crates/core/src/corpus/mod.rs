//! Dialogues, frames, the role label inventory and the on-disk formats.

mod bio;
mod io;
mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bio::{bio_decode, bio_decode_segmented, bio_encode, encode_spans, LabeledSpan, Tag, TagSequence};
pub use io::{load_dialogues, load_dialogues_open, load_dialogues_with, load_parallel, load_srl, write_frames, ParallelPair};
pub use stats::{compute_stats, DatasetStats};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub turn: u32,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub language: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidDialogue {
            dialogue: self.id.clone(),
            message,
        };
        if self.utterances.is_empty() {
            return Err(bad("no utterances".into()));
        }
        let mut prev = 0;
        for (i, u) in self.utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(bad(format!("utterance {i} has no tokens")));
            }
            if i == 0 && u.turn != 1 {
                return Err(bad(format!("first turn is {}, expected 1", u.turn)));
            }
            if i > 0 && u.turn <= prev {
                return Err(bad(format!("turn {} at utterance {i} does not increase", u.turn)));
            }
            prev = u.turn;
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }

    /// Word offset of each utterance in the flattened dialogue.
    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.utterances
            .iter()
            .map(|u| {
                let o = at;
                at += u.tokens.len();
                o
            })
            .collect()
    }
}

/// Token range inside one utterance; `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub utt: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(utt: usize, start: usize, end: usize) -> Self {
        Span { utt, start, end }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.utt == other.utt && self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Argument {
    #[serde(flatten)]
    pub span: Span,
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub predicate: Span,
    #[serde(default)]
    pub arguments: Vec<Argument>,
}

impl Frame {
    /// Number of utterances in the frame's context window (up to and including
    /// the predicate's utterance).
    pub fn context_len(&self) -> usize {
        self.predicate.utt + 1
    }

    pub fn validate(&self, dialogue: &Dialogue, index: usize, labels: &LabelInventory) -> Result<()> {
        let bad = |message: String| Error::InvalidFrame {
            dialogue: dialogue.id.clone(),
            frame: index,
            message,
        };
        let in_bounds = |s: &Span| {
            s.utt < dialogue.utterances.len()
                && s.start <= s.end
                && s.end < dialogue.utterances[s.utt].tokens.len()
        };
        if !in_bounds(&self.predicate) {
            return Err(bad(format!("predicate {:?} out of bounds", self.predicate)));
        }
        for arg in &self.arguments {
            if arg.span.utt > self.predicate.utt {
                return Err(bad(format!(
                    "argument {:?} lies after the predicate turn {}",
                    arg.span, self.predicate.utt
                )));
            }
            if !in_bounds(&arg.span) {
                return Err(bad(format!("argument {:?} out of bounds", arg.span)));
            }
            if labels.role_index(&arg.role).is_none() {
                return Err(bad(format!("unknown role {:?}", arg.role)));
            }
        }
        let mut spans: Vec<&Span> = self.arguments.iter().map(|a| &a.span).collect();
        spans.push(&self.predicate);
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                if a.overlaps(b) {
                    return Err(bad(format!("overlapping spans {a:?} and {b:?}")));
                }
            }
        }
        Ok(())
    }
}

/// One dialogue record with all of its annotated frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(flatten)]
    pub dialogue: Dialogue,
    #[serde(default)]
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.samples.iter().map(|s| s.frames.len()).sum()
    }

    /// Every (dialogue, frame) pair in file order.
    pub fn frames(&self) -> impl Iterator<Item = (&Dialogue, &Frame)> {
        self.samples
            .iter()
            .flat_map(|s| s.frames.iter().map(move |f| (&s.dialogue, f)))
    }

    /// Roles used anywhere in the dataset, in first-seen order.
    pub fn roles(&self) -> Vec<String> {
        let mut roles: Vec<String> = Vec::new();
        for (_, f) in self.frames() {
            for a in &f.arguments {
                if !roles.contains(&a.role) {
                    roles.push(a.role.clone());
                }
            }
        }
        roles
    }
}

/// Ordered role set. Tags are `O` followed by `B-x`, `I-x` per role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelInventory {
    roles: Vec<String>,
}

/// Roles shared by standard SRL and CSRL annotation.
pub const SHARED_ROLES: [&str; 8] = [
    "ARG0", "ARG1", "ARG2", "ARG3", "ARG4", "ARG-LOC", "ARG-TMP", "ARG-PRP",
];

impl LabelInventory {
    pub fn new<S: Into<String>>(roles: impl IntoIterator<Item = S>) -> Result<Self> {
        let roles: Vec<String> = roles.into_iter().map(Into::into).collect();
        for (i, r) in roles.iter().enumerate() {
            if r.is_empty() || r == "O" {
                return Err(Error::Config(format!("invalid role name {r:?}")));
            }
            if roles[..i].contains(r) {
                return Err(Error::Config(format!("duplicate role {r:?}")));
            }
        }
        Ok(LabelInventory { roles })
    }

    /// The eight shared roles.
    pub fn shared() -> Self {
        LabelInventory {
            roles: SHARED_ROLES.iter().map(|r| r.to_string()).collect(),
        }
    }

    /// Shared roles followed by any extra roles, deduplicated.
    pub fn shared_with<S: AsRef<str>>(extra: &[S]) -> Self {
        let mut inv = Self::shared();
        for r in extra {
            let r = r.as_ref();
            if !inv.roles.iter().any(|x| x == r) {
                inv.roles.push(r.to_string());
            }
        }
        inv
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn role_index(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }

    pub fn tag_count(&self) -> usize {
        1 + 2 * self.roles.len()
    }

    pub fn tag_name(&self, tag: Tag) -> String {
        match tag.role() {
            None => "O".to_string(),
            Some(r) if tag.is_begin() => format!("B-{}", self.roles[r]),
            Some(r) => format!("I-{}", self.roles[r]),
        }
    }

    pub fn parse_tag(&self, name: &str) -> Result<Tag> {
        if name == "O" {
            return Ok(Tag::O);
        }
        let (prefix, role) = name
            .split_once('-')
            .ok_or_else(|| Error::UnknownRole(name.to_string()))?;
        let r = self
            .role_index(role)
            .ok_or_else(|| Error::UnknownRole(role.to_string()))?;
        match prefix {
            "B" => Ok(Tag::begin(r)),
            "I" => Ok(Tag::inside(r)),
            _ => Err(Error::UnknownRole(name.to_string())),
        }
    }

    /// True when every role of `other` is also in `self`.
    pub fn covers(&self, other: &LabelInventory) -> bool {
        other.roles.iter().all(|r| self.roles.contains(r))
    }
}

impl Default for LabelInventory {
    fn default() -> Self {
        Self::shared()
    }
}
