//! Contextual word encoder standing in for the cross-lingual language model.
//!
//! Words are split into subtokens by [`Vocab`], serialized as
//! `[CLS] u_1 [SEP] u_2 [SEP] ...`, run through a stack of post-norm
//! Transformer layers, and reduced back to one row per word. A word's
//! representation is the concatenation of the four top-most hidden states.

use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Span};
use crate::error::{Error, Result};
use crate::graph::{Block, Graph, Mat, ParamId, ParamStore, Var};
use crate::mtrans::{LayerShape, MTransLayer, Variant};
use crate::nn::{Embedding, LayerNorm};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Number of top layers concatenated into a word representation.
pub const TOP_LAYERS: usize = 4;

/// Word-level vocabulary with a character-piece fallback for unseen words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Keeps words seen at least `min_count` times plus every character as a
    /// `##c` piece. Ordering is deterministic.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
            for c in w.chars() {
                chars.insert(c, ());
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(w, _)| w.to_string()));
        tokens.extend(chars.into_keys().map(|c| format!("##{c}")));
        let mut seen = std::collections::HashSet::new();
        tokens.retain(|t| seen.insert(t.clone()));
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special_count(&self) -> usize {
        SPECIALS.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Subtoken ids of one word; never empty.
    pub fn word_pieces(&self, word: &str) -> Vec<usize> {
        if let Some(id) = self.id(word) {
            return vec![id];
        }
        let pieces: Vec<usize> = word
            .chars()
            .map(|c| self.id(&format!("##{c}")).unwrap_or(UNK))
            .collect();
        if pieces.is_empty() {
            vec![UNK]
        } else {
            pieces
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubwordPooling {
    #[default]
    First,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    #[serde(default)]
    pub pooling: SubwordPooling,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < TOP_LAYERS {
            return Err(Error::Config(format!(
                "backbone needs at least {TOP_LAYERS} layers, got {}",
                self.layers
            )));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size <= SPECIALS.len() || self.max_len < 3 {
            return Err(Error::Config("vocabulary or sequence limit too small".into()));
        }
        Ok(())
    }

    /// Width of a word representation.
    pub fn output_width(&self) -> usize {
        TOP_LAYERS * self.hidden
    }
}

/// One utterance of a serialized context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceSlot {
    /// Index of the utterance in the source dialogue.
    pub source: usize,
    /// Word range `[start, end)` in the serialized context.
    pub words: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedContext {
    pub ids: Vec<usize>,
    /// Word index per subtoken; `None` for `[CLS]` and `[SEP]`.
    pub word_of: Vec<Option<usize>>,
    /// First subtoken of every word.
    pub word_starts: Vec<usize>,
    pub utterances: Vec<UtteranceSlot>,
    /// Per-word speaker index (first-appearance order in the dialogue).
    pub speakers: Vec<usize>,
    /// Per-word zero-based turn index.
    pub turns: Vec<usize>,
    /// Per-word predicate indicator (0 or 1).
    pub predicate: Vec<usize>,
    /// Oldest utterances dropped to fit the length limit.
    pub dropped: usize,
}

impl TokenizedContext {
    pub fn word_count(&self) -> usize {
        self.word_starts.len()
    }

    /// Utterance segments as word ranges.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.utterances.iter().map(|u| u.words).collect()
    }

    /// Slot index per word.
    pub fn utterance_of_word(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.word_count());
        for (k, u) in self.utterances.iter().enumerate() {
            out.extend(std::iter::repeat_n(k, u.words.1 - u.words.0));
        }
        out
    }

    /// Flat word offset of `(utterance, token)` in the source dialogue, if kept.
    pub fn word_index(&self, utt: usize, token: usize) -> Option<usize> {
        let slot = self.utterances.iter().find(|u| u.source == utt)?;
        let w = slot.words.0 + token;
        (w < slot.words.1).then_some(w)
    }
}

/// Speaker index per utterance, numbered by first appearance.
pub fn speaker_ids(dialogue: &Dialogue) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    dialogue
        .utterances
        .iter()
        .map(|u| match seen.iter().position(|s| *s == u.speaker) {
            Some(i) => i,
            None => {
                seen.push(&u.speaker);
                seen.len() - 1
            }
        })
        .collect()
}

/// Serializes utterances `0..upto` of a dialogue, dropping whole oldest
/// utterances (never the last one) until the sequence fits `max_len`.
pub fn tokenize_utterances(
    dialogue: &Dialogue,
    upto: usize,
    predicate: Option<Span>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenizedContext> {
    assert!(upto >= 1 && upto <= dialogue.utterances.len());
    let pieces: Vec<Vec<Vec<usize>>> = dialogue.utterances[..upto]
        .iter()
        .map(|u| u.tokens.iter().map(|w| vocab.word_pieces(w)).collect())
        .collect();
    let cost: Vec<usize> = pieces
        .iter()
        .map(|u| u.iter().map(Vec::len).sum::<usize>() + 1)
        .collect();
    let mut first = 0;
    let mut total = 1 + cost.iter().sum::<usize>();
    while total > max_len && first + 1 < upto {
        total -= cost[first];
        first += 1;
    }
    if total > max_len {
        return Err(Error::SequenceTooLong { len: total, max: max_len });
    }

    let speakers_by_utt = speaker_ids(dialogue);
    let mut ctx = TokenizedContext {
        ids: vec![CLS],
        word_of: vec![None],
        word_starts: Vec::new(),
        utterances: Vec::new(),
        speakers: Vec::new(),
        turns: Vec::new(),
        predicate: Vec::new(),
        dropped: first,
    };
    for (u, utt_pieces) in pieces.iter().enumerate().skip(first) {
        let start = ctx.word_starts.len();
        for (t, word) in utt_pieces.iter().enumerate() {
            let w = ctx.word_starts.len();
            ctx.word_starts.push(ctx.ids.len());
            for &id in word {
                ctx.ids.push(id);
                ctx.word_of.push(Some(w));
            }
            ctx.speakers.push(speakers_by_utt[u]);
            ctx.turns.push(dialogue.utterances[u].turn.saturating_sub(1) as usize);
            let is_pred = predicate.is_some_and(|p| p.utt == u && p.start <= t && t <= p.end);
            ctx.predicate.push(usize::from(is_pred));
        }
        ctx.ids.push(SEP);
        ctx.word_of.push(None);
        ctx.utterances.push(UtteranceSlot {
            source: u,
            words: (start, ctx.word_starts.len()),
        });
    }
    Ok(ctx)
}

/// Context window of a frame: every utterance up to the predicate's.
pub fn tokenize_context(
    dialogue: &Dialogue,
    frame: &crate::corpus::Frame,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenizedContext> {
    tokenize_utterances(dialogue, frame.context_len(), Some(frame.predicate), vocab, max_len)
}

/// Tokens of a sentence pair as `[CLS] a [SEP] b [SEP]`.
pub fn pair_ids(vocab: &Vocab, source: &[String], target: &[String]) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(source.iter().flat_map(|w| vocab.word_pieces(w)));
    ids.push(SEP);
    ids.extend(target.iter().flat_map(|w| vocab.word_pieces(w)));
    ids.push(SEP);
    ids
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    tokens: Embedding,
    positions: Embedding,
    norm: LayerNorm,
    layers: Vec<MTransLayer>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let tokens = Embedding::new(store, "backbone.tokens", Block::Backbone, config.vocab_size, h, rng);
        let positions = Embedding::new(store, "backbone.positions", Block::Backbone, config.max_len, h, rng);
        let norm = LayerNorm::new(store, "backbone.norm", Block::Backbone, h);
        let layers = (0..config.layers)
            .map(|i| {
                let shape = LayerShape {
                    variant: Variant::Standard,
                    input: h,
                    model: h,
                    heads: config.heads,
                    ffn: config.ffn,
                    dropout: config.dropout,
                };
                MTransLayer::new(store, &format!("backbone.layer{i}"), Block::Backbone, shape, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            config,
            tokens,
            positions,
            norm,
            layers,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tokens.table, self.positions.table];
        ids.extend(self.norm.params());
        for l in &self.layers {
            ids.extend(l.params());
        }
        ids
    }

    /// Hidden states of every layer, each `|S| × h`.
    pub fn hidden_states(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Vec<Var>> {
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let tok = self.tokens.lookup(g, store, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.positions.lookup(g, store, &positions);
        let x = g.add(tok, pos);
        let mut x = self.norm.forward(g, store, x);
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Concatenation of the four top-most hidden states, `|S| × 4h`.
    pub fn top_concat(&self, g: &mut Graph, states: &[Var]) -> Var {
        g.concat_cols(&states[states.len() - TOP_LAYERS..])
    }

    /// Word representations `e`, `|S_w| × 4h`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, ctx: &TokenizedContext) -> Result<Var> {
        let states = self.hidden_states(g, store, &ctx.ids)?;
        let top = self.top_concat(g, &states);
        Ok(match self.config.pooling {
            SubwordPooling::First => g.gather_rows(top, &ctx.word_starts),
            SubwordPooling::Mean => {
                let mut m = Mat::zeros((ctx.word_count(), ctx.ids.len()));
                let mut counts = vec![0usize; ctx.word_count()];
                for w in ctx.word_of.iter().flatten() {
                    counts[*w] += 1;
                }
                for (s, w) in ctx.word_of.iter().enumerate() {
                    if let Some(w) = w {
                        m[[*w, s]] = 1.0 / counts[*w] as f64;
                    }
                }
                g.left_const(m, top)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Frame, Utterance};
    use crate::graph::Mode;
    use rand::SeedableRng;

    fn dialogue(lens: &[usize]) -> Dialogue {
        Dialogue {
            id: "d".into(),
            language: "en".into(),
            utterances: lens
                .iter()
                .enumerate()
                .map(|(i, &n)| Utterance {
                    speaker: if i % 2 == 0 { "A" } else { "B" }.into(),
                    turn: i as u32 + 1,
                    tokens: (0..n).map(|k| format!("w{k}")).collect(),
                })
                .collect(),
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["w0", "w1", "w2", "w3"], 1)
    }

    #[test]
    fn vocab_falls_back_to_characters() {
        let v = Vocab::build(["ab", "ab", "c"], 2);
        assert_eq!(v.word_pieces("ab").len(), 1);
        let pieces = v.word_pieces("cab");
        assert_eq!(pieces.len(), 3);
        assert!(pieces.iter().all(|&p| p != UNK));
        assert_eq!(v.word_pieces("z"), vec![UNK]);
    }

    #[test]
    fn two_utterances_serialize_fully() {
        let d = dialogue(&[2, 3]);
        let frame = Frame {
            predicate: Span::new(1, 1, 1),
            arguments: vec![],
        };
        let ctx = tokenize_context(&d, &frame, &vocab(), 64).unwrap();
        // [CLS] w0 w1 [SEP] w0 w1 w2 [SEP]
        assert_eq!(ctx.ids.len(), 8);
        assert_eq!(ctx.ids[0], CLS);
        assert_eq!(ctx.ids[3], SEP);
        assert_eq!(ctx.word_starts, vec![1, 2, 4, 5, 6]);
        assert_eq!(ctx.segments(), vec![(0, 2), (2, 5)]);
        assert_eq!(ctx.speakers, vec![0, 0, 1, 1, 1]);
        assert_eq!(ctx.turns, vec![0, 0, 1, 1, 1]);
        assert_eq!(ctx.predicate, vec![0, 0, 0, 1, 0]);
        assert_eq!(ctx.dropped, 0);
    }

    #[test]
    fn oldest_utterance_dropped_when_over_limit() {
        let d = dialogue(&[2, 3]);
        let frame = Frame {
            predicate: Span::new(1, 0, 0),
            arguments: vec![],
        };
        // full length 8, limit 7 drops utterance 0 (cost 3).
        let ctx = tokenize_context(&d, &frame, &vocab(), 7).unwrap();
        assert_eq!(ctx.dropped, 1);
        assert_eq!(ctx.ids.len(), 5);
        assert_eq!(ctx.utterances[0].source, 1);
        assert_eq!(ctx.word_index(0, 0), None);
        assert_eq!(ctx.word_index(1, 2), Some(2));

        let err = tokenize_context(&d, &frame, &vocab(), 4).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { .. }));
    }

    #[test]
    fn single_utterance_is_identity() {
        let d = dialogue(&[4]);
        let frame = Frame {
            predicate: Span::new(0, 0, 0),
            arguments: vec![],
        };
        let ctx = tokenize_context(&d, &frame, &vocab(), 64).unwrap();
        assert_eq!(ctx.word_count(), 4);
        assert_eq!(ctx.segments(), vec![(0, 4)]);
    }

    fn backbone(hidden: usize, layers: usize, pooling: SubwordPooling) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = BackboneConfig {
            vocab_size: vocab().len(),
            layers,
            hidden,
            heads: 2,
            ffn: 2 * hidden,
            max_len: 32,
            dropout: 0.1,
            pooling,
        };
        let b = Backbone::new(&mut store, cfg, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn encode_shape_and_determinism() {
        let d = dialogue(&[3, 4]);
        let frame = Frame {
            predicate: Span::new(1, 0, 0),
            arguments: vec![],
        };
        let ctx = tokenize_context(&d, &frame, &vocab(), 32).unwrap();
        for pooling in [SubwordPooling::First, SubwordPooling::Mean] {
            let (store, b) = backbone(32, 4, pooling);
            let run = || {
                let mut g = Graph::new(Mode::Eval);
                let e = b.encode(&mut g, &store, &ctx).unwrap();
                g.value(e).clone()
            };
            let a = run();
            assert_eq!(a.dim(), (7, 128));
            assert_eq!(a, run());
        }
    }

    #[test]
    fn four_layers_concatenate_everything() {
        let (store, b) = backbone(8, 4, SubwordPooling::First);
        let mut g = Graph::new(Mode::Eval);
        let ids = [CLS, 5, 6, SEP];
        let states = b.hidden_states(&mut g, &store, &ids).unwrap();
        let top = b.top_concat(&mut g, &states);
        let all = g.concat_cols(&states);
        assert_eq!(g.value(top), g.value(all));
    }

    #[test]
    fn too_few_layers_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            vocab_size: 10,
            layers: 3,
            hidden: 8,
            heads: 2,
            ffn: 16,
            max_len: 8,
            dropout: 0.0,
            pooling: SubwordPooling::First,
        };
        assert!(Backbone::new(&mut store, cfg, &mut rng).is_err());
    }

    #[test]
    fn long_sequence_rejected() {
        let (store, b) = backbone(8, 4, SubwordPooling::First);
        let mut g = Graph::new(Mode::Eval);
        let ids = vec![5; 33];
        assert!(matches!(
            b.hidden_states(&mut g, &store, &ids),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
