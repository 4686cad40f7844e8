//! Tuple extraction and micro-averaged precision / recall / F1.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::UtteranceSlot;
use crate::corpus::{bio_decode_segmented, Frame, LabelInventory, Span, Tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TupleKind {
    Cross,
    Intra,
}

/// `(predicate, argument, role)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticTuple {
    pub predicate: Span,
    pub argument: Span,
    pub role: String,
}

impl SemanticTuple {
    pub fn kind(&self) -> TupleKind {
        if self.argument.utt == self.predicate.utt {
            TupleKind::Intra
        } else {
            TupleKind::Cross
        }
    }
}

pub type TupleSet = BTreeSet<SemanticTuple>;

/// Decodes tag ids over a serialized context back to dialogue coordinates.
/// Spans never cross utterance boundaries.
pub fn extract_tuples(tags: &[usize], predicate: Span, utterances: &[UtteranceSlot], labels: &LabelInventory) -> TupleSet {
    let tags: Vec<Tag> = tags.iter().map(|&t| Tag::from_id(t)).collect();
    let segments: Vec<(usize, usize)> = utterances.iter().map(|u| u.words).collect();
    let roles = labels.roles();
    bio_decode_segmented(&tags, &segments)
        .into_iter()
        .filter(|s| s.role < roles.len())
        .filter_map(|s| {
            let slot = utterances.iter().find(|u| u.words.0 <= s.start && s.end < u.words.1)?;
            Some(SemanticTuple {
                predicate,
                argument: Span::new(slot.source, s.start - slot.words.0, s.end - slot.words.0),
                role: roles[s.role].clone(),
            })
        })
        .collect()
}

pub fn gold_tuples(frame: &Frame) -> TupleSet {
    frame
        .arguments
        .iter()
        .map(|a| SemanticTuple {
            predicate: frame.predicate,
            argument: a.span,
            role: a.role.clone(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No gold and no predicted tuples.
    pub empty: bool,
}

impl Bucket {
    fn from_counts(gold: usize, predicted: usize, matched: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { matched as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { matched as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Bucket {
            gold,
            predicted,
            matched,
            precision,
            recall,
            f1,
            empty: gold == 0 && predicted == 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub all: Bucket,
    pub cross: Bucket,
    pub intra: Bucket,
}

/// Raw counts, accumulated frame by frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    gold: [usize; 2],
    predicted: [usize; 2],
    matched: [usize; 2],
}

fn slot(kind: TupleKind) -> usize {
    match kind {
        TupleKind::Cross => 0,
        TupleKind::Intra => 1,
    }
}

impl Counts {
    /// Adds one frame's gold and predicted tuples.
    pub fn add(&mut self, gold: &TupleSet, predicted: &TupleSet) {
        for t in gold {
            self.gold[slot(t.kind())] += 1;
        }
        for t in predicted {
            let k = slot(t.kind());
            self.predicted[k] += 1;
            if gold.contains(t) {
                self.matched[k] += 1;
            }
        }
    }

    pub fn report(&self) -> ScoreReport {
        let sum = |a: [usize; 2]| a[0] + a[1];
        ScoreReport {
            all: Bucket::from_counts(sum(self.gold), sum(self.predicted), sum(self.matched)),
            cross: Bucket::from_counts(self.gold[0], self.predicted[0], self.matched[0]),
            intra: Bucket::from_counts(self.gold[1], self.predicted[1], self.matched[1]),
        }
    }
}

/// Micro-averaged scores over frames given as `(gold, predicted)` pairs.
pub fn score<'a>(frames: impl IntoIterator<Item = (&'a TupleSet, &'a TupleSet)>) -> ScoreReport {
    let mut c = Counts::default();
    for (g, p) in frames {
        c.add(g, p);
    }
    c.report()
}

impl ScoreReport {
    pub fn to_json(&self) -> serde_json::Value {
        let bucket = |b: &Bucket| {
            serde_json::json!({
                "precision": b.precision,
                "recall": b.recall,
                "f1": b.f1,
                "gold": b.gold,
                "predicted": b.predicted,
                "matched": b.matched,
                "empty": b.empty,
            })
        };
        serde_json::json!({
            "f1_all": self.all.f1,
            "f1_cross": self.cross.f1,
            "f1_intra": self.intra.f1,
            "all": bucket(&self.all),
            "cross": bucket(&self.cross),
            "intra": bucket(&self.intra),
        })
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>9} {:>9} {:>9} {:>7} {:>9} {:>7}",
            "bucket", "precision", "recall", "f1", "gold", "predicted", "matched"
        )?;
        for (name, b) in [("all", &self.all), ("cross", &self.cross), ("intra", &self.intra)] {
            write!(
                f,
                "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>9} {:>7}",
                name, b.precision, b.recall, b.f1, b.gold, b.predicted, b.matched
            )?;
            if b.empty {
                write!(f, "  (empty)")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Argument, LabelInventory};

    fn tuple(pu: usize, au: usize, start: usize, role: &str) -> SemanticTuple {
        SemanticTuple {
            predicate: Span::new(pu, 0, 0),
            argument: Span::new(au, start, start),
            role: role.into(),
        }
    }

    fn set(items: &[SemanticTuple]) -> TupleSet {
        items.iter().cloned().collect()
    }

    #[test]
    fn perfect_prediction() {
        let g = set(&[tuple(1, 1, 2, "ARG0"), tuple(1, 1, 3, "ARG1")]);
        let r = score([(&g, &g)]);
        assert_eq!(r.all.f1, 1.0);
        assert_eq!(r.intra.f1, 1.0);
        assert_eq!(r.cross.f1, 0.0);
        assert!(r.cross.empty);
    }

    #[test]
    fn half_right() {
        let a = tuple(0, 0, 1, "ARG0");
        let g = set(&[a.clone(), tuple(0, 0, 2, "ARG1")]);
        let p = set(&[a, tuple(0, 0, 3, "ARG1")]);
        let r = score([(&g, &p)]);
        assert_eq!((r.all.precision, r.all.recall, r.all.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.intra.f1, 0.5);
    }

    #[test]
    fn missing_cross_tuple() {
        let intra = tuple(2, 2, 0, "ARG1");
        let g = set(&[tuple(2, 0, 0, "ARG0"), intra.clone()]);
        let p = set(&[intra]);
        let r = score([(&g, &p)]);
        assert_eq!(r.intra.f1, 1.0);
        assert_eq!(r.cross.f1, 0.0);
        assert!((r.all.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.all.matched, r.cross.matched + r.intra.matched);
    }

    #[test]
    fn extraction_maps_back_to_utterances() {
        let labels = LabelInventory::shared();
        let slots = vec![
            UtteranceSlot { source: 1, words: (0, 3) },
            UtteranceSlot { source: 2, words: (3, 5) },
        ];
        let pred = Span::new(2, 1, 1);
        assert!(extract_tuples(&[0; 5], pred, &slots, &labels).is_empty());
        // B-ARG0 at word 1, then an orphan I-ARG1 opening the last utterance
        let tags = [0, 1, 0, 4, 0];
        let out: Vec<SemanticTuple> = extract_tuples(&tags, pred, &slots, &labels).into_iter().collect();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].argument, Span::new(1, 1, 1));
        assert_eq!(out[0].kind(), TupleKind::Cross);
        assert_eq!(out[1].argument, Span::new(2, 0, 0));
        assert_eq!(out[1].role, "ARG1");
        assert_eq!(out[1].kind(), TupleKind::Intra);
    }

    #[test]
    fn gold_from_frame() {
        let f = Frame {
            predicate: Span::new(1, 0, 0),
            arguments: vec![Argument { span: Span::new(0, 1, 2), role: "ARG0".into() }],
        };
        let g = gold_tuples(&f);
        assert_eq!(g.len(), 1);
        assert_eq!(g.iter().next().unwrap().kind(), TupleKind::Cross);
    }

    #[test]
    fn report_formats() {
        let g = set(&[tuple(0, 0, 1, "ARG0")]);
        let r = score([(&g, &g)]);
        let j = r.to_json();
        assert_eq!(j["f1_all"], 1.0);
        assert_eq!(j["all"]["matched"], 1);
        let text = r.to_string();
        assert!(text.contains("cross") && text.contains("(empty)"));
    }
}
