use serde::Serialize;

use super::Dataset;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub predicates: usize,
    pub arguments: usize,
    pub cross_arguments: usize,
    pub tokens_per_utterance: f64,
    /// Fraction of arguments outside their predicate's utterance.
    pub cross_ratio: f64,
}

pub fn compute_stats(dataset: &Dataset) -> DatasetStats {
    let mut st = DatasetStats::default();
    let mut tokens = 0usize;
    for sample in &dataset.samples {
        st.dialogues += 1;
        st.utterances += sample.dialogue.utterances.len();
        tokens += sample.dialogue.token_count();
        for frame in &sample.frames {
            st.predicates += 1;
            for arg in &frame.arguments {
                st.arguments += 1;
                if arg.span.utt != frame.predicate.utt {
                    st.cross_arguments += 1;
                }
            }
        }
    }
    if st.utterances > 0 {
        st.tokens_per_utterance = tokens as f64 / st.utterances as f64;
    }
    if st.arguments > 0 {
        st.cross_ratio = st.cross_arguments as f64 / st.arguments as f64;
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Argument, Dialogue, Frame, Sample, Span, Utterance};

    fn utt(turn: u32, n: usize) -> Utterance {
        Utterance {
            speaker: if turn % 2 == 1 { "A" } else { "B" }.into(),
            turn,
            tokens: vec!["w".into(); n],
        }
    }

    fn arg(utt: usize, role: &str) -> Argument {
        Argument {
            span: Span::new(utt, 0, 0),
            role: role.into(),
        }
    }

    /// 2 dialogues, 5 utterances, 3 predicates, 4 arguments, 1 cross-turn.
    fn toy() -> Dataset {
        let d1 = Sample {
            dialogue: Dialogue {
                id: "1".into(),
                language: "en".into(),
                utterances: vec![utt(1, 3), utt(2, 4)],
            },
            frames: vec![
                Frame { predicate: Span::new(1, 2, 2), arguments: vec![arg(0, "ARG1"), arg(1, "ARG0")] },
                Frame { predicate: Span::new(0, 2, 2), arguments: vec![arg(0, "ARG0")] },
            ],
        };
        let d2 = Sample {
            dialogue: Dialogue {
                id: "2".into(),
                language: "en".into(),
                utterances: vec![utt(1, 2), utt(2, 2), utt(3, 4)],
            },
            frames: vec![Frame { predicate: Span::new(2, 1, 1), arguments: vec![arg(2, "ARG1")] }],
        };
        Dataset { samples: vec![d1, d2] }
    }

    #[test]
    fn toy_counts() {
        let st = compute_stats(&toy());
        assert_eq!(st.dialogues, 2);
        assert_eq!(st.utterances, 5);
        assert_eq!(st.predicates, 3);
        assert_eq!(st.arguments, 4);
        assert_eq!(st.cross_ratio, 0.25);
        assert!((st.tokens_per_utterance - 15.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(compute_stats(&Dataset::default()), DatasetStats::default());
    }

    #[test]
    fn permutation_invariant() {
        let mut ds = toy();
        let a = compute_stats(&ds);
        ds.samples.reverse();
        assert_eq!(a, compute_stats(&ds));
    }
}
