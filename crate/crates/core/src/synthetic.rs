//! Small generated corpora for smoke runs, tests and benchmarks.
//!
//! Dialogues follow a few fixed templates between two speakers, so a model
//! can memorize them; each carries arguments both inside and across turns.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Argument, Dataset, Dialogue, Frame, ParallelPair, Sample, Span, Utterance};

const NAMES: [&str; 8] = ["anna", "bo", "carl", "dina", "emil", "fay", "gus", "hana"];
const PLACES: [&str; 6] = ["paris", "the park", "the lake", "school", "the market", "berlin"];
const TIMES: [&str; 5] = ["yesterday", "today", "last week", "on monday", "this morning"];
const OBJECTS: [&str; 7] = ["a book", "the bike", "some tea", "a kite", "the car", "a hat", "bread"];
const VERBS: [&str; 5] = ["bought", "found", "sold", "lost", "painted"];

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

struct Builder {
    utterances: Vec<Utterance>,
}

impl Builder {
    /// Appends an utterance made of `parts`; returns each part's token span.
    fn say(&mut self, speaker: &str, parts: &[&str]) -> Vec<(usize, usize)> {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for p in parts {
            let w = words(p);
            spans.push((tokens.len(), tokens.len() + w.len() - 1));
            tokens.extend(w);
        }
        self.utterances.push(Utterance {
            speaker: speaker.into(),
            turn: self.utterances.len() as u32 + 1,
            tokens,
        });
        spans
    }

    fn last(&self) -> usize {
        self.utterances.len() - 1
    }
}

fn span(utt: usize, s: (usize, usize)) -> Span {
    Span::new(utt, s.0, s.1)
}

fn arg(utt: usize, s: (usize, usize), role: &str) -> Argument {
    Argument { span: span(utt, s), role: role.into() }
}

/// One templated dialogue with one or two frames.
pub fn toy_dialogue(id: usize, two_frames: bool, rng: &mut ChaCha8Rng) -> Sample {
    let name = *NAMES.choose(rng).unwrap();
    let place = *PLACES.choose(rng).unwrap();
    let time = *TIMES.choose(rng).unwrap();
    let object = *OBJECTS.choose(rng).unwrap();
    let verb = *VERBS.choose(rng).unwrap();
    let mut b = Builder { utterances: Vec::new() };
    let mut frames = Vec::new();
    match id % 3 {
        0 => {
            let s0 = b.say("A", &[name, "went to", place, time, "."]);
            let u0 = b.last();
            b.say("B", &["what did", "he", "do there ?"]);
            let s2 = b.say("A", &[verb, object, "."]);
            let u2 = b.last();
            frames.push(Frame {
                predicate: span(u2, s2[0]),
                arguments: vec![arg(u0, s0[0], "ARG0"), arg(u2, s2[1], "ARG1"), arg(u0, s0[2], "ARG-LOC")],
            });
            if two_frames {
                frames.push(Frame {
                    predicate: Span::new(u0, s0[1].0, s0[1].0),
                    arguments: vec![arg(u0, s0[0], "ARG0"), arg(u0, s0[2], "ARG-LOC"), arg(u0, s0[3], "ARG-TMP")],
                });
            }
        }
        1 => {
            let s0 = b.say("A", &["did", name, verb, object, "?"]);
            let u0 = b.last();
            let s1 = b.say("B", &["yes ,", time, "at", place, "."]);
            let u1 = b.last();
            frames.push(Frame {
                predicate: span(u0, s0[2]),
                arguments: vec![arg(u0, s0[1], "ARG0"), arg(u0, s0[3], "ARG1")],
            });
            if two_frames {
                // a follow-up predicate whose agent and patient sit two turns back
                let s2 = b.say("A", &["why", verb, "it ?"]);
                let u2 = b.last();
                frames.push(Frame {
                    predicate: span(u2, s2[1]),
                    arguments: vec![arg(u0, s0[1], "ARG0"), arg(u0, s0[3], "ARG1"), arg(u1, s1[1], "ARG-TMP")],
                });
            }
        }
        _ => {
            b.say("A", &["i saw", name, "at", place, "."]);
            let s1 = b.say("B", &["really ?", "what did", "they", verb, "?"]);
            let u1 = b.last();
            let s2 = b.say("A", &[object, "for the trip ."]);
            let u2 = b.last();
            frames.push(Frame {
                predicate: span(u1, s1[3]),
                arguments: vec![arg(u1, s1[2], "ARG0")],
            });
            if two_frames {
                let s3 = b.say("B", &["then", name, verb, "it", time, "."]);
                let u3 = b.last();
                frames.push(Frame {
                    predicate: span(u3, s3[2]),
                    arguments: vec![
                        arg(u3, s3[1], "ARG0"),
                        arg(u2, s2[0], "ARG1"),
                        arg(u3, s3[4], "ARG-TMP"),
                    ],
                });
            }
        }
    }
    Sample {
        dialogue: Dialogue {
            id: format!("toy-{id}"),
            language: "en".into(),
            utterances: b.utterances,
        },
        frames,
    }
}

/// `dialogues` dialogues carrying `frames` frames in total
/// (`dialogues ≤ frames ≤ 2·dialogues`).
pub fn toy_csrl(dialogues: usize, frames: usize, seed: u64) -> Dataset {
    assert!(dialogues <= frames && frames <= 2 * dialogues);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doubles = frames - dialogues;
    Dataset {
        samples: (0..dialogues).map(|i| toy_dialogue(i, i < doubles, &mut rng)).collect(),
    }
}

/// Parallel pairs between a toy language and its word-by-word "translation"
/// (each word reversed and suffixed), with shared names.
pub fn toy_parallel(n: usize, seed: u64) -> Vec<ParallelPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let name = *NAMES.choose(&mut rng).unwrap();
            let verb = *VERBS.choose(&mut rng).unwrap();
            let object = *OBJECTS.choose(&mut rng).unwrap();
            let extra = if rng.gen_bool(0.5) { *TIMES.choose(&mut rng).unwrap() } else { "" };
            let source = format!("{name} {verb} {object} {extra}");
            let target: Vec<String> = source
                .split_whitespace()
                .map(|w| {
                    if NAMES.contains(&w) {
                        w.to_string()
                    } else {
                        format!("{}x", w.chars().rev().collect::<String>())
                    }
                })
                .collect();
            ParallelPair {
                source: source.split_whitespace().collect::<Vec<_>>().join(" "),
                target: target.join(" "),
            }
        })
        .collect()
}

/// Single-sentence SRL samples with a predicate and shared-role arguments.
pub fn toy_srl(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let name = *NAMES.choose(&mut rng).unwrap();
            let verb = *VERBS.choose(&mut rng).unwrap();
            let object = *OBJECTS.choose(&mut rng).unwrap();
            let time = *TIMES.choose(&mut rng).unwrap();
            let mut b = Builder { utterances: Vec::new() };
            let s = if rng.gen_bool(0.5) {
                b.say("S", &[name, verb, object, time, "."])
            } else {
                let s = b.say("S", &[time, name, verb, object, "."]);
                vec![s[1], s[2], s[3], s[0]]
            };
            Sample {
                dialogue: Dialogue {
                    id: format!("srl-{i}"),
                    language: "en".into(),
                    utterances: b.utterances,
                },
                frames: vec![Frame {
                    predicate: span(0, s[1]),
                    arguments: vec![arg(0, s[0], "ARG0"), arg(0, s[2], "ARG1"), arg(0, s[3], "ARG-TMP")],
                }],
            }
        })
        .collect()
}

/// Multi-party and two-party dialogues without frames, for SPI/UOR.
pub fn toy_dialogues(n: usize, seed: u64) -> Vec<Dialogue> {
    let data = toy_csrl(n, n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    data.samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut d = s.dialogue;
            let extra = *NAMES.choose(&mut rng).unwrap();
            d.utterances.push(Utterance {
                speaker: if i % 2 == 0 { "C".into() } else { d.utterances[d.utterances.len() % 2].speaker.clone() },
                turn: d.utterances.len() as u32 + 1,
                tokens: words(&format!("ok , say hi to {extra} ! bye .")),
            });
            d
        })
        .collect()
}
