//! Example builders and losses for the five pre-training objectives.
//!
//! Builders are pure functions of their input and the caller's RNG, so a
//! seeded RNG reproduces the exact example stream.

use std::io::Write;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pair_ids, speaker_ids, Vocab, MASK};
use crate::corpus::{bio_encode, Dialogue, LabelInventory, ParallelPair, Sample, Span};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Mode, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Tlm,
    Hpsi,
    Spi,
    Uor,
    Sai,
    Csrl,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Tlm => "tlm",
            Objective::Hpsi => "hpsi",
            Objective::Spi => "spi",
            Objective::Uor => "uor",
            Objective::Sai => "sai",
            Objective::Csrl => "csrl",
        }
    }
}

// ---------------------------------------------------------------------------
// TLM

/// Fraction of selected tokens replaced by `[MASK]`, by a random token, or
/// left unchanged.
pub const MASK_SPLIT: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlmExample {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

impl TlmExample {
    /// Per-position target ids, defined only at corrupted positions.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.ids.len()];
        for (&p, &o) in self.positions.iter().zip(&self.originals) {
            t[p] = Some(o);
        }
        t
    }
}

/// Concatenates a sentence pair and corrupts each non-special token
/// independently with probability `mask_rate`.
pub fn tlm_corrupt(vocab: &Vocab, pair: &ParallelPair, mask_rate: f64, rng: &mut ChaCha8Rng) -> TlmExample {
    let ids = pair_ids(vocab, &pair.source_tokens(), &pair.target_tokens());
    corrupt_ids(ids, vocab.special_count(), vocab.len(), mask_rate, rng)
}

pub fn corrupt_ids(
    mut ids: Vec<usize>,
    special_count: usize,
    vocab_size: usize,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> TlmExample {
    let mut positions = Vec::new();
    let mut originals = Vec::new();
    for (i, id) in ids.iter_mut().enumerate() {
        if *id < special_count || rng.gen::<f64>() >= mask_rate {
            continue;
        }
        positions.push(i);
        originals.push(*id);
        let r: f64 = rng.gen();
        if r < MASK_SPLIT.0 {
            *id = MASK;
        } else if r < MASK_SPLIT.0 + MASK_SPLIT.1 && vocab_size > special_count {
            *id = rng.gen_range(special_count..vocab_size);
        }
    }
    TlmExample { ids, positions, originals }
}

// ---------------------------------------------------------------------------
// HPSI

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    Ngram,
    Perturb,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HpsiExample {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub parallel: bool,
    pub negative: NegativeSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramCandidate {
    pub n: usize,
    pub index: usize,
    pub score: f64,
}

fn ngram_set(tokens: &[String], n: usize) -> std::collections::HashSet<&[String]> {
    if tokens.len() < n {
        return Default::default();
    }
    tokens.windows(n).collect()
}

/// For each `n` in 1..=4, the corpus sentence sharing the largest fraction of
/// the query's distinct n-grams. Sentences equal to the query are skipped,
/// zero scores are not candidates, and ties go to the lowest index.
pub fn ngram_hard_negatives(corpus: &[Vec<String>], query: usize) -> Result<Vec<NgramCandidate>> {
    if corpus.len() < 2 {
        return Err(Error::CorpusTooSmall(format!("{} sentence(s)", corpus.len())));
    }
    let q = &corpus[query];
    let mut out = Vec::new();
    for n in 1..=4 {
        let qset = ngram_set(q, n);
        if qset.is_empty() {
            continue;
        }
        let mut best: Option<NgramCandidate> = None;
        for (i, cand) in corpus.iter().enumerate() {
            if i == query || cand == q {
                continue;
            }
            let cset = ngram_set(cand, n);
            let shared = qset.iter().filter(|g| cset.contains(*g)).count();
            let score = shared as f64 / qset.len() as f64;
            if score > 0.0 && best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(NgramCandidate { n, index: i, score });
            }
        }
        out.extend(best);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    Delete,
    Replace,
    Permute,
}

/// Applies one of deletion, replacement or permutation, chosen uniformly.
/// Degenerate cases fall back so the output differs from the input whenever
/// the sentence has at least two tokens.
pub fn perturb(sentence: &[String], pool: &[String], rng: &mut ChaCha8Rng) -> (Vec<String>, Perturbation) {
    let op = *[Perturbation::Delete, Perturbation::Replace, Perturbation::Permute]
        .choose(rng)
        .expect("non-empty");
    perturb_with(sentence, pool, op, rng)
}

pub fn perturb_with(
    sentence: &[String],
    pool: &[String],
    op: Perturbation,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Perturbation) {
    let n = sentence.len();
    let distinct = |s: &[String]| s.windows(2).any(|w| w[0] != w[1]);
    let op = match op {
        Perturbation::Delete | Perturbation::Permute if n < 2 => Perturbation::Replace,
        Perturbation::Permute if !distinct(sentence) => Perturbation::Delete,
        op => op,
    };
    match op {
        Perturbation::Delete => {
            let mut out = sentence.to_vec();
            out.remove(rng.gen_range(0..n));
            (out, op)
        }
        Perturbation::Permute => {
            let mut out = sentence.to_vec();
            while out == sentence {
                out.shuffle(rng);
            }
            (out, op)
        }
        Perturbation::Replace => {
            let mut out = sentence.to_vec();
            let at = rng.gen_range(0..n);
            let choices: Vec<&String> = pool.iter().filter(|w| **w != sentence[at]).collect();
            match choices.choose(rng) {
                Some(w) => {
                    out[at] = (*w).clone();
                    (out, op)
                }
                None if n >= 2 => perturb_with(sentence, pool, Perturbation::Delete, rng),
                None => {
                    out[at] = "[UNK]".to_string();
                    (out, op)
                }
            }
        }
    }
}

/// Probability of drawing a parallel pair.
pub const PARALLEL_PROB: f64 = 0.5;
/// Among negatives, probability of using an n-gram candidate.
pub const NGRAM_PROB: f64 = 0.4;

/// Draws HPSI examples from a pair corpus. Negative mates replace the target
/// side and are searched among other target-side sentences.
#[derive(Clone, Debug)]
pub struct HpsiSampler {
    sources: Vec<Vec<String>>,
    targets: Vec<Vec<String>>,
    candidates: Vec<Vec<NgramCandidate>>,
    pool: Vec<String>,
}

impl HpsiSampler {
    pub fn new(pairs: &[ParallelPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::CorpusTooSmall("no sentence pairs".into()));
        }
        let sources: Vec<Vec<String>> = pairs.iter().map(ParallelPair::source_tokens).collect();
        let targets: Vec<Vec<String>> = pairs.iter().map(ParallelPair::target_tokens).collect();
        let candidates = (0..targets.len())
            .map(|i| ngram_hard_negatives(&targets, i).unwrap_or_default())
            .collect();
        let mut pool: Vec<String> = targets.iter().flatten().cloned().collect();
        pool.sort();
        pool.dedup();
        Ok(HpsiSampler {
            sources,
            targets,
            candidates,
            pool,
        })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> HpsiExample {
        let i = rng.gen_range(0..self.sources.len());
        let source = self.sources[i].clone();
        if rng.gen::<f64>() < PARALLEL_PROB {
            return HpsiExample {
                source,
                target: self.targets[i].clone(),
                parallel: true,
                negative: NegativeSource::None,
            };
        }
        if rng.gen::<f64>() < NGRAM_PROB {
            if let Some(c) = self.candidates[i].choose(rng) {
                return HpsiExample {
                    source,
                    target: self.targets[c.index].clone(),
                    parallel: false,
                    negative: NegativeSource::Ngram,
                };
            }
            debug!("no n-gram candidate for pair {i}; using perturbation");
        }
        let (target, _) = perturb(&self.targets[i], &self.pool, rng);
        HpsiExample {
            source,
            target,
            parallel: false,
            negative: NegativeSource::Perturb,
        }
    }
}

pub fn hpsi_sample(sampler: &HpsiSampler, rng: &mut ChaCha8Rng) -> HpsiExample {
    sampler.sample(rng)
}

// ---------------------------------------------------------------------------
// SPI

const CLAUSE_END: [&str; 6] = [".", "?", "!", "。", "？", "！"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpiExample {
    /// Speaker id per word of the flattened dialogue, with masked units
    /// replaced by the mask id.
    pub speakers: Vec<usize>,
    pub units: Vec<Span>,
    pub masked: Vec<usize>,
    /// Gold speaker id of each masked unit.
    pub gold: Vec<usize>,
    /// Speaker ids present in the dialogue.
    pub present: Vec<usize>,
}

/// True when exactly two speakers take strictly alternating turns.
pub fn alternating_pair(dialogue: &Dialogue) -> bool {
    let ids = speaker_ids(dialogue);
    ids.iter().copied().max() == Some(1) && ids.windows(2).all(|w| w[0] != w[1])
}

/// Masking units: clauses for alternating two-party dialogues, else utterances.
pub fn spi_units(dialogue: &Dialogue) -> Vec<Span> {
    let clauses = alternating_pair(dialogue);
    let mut units = Vec::new();
    for (u, utt) in dialogue.utterances.iter().enumerate() {
        if !clauses {
            units.push(Span::new(u, 0, utt.tokens.len() - 1));
            continue;
        }
        let mut start = 0;
        for (i, tok) in utt.tokens.iter().enumerate() {
            if CLAUSE_END.contains(&tok.as_str()) {
                units.push(Span::new(u, start, i));
                start = i + 1;
            }
        }
        if start < utt.tokens.len() {
            units.push(Span::new(u, start, utt.tokens.len() - 1));
        }
    }
    units
}

/// `⌈pct% · n⌉`, tolerant of float noise in the product.
pub fn percent_count(pct: f64, n: usize) -> usize {
    let raw = pct * n as f64 / 100.0;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_percent(name: &str, pct: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!("{name} = {pct} is outside [0, 100]")));
    }
    Ok(())
}

pub fn spi_corrupt(dialogue: &Dialogue, k1: f64, mask_id: usize, rng: &mut ChaCha8Rng) -> Result<SpiExample> {
    check_percent("K1", k1)?;
    let by_utt = speaker_ids(dialogue);
    let offsets = dialogue.offsets();
    let mut speakers: Vec<usize> = dialogue
        .utterances
        .iter()
        .zip(&by_utt)
        .flat_map(|(u, &s)| std::iter::repeat_n(s, u.tokens.len()))
        .collect();
    let units = spi_units(dialogue);
    let k = percent_count(k1, units.len());
    let mut masked: Vec<usize> = rand::seq::index::sample(rng, units.len(), k).into_vec();
    masked.sort_unstable();
    let gold = masked.iter().map(|&m| by_utt[units[m].utt]).collect();
    for &m in &masked {
        let u = units[m];
        speakers[offsets[u.utt] + u.start..=offsets[u.utt] + u.end].fill(mask_id);
    }
    let mut present = by_utt.clone();
    present.sort_unstable();
    present.dedup();
    Ok(SpiExample {
        speakers,
        units,
        masked,
        gold,
        present,
    })
}

// ---------------------------------------------------------------------------
// UOR

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UorExample {
    pub dialogue: Dialogue,
    pub suffix_start: usize,
    /// Original index of the utterance now at `suffix_start + k`.
    pub origins: Vec<usize>,
}

impl UorExample {
    /// Target class (original position) per utterance; `None` in the prefix.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.suffix_start];
        t.extend(self.origins.iter().map(|&o| Some(o)));
        t
    }
}

/// Shuffles the last `⌈K2% · N⌉` utterances. Turn numbers stay with positions.
pub fn uor_shuffle(dialogue: &Dialogue, k2: f64, rng: &mut ChaCha8Rng) -> Result<UorExample> {
    check_percent("K2", k2)?;
    let n = dialogue.utterances.len();
    let k = percent_count(k2, n);
    let suffix_start = n - k;
    let mut origins: Vec<usize> = (suffix_start..n).collect();
    origins.shuffle(rng);
    let mut permuted = dialogue.clone();
    for (slot, &orig) in origins.iter().enumerate() {
        let pos = suffix_start + slot;
        let turn = dialogue.utterances[pos].turn;
        permuted.utterances[pos] = dialogue.utterances[orig].clone();
        permuted.utterances[pos].turn = turn;
    }
    Ok(UorExample {
        dialogue: permuted,
        suffix_start,
        origins,
    })
}

// ---------------------------------------------------------------------------
// SAI

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaiExample {
    pub tokens: Vec<String>,
    pub predicate: (usize, usize),
    /// Tag ids over the shared-role inventory.
    pub tags: Vec<usize>,
}

pub fn sai_build(sample: &Sample) -> Result<SaiExample> {
    let labels = LabelInventory::shared();
    let frame = sample
        .frames
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("SRL sample {} has no predicate", sample.dialogue.id)))?;
    let mut frame = frame.clone();
    frame.arguments.retain(|a| labels.role_index(&a.role).is_some());
    let tags = bio_encode(&frame, &sample.dialogue, &labels)?;
    Ok(SaiExample {
        tokens: sample.dialogue.utterances[0].tokens.clone(),
        predicate: (frame.predicate.start, frame.predicate.end),
        tags: tags.ids(),
    })
}

// ---------------------------------------------------------------------------
// Sampling balance

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    A,
    B,
}

/// Each slot comes from either pool with probability 1/2.
pub fn balanced_batch<'a, T>(
    pool_a: &'a [T],
    pool_b: &'a [T],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Pool, &'a T)>> {
    if pool_a.is_empty() {
        return Err(Error::EmptyPool("pool A"));
    }
    if pool_b.is_empty() {
        return Err(Error::EmptyPool("pool B"));
    }
    Ok((0..batch_size)
        .map(|_| {
            if rng.gen::<bool>() {
                (Pool::A, pool_a.choose(rng).expect("non-empty"))
            } else {
                (Pool::B, pool_b.choose(rng).expect("non-empty"))
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Losses

/// Mean cross-entropy on the graph; `allowed` restricts the candidate classes.
pub fn objective_loss_var(
    g: &mut Graph,
    objective: Objective,
    logits: Var,
    targets: &[Option<usize>],
    allowed: Option<&[bool]>,
) -> Result<Var> {
    g.cross_entropy(logits, targets, allowed)
        .ok_or(Error::NoTargets(objective.name()))
}

/// Plain-value version of [`objective_loss_var`].
pub fn objective_loss(
    objective: Objective,
    logits: &Mat,
    targets: &[Option<usize>],
    allowed: Option<&[bool]>,
) -> Result<f64> {
    let mut g = Graph::new(Mode::Eval);
    let l = g.constant(logits.clone());
    let loss = objective_loss_var(&mut g, objective, l, targets, allowed)?;
    Ok(g.scalar(loss))
}

/// Writes examples as JSON lines.
pub fn dump_jsonl<T: Serialize, W: Write>(mut out: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Argument, Frame, Utterance};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn dialogue(speakers: &[&str], lens: &[usize]) -> Dialogue {
        Dialogue {
            id: "d".into(),
            language: "en".into(),
            utterances: speakers
                .iter()
                .zip(lens)
                .enumerate()
                .map(|(i, (s, &n))| Utterance {
                    speaker: s.to_string(),
                    turn: i as u32 + 1,
                    tokens: (0..n).map(|k| format!("u{i}w{k}")).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn tlm_zero_rate_has_no_targets() {
        let vocab = Vocab::build(["a", "b", "x"], 1);
        let pair = ParallelPair { source: "a b".into(), target: "x".into() };
        let ex = tlm_corrupt(&vocab, &pair, 0.0, &mut rng(1));
        assert!(ex.positions.is_empty());
        assert!(ex.targets().iter().all(Option::is_none));
    }

    #[test]
    fn tlm_targets_only_at_selected_positions() {
        let vocab = Vocab::build(["a", "b", "c", "x", "y"], 1);
        let pair = ParallelPair { source: "a b c".into(), target: "x y".into() };
        let clean = pair_ids(&vocab, &pair.source_tokens(), &pair.target_tokens());
        let ex = tlm_corrupt(&vocab, &pair, 0.5, &mut rng(2));
        for (i, t) in ex.targets().iter().enumerate() {
            match t {
                Some(o) => assert_eq!(*o, clean[i]),
                None => assert_eq!(ex.ids[i], clean[i]),
            }
        }
        // specials are never selected
        for &p in &ex.positions {
            assert!(clean[p] >= vocab.special_count());
        }
    }

    #[test]
    fn ngram_example() {
        let corpus = vec![toks("a b c"), toks("a b d"), toks("x y z")];
        let c = ngram_hard_negatives(&corpus, 0).unwrap();
        assert_eq!(c[0].n, 1);
        assert_eq!(c[0].index, 1);
        assert!((c[0].score - 2.0 / 3.0).abs() < 1e-12);
        assert!(c.len() <= 4);
        assert!(c.iter().all(|x| x.index != 0));
        assert!(ngram_hard_negatives(&corpus[..1], 0).is_err());
    }

    #[test]
    fn ngram_never_returns_a_duplicate_of_itself() {
        let corpus = vec![toks("a b"), toks("a b"), toks("a c")];
        let c = ngram_hard_negatives(&corpus, 0).unwrap();
        assert!(c.iter().all(|x| x.index == 2));
    }

    #[test]
    fn perturb_cases() {
        let s = toks("a b c d e");
        let pool = toks("p q r");
        let (out, op) = perturb_with(&s, &pool, Perturbation::Delete, &mut rng(3));
        assert_eq!(op, Perturbation::Delete);
        assert_eq!(out.len(), 4);
        let (out, op) = perturb_with(&toks("a"), &pool, Perturbation::Permute, &mut rng(3));
        assert_eq!(op, Perturbation::Replace);
        assert_ne!(out, toks("a"));
        let (out, op) = perturb_with(&toks("a a"), &pool, Perturbation::Permute, &mut rng(3));
        assert_eq!(op, Perturbation::Delete);
        assert_ne!(out, toks("a a"));
        let mut r = rng(4);
        for _ in 0..200 {
            let (out, _) = perturb(&toks("a b"), &toks("a b"), &mut r);
            assert_ne!(out, toks("a b"));
        }
    }

    #[test]
    fn hpsi_is_reproducible() {
        let pairs: Vec<ParallelPair> = (0..6)
            .map(|i| ParallelPair { source: format!("s{i} a b"), target: format!("t{i} x y") })
            .collect();
        let sampler = HpsiSampler::new(&pairs).unwrap();
        let draw = |seed| {
            let mut r = rng(seed);
            (0..50).map(|_| sampler.sample(&mut r)).collect::<Vec<_>>()
        };
        let (a, b) = (draw(7), draw(7));
        assert_eq!(a, b);
        for ex in &a {
            assert_eq!(ex.parallel, ex.negative == NegativeSource::None);
        }
    }

    #[test]
    fn spi_counts() {
        let d = dialogue(&["A", "B", "C", "A", "B", "C", "A", "B", "C", "A"], &[2; 10]);
        assert!(!alternating_pair(&d));
        assert_eq!(spi_units(&d).len(), 10);
        let ex = spi_corrupt(&d, 30.0, 9, &mut rng(1)).unwrap();
        assert_eq!(ex.masked.len(), 3);
        assert_eq!(ex.speakers.iter().filter(|&&s| s == 9).count(), 6);
        assert_eq!(spi_corrupt(&d, 0.0, 9, &mut rng(1)).unwrap().masked.len(), 0);
        assert_eq!(spi_corrupt(&d, 100.0, 9, &mut rng(1)).unwrap().masked.len(), 10);
        assert!(spi_corrupt(&d, 101.0, 9, &mut rng(1)).is_err());
        assert!(spi_corrupt(&d, -1.0, 9, &mut rng(1)).is_err());
    }

    #[test]
    fn spi_splits_clauses_for_two_alternating_speakers() {
        let mut d = dialogue(&["A", "B"], &[1, 1]);
        d.utterances[0].tokens = toks("hi . how are you ?");
        d.utterances[1].tokens = toks("fine thanks . you");
        assert!(alternating_pair(&d));
        let units = spi_units(&d);
        assert_eq!(
            units,
            vec![Span::new(0, 0, 1), Span::new(0, 2, 5), Span::new(1, 0, 2), Span::new(1, 3, 3)]
        );
        let ex = spi_corrupt(&d, 50.0, 7, &mut rng(3)).unwrap();
        assert_eq!(ex.masked.len(), 2);
        assert_eq!(ex.present, vec![0, 1]);
        for (m, gold) in ex.masked.iter().zip(&ex.gold) {
            assert_eq!(*gold, ex.units[*m].utt % 2);
        }
    }

    #[test]
    fn uor_prefix_and_bijection() {
        let d = dialogue(&["A", "B"].repeat(5), &[3; 10]);
        let ex = uor_shuffle(&d, 40.0, &mut rng(5)).unwrap();
        assert_eq!(ex.suffix_start, 6);
        assert_eq!(&ex.dialogue.utterances[..6], &d.utterances[..6]);
        let mut o = ex.origins.clone();
        o.sort_unstable();
        assert_eq!(o, vec![6, 7, 8, 9]);
        for (k, &orig) in ex.origins.iter().enumerate() {
            assert_eq!(ex.dialogue.utterances[6 + k].tokens, d.utterances[orig].tokens);
        }
        let id = uor_shuffle(&d, 0.0, &mut rng(5)).unwrap();
        assert_eq!(id.dialogue, d);
        assert!(id.origins.is_empty());
        assert!(uor_shuffle(&d, 140.0, &mut rng(5)).is_err());
    }

    #[test]
    fn sai_tags() {
        let d = dialogue(&["S"], &[7]);
        let sample = Sample {
            dialogue: d,
            frames: vec![Frame {
                predicate: Span::new(0, 3, 3),
                arguments: vec![
                    Argument { span: Span::new(0, 0, 1), role: "ARG0".into() },
                    Argument { span: Span::new(0, 5, 5), role: "ARG-TMP".into() },
                ],
            }],
        };
        let ex = sai_build(&sample).unwrap();
        let labels = LabelInventory::shared();
        let names: Vec<String> = ex.tags.iter().map(|&t| labels.tag_name(crate::corpus::Tag::from_id(t))).collect();
        assert_eq!(names, ["B-ARG0", "I-ARG0", "O", "O", "O", "B-ARG-TMP", "O"]);
        assert_eq!(labels.roles(), crate::corpus::SHARED_ROLES);
    }

    #[test]
    fn balanced_batch_errors_on_empty_pool() {
        let a = [1, 2];
        let empty: [i32; 0] = [];
        assert!(balanced_batch(&a, &empty, 4, &mut rng(1)).is_err());
        assert!(balanced_batch(&empty, &a, 4, &mut rng(1)).is_err());
        let x = balanced_batch(&a, &[3], 16, &mut rng(1)).unwrap();
        let y = balanced_batch(&a, &[3], 16, &mut rng(1)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn loss_examples() {
        let perfect = ndarray::array![[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]];
        let l = objective_loss(Objective::Sai, &perfect, &[Some(0), Some(2)], None).unwrap();
        assert!(l < 1e-12);
        let uniform = Mat::zeros((4, 5));
        let l = objective_loss(Objective::Tlm, &uniform, &[Some(1), None, Some(4), Some(0)], None).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let allowed = [true, false, true, false, false];
        let l = objective_loss(Objective::Uor, &uniform, &[Some(2), None, None, None], Some(&allowed)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            objective_loss(Objective::Spi, &uniform, &[None; 4], None),
            Err(Error::NoTargets("spi"))
        ));
    }

    #[test]
    fn dump_writes_lines() {
        let mut buf = Vec::new();
        let d = dialogue(&["A", "B", "A"], &[2, 2, 2]);
        let ex = uor_shuffle(&d, 50.0, &mut rng(1)).unwrap();
        dump_jsonl(&mut buf, [&ex, &ex]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: UorExample = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, ex);
    }
}
