//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xcsrl::corpus::Dataset;
use xcsrl::evaluator::{gold_tuples, SemanticTuple};
use xcsrl::synthetic::toy_csrl;
use xcsrl::{CsrlModel, LabelInventory, ModelConfig, Span, TupleSet, Vocab};

/// A default-sized model over the vocabulary of `data`.
pub fn model_for(data: &Dataset, variant: xcsrl::Variant) -> CsrlModel {
    let words = data
        .samples
        .iter()
        .flat_map(|s| s.dialogue.utterances.iter().flat_map(|u| u.tokens.iter().map(String::as_str)));
    let vocab = Vocab::build(words, 1);
    let config = ModelConfig { variant, ..ModelConfig::default() };
    CsrlModel::new(config, vocab, LabelInventory::shared(), 7).expect("valid default config")
}

pub fn toy_data() -> Dataset {
    toy_csrl(16, 24, 3)
}

/// Gold/predicted tuple sets with roughly 70% of the gold recovered plus noise.
pub fn scored_frames(frames: usize, seed: u64) -> Vec<(TupleSet, TupleSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = toy_csrl(frames.div_ceil(2), frames, seed);
    data.frames()
        .map(|(_, f)| {
            let gold = gold_tuples(f);
            let mut pred: TupleSet = gold.iter().filter(|_| rng.gen_bool(0.7)).cloned().collect();
            if rng.gen_bool(0.3) {
                pred.insert(SemanticTuple {
                    predicate: f.predicate,
                    argument: Span::new(0, 0, 0),
                    role: "ARG-LOC".into(),
                });
            }
            (gold, pred)
        })
        .collect()
}
