//! Structure-aware conversation encoder.
//!
//! Word level: `s^0 = e ⊕ t ⊕ r`, then every layer appends its own output,
//! `s^j = s^{j-1} ⊕ layer_j(s^{j-1})`. Utterance level: max-pool each
//! utterance, run a bidirectional LSTM stack over utterances. Fusion:
//! `g = swish(W [s^{N1} ⊕ u'_utt] + b)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenizedContext;
use crate::error::{Error, Result};
use crate::graph::{Block, Graph, Mat, ParamId, ParamStore, Var};
use crate::mtrans::{LayerShape, MTransLayer, Variant};
use crate::nn::{Embedding, Linear};

pub use crate::graph::swish;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScConfig {
    /// Model width `d`.
    pub model: usize,
    /// Word-level layers `N1`.
    pub word_layers: usize,
    pub utterance_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub turn_width: usize,
    pub speaker_width: usize,
    pub max_speakers: usize,
    pub max_turns: usize,
}

impl ScConfig {
    /// `width(s^{N1}) = input + d_t + d_r + N1·d`
    pub fn word_width(&self, input: usize) -> usize {
        input + self.turn_width + self.speaker_width + self.word_layers * self.model
    }

    /// Reserved speaker id used by speaker masking.
    pub fn speaker_mask_id(&self) -> usize {
        self.max_speakers
    }
}

/// Speaker, turn and predicate lookup tables.
#[derive(Clone, Debug)]
pub struct IndicatorEmbeddings {
    pub speaker: Embedding,
    pub turn: Embedding,
    pub predicate: Embedding,
}

impl IndicatorEmbeddings {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ScConfig,
        predicate_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        IndicatorEmbeddings {
            speaker: Embedding::new(store, "sc.speaker", Block::Sc, cfg.max_speakers + 1, cfg.speaker_width, rng),
            turn: Embedding::new(store, "sc.turn", Block::Sc, cfg.max_turns, cfg.turn_width, rng),
            predicate: Embedding::new(store, "pa.predicate", Block::Pa, 2, predicate_width, rng),
        }
    }

    /// Speaker rows; ids past the table (other than the mask id) share the last
    /// real speaker row.
    pub fn speakers(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let mask = self.speaker.rows - 1;
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i == mask { i } else { i.min(mask - 1) })
            .collect();
        self.speaker.lookup(g, store, &ids)
    }

    pub fn turns(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let last = self.turn.rows - 1;
        let ids: Vec<usize> = ids.iter().map(|&i| i.min(last)).collect();
        self.turn.lookup(g, store, &ids)
    }

    pub fn predicates(&self, g: &mut Graph, store: &ParamStore, flags: &[usize]) -> Var {
        let ids: Vec<usize> = flags.iter().map(|&f| usize::from(f != 0)).collect();
        self.predicate.lookup(g, store, &ids)
    }
}

/// Running-concatenation stack: `x^j = x^{j-1} ⊕ layer_j(x^{j-1})`.
pub fn stack_encode(g: &mut Graph, store: &ParamStore, x0: Var, layers: &[MTransLayer]) -> Result<Var> {
    let mut x = x0;
    for layer in layers {
        let y = layer.forward(g, store, x)?;
        x = g.concat_cols(&[x, y]);
    }
    Ok(x)
}

/// Word-level encoder over `e ⊕ t ⊕ r`.
pub fn word_level_encode(
    g: &mut Graph,
    store: &ParamStore,
    e: Var,
    t: Var,
    r: Var,
    layers: &[MTransLayer],
) -> Result<Var> {
    if g.rows(t) != g.rows(e) || g.rows(r) != g.rows(e) {
        return Err(Error::WidthMismatch {
            context: "word-level indicators",
            expected: g.rows(e),
            actual: g.rows(t).min(g.rows(r)),
        });
    }
    let s0 = g.concat_cols(&[e, t, r]);
    stack_encode(g, store, s0, layers)
}

/// Element-wise max over the words of each utterance.
pub fn utterance_pool(g: &mut Graph, s: Var, segments: &[(usize, usize)]) -> Result<Var> {
    for (i, &(lo, hi)) in segments.iter().enumerate() {
        if lo >= hi || hi > g.rows(s) {
            return Err(Error::InvalidArgument(format!("utterance segment {i} [{lo}, {hi}) is empty or out of range")));
        }
    }
    Ok(g.segment_max(s, segments))
}

#[derive(Clone, Debug)]
struct LstmDirection {
    input: Linear,
    hidden: ParamId,
    width: usize,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, name: &str, input: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let input_map = Linear::new(store, &format!("{name}.input"), Block::Sc, input, 4 * width, rng);
        // forget-gate bias starts at 1
        let bias = store.value_mut(input_map.bias);
        for c in width..2 * width {
            bias[[0, c]] = 1.0;
        }
        let hidden = store.add(
            format!("{name}.hidden"),
            Block::Sc,
            crate::nn::glorot(width, 4 * width, rng),
        );
        LstmDirection {
            input: input_map,
            hidden,
            width,
        }
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Var {
        let n = g.rows(x);
        let d = self.width;
        let projected = self.input.forward(g, store, x);
        let w_h = g.param(store, self.hidden);
        let mut h = g.constant(Mat::zeros((1, d)));
        let mut c = g.constant(Mat::zeros((1, d)));
        let mut outputs = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = g.gather_rows(projected, &[t]);
            let hh = g.matmul(h, w_h);
            let gates = g.add(xt, hh);
            let i = g.slice_cols(gates, 0, d);
            let f = g.slice_cols(gates, d, 2 * d);
            let cand = g.slice_cols(gates, 2 * d, 3 * d);
            let o = g.slice_cols(gates, 3 * d, 4 * d);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            outputs[t] = h;
        }
        g.concat_rows(&outputs)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut ids = self.input.params();
        ids.push(self.hidden);
        ids
    }
}

/// Stacked bidirectional LSTM; final forward and backward states are
/// concatenated and projected to `d`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    layers: Vec<(LstmDirection, LstmDirection)>,
    combine: Linear,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, input: usize, width: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers.max(1))
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * width };
                (
                    LstmDirection::new(store, &format!("sc.lstm{l}.fwd"), inp, width, rng),
                    LstmDirection::new(store, &format!("sc.lstm{l}.bwd"), inp, width, rng),
                )
            })
            .collect();
        let combine = Linear::new(store, "sc.lstm.combine", Block::Sc, 2 * width, width, rng);
        BiLstm { layers, combine }
    }

    /// `u` is `N × input`; output is `N × d`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Var {
        let mut x = u;
        for (fwd, bwd) in &self.layers {
            let f = fwd.run(g, store, x, false);
            let b = bwd.run(g, store, x, true);
            x = g.concat_cols(&[f, b]);
        }
        self.combine.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (f, b) in &self.layers {
            ids.extend(f.params());
            ids.extend(b.params());
        }
        ids.extend(self.combine.params());
        ids
    }
}

/// `g_k^i = swish(W [s_k ⊕ u'_i] + b)`.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub linear: Linear,
    word_width: usize,
    model: usize,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, word_width: usize, model: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionLayer {
            linear: Linear::new(store, "sc.fusion", Block::Sc, word_width + model, model, rng),
            word_width,
            model,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s: Var,
        u_prime: Var,
        utterance_of_word: &[usize],
    ) -> Result<Var> {
        if g.cols(s) != self.word_width {
            return Err(Error::WidthMismatch {
                context: "fusion word input",
                expected: self.word_width,
                actual: g.cols(s),
            });
        }
        if g.cols(u_prime) != self.model {
            return Err(Error::WidthMismatch {
                context: "fusion utterance input",
                expected: self.model,
                actual: g.cols(u_prime),
            });
        }
        let spread = g.gather_rows(u_prime, utterance_of_word);
        let joined = g.concat_cols(&[s, spread]);
        let z = self.linear.forward(g, store, joined);
        Ok(g.swish(z))
    }
}

pub struct ScOutput {
    pub s: Var,
    pub u_prime: Var,
    pub g: Var,
}

#[derive(Clone, Debug)]
pub struct ScEncoder {
    pub config: ScConfig,
    pub input_width: usize,
    pub word_layers: Vec<MTransLayer>,
    pub lstm: BiLstm,
    pub fusion: FusionLayer,
}

impl ScEncoder {
    pub fn new(store: &mut ParamStore, config: ScConfig, input_width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut width = input_width + config.turn_width + config.speaker_width;
        let mut word_layers = Vec::with_capacity(config.word_layers);
        for j in 0..config.word_layers {
            let shape = LayerShape {
                variant: config.variant,
                input: width,
                model: config.model,
                heads: config.heads,
                ffn: config.ffn,
                dropout: config.dropout,
            };
            word_layers.push(MTransLayer::new(store, &format!("sc.word{j}"), Block::Sc, shape, rng)?);
            width += config.model;
        }
        debug_assert_eq!(width, config.word_width(input_width));
        let lstm = BiLstm::new(store, width, config.model, config.utterance_layers, rng);
        let fusion = FusionLayer::new(store, width, config.model, rng);
        Ok(ScEncoder {
            config,
            input_width,
            word_layers,
            lstm,
            fusion,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        indicators: &IndicatorEmbeddings,
        e: Var,
        ctx: &TokenizedContext,
        speakers: Option<&[usize]>,
    ) -> Result<ScOutput> {
        let t = indicators.turns(g, store, &ctx.turns);
        let r = indicators.speakers(g, store, speakers.unwrap_or(&ctx.speakers));
        let s = word_level_encode(g, store, e, t, r, &self.word_layers)?;
        let u = utterance_pool(g, s, &ctx.segments())?;
        let u_prime = self.lstm.forward(g, store, u);
        let gv = self.fusion.forward(g, store, s, u_prime, &ctx.utterance_of_word())?;
        Ok(ScOutput { s, u_prime, g: gv })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn config(n1: usize) -> ScConfig {
        ScConfig {
            model: 8,
            word_layers: n1,
            utterance_layers: 1,
            heads: 2,
            ffn: 16,
            dropout: 0.0,
            variant: Variant::Mtrans,
            turn_width: 4,
            speaker_width: 4,
            max_speakers: 4,
            max_turns: 8,
        }
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0), 0.0);
        assert!((swish(1.0) - 0.731059).abs() < 1e-5);
        assert!((swish(20.0) / 20.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_layers_is_plain_concatenation() {
        let mut g = Graph::new(Mode::Eval);
        let store = ParamStore::new();
        let e = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let t = g.constant(array![[5.0], [6.0]]);
        let r = g.constant(array![[7.0], [8.0]]);
        let s = word_level_encode(&mut g, &store, e, t, r, &[]).unwrap();
        assert_eq!(g.value(s), &array![[1.0, 2.0, 5.0, 7.0], [3.0, 4.0, 6.0, 8.0]]);
    }

    #[test]
    fn pooling_takes_elementwise_max() {
        let mut g = Graph::new(Mode::Eval);
        let s = g.constant(array![[1.0, 4.0], [3.0, 2.0], [0.0, 9.0]]);
        let u = utterance_pool(&mut g, s, &[(0, 2), (2, 3)]).unwrap();
        assert_eq!(g.value(u), &array![[3.0, 4.0], [0.0, 9.0]]);
        let single = utterance_pool(&mut g, s, &[(2, 3)]).unwrap();
        assert_eq!(g.value(single), &array![[0.0, 9.0]]);
        assert!(utterance_pool(&mut g, s, &[(1, 1)]).is_err());
    }

    #[test]
    fn bilstm_shapes_and_backward_reach() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, 6, 8, 2, &mut rng);
        for n in [1, 5] {
            let mut g = Graph::new(Mode::Eval);
            let u = g.input(Mat::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0)));
            let out = lstm.forward(&mut g, &store, u);
            assert_eq!(g.shape(out), (n, 8));
            if n == 5 {
                // the first output depends on the last input through the backward pass
                let first = g.gather_rows(out, &[0]);
                let loss = g.sum(first);
                let grads = g.backward(loss);
                let gu = grads.wrt(u).unwrap();
                assert!(gu.row(4).iter().any(|v| v.abs() > 1e-9));
            }
        }
    }

    #[test]
    fn fusion_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let fusion = FusionLayer::new(&mut store, 3, 4, &mut rng);
        store.value_mut(fusion.linear.weight).fill(0.0);
        let mut g = Graph::new(Mode::Eval);
        let s = g.constant(Mat::from_elem((3, 3), 0.7));
        let u = g.constant(Mat::from_elem((2, 4), -0.3));
        let out = fusion.forward(&mut g, &store, s, u, &[0, 0, 1]).unwrap();
        assert_eq!(g.shape(out), (3, 4));
        assert!(g.value(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion_spreads_utterance_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let fusion = FusionLayer::new(&mut store, 3, 4, &mut rng);
        let mut g = Graph::new(Mode::Eval);
        let s = g.constant(Mat::zeros((3, 3)));
        let u = g.constant(Mat::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)));
        let out = fusion.forward(&mut g, &store, s, u, &[0, 0, 1]).unwrap();
        let v = g.value(out);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(0), v.row(2));
        let bad = g.constant(Mat::zeros((3, 5)));
        assert!(fusion.forward(&mut g, &store, bad, u, &[0, 0, 1]).is_err());
    }

    #[test]
    fn encoder_widths_follow_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n1 in 0..4 {
            let cfg = config(n1);
            let mut store = ParamStore::new();
            let enc = ScEncoder::new(&mut store, cfg.clone(), 12, &mut rng).unwrap();
            let ind = IndicatorEmbeddings::new(&mut store, &cfg, 4, &mut rng);
            let ctx = TokenizedContext {
                ids: vec![],
                word_of: vec![],
                word_starts: vec![0; 5],
                utterances: vec![
                    crate::backbone::UtteranceSlot { source: 0, words: (0, 2) },
                    crate::backbone::UtteranceSlot { source: 1, words: (2, 5) },
                ],
                speakers: vec![0, 0, 1, 1, 1],
                turns: vec![0, 0, 1, 1, 1],
                predicate: vec![0, 0, 0, 1, 0],
                dropped: 0,
            };
            let mut g = Graph::new(Mode::Eval);
            let e = g.constant(Mat::from_shape_fn((5, 12), |_| rng.gen_range(-1.0..1.0)));
            let out = enc.forward(&mut g, &store, &ind, e, &ctx, None).unwrap();
            assert_eq!(g.cols(out.s), 12 + 4 + 4 + n1 * 8);
            assert_eq!(g.cols(out.s), cfg.word_width(12));
            assert_eq!(g.shape(out.u_prime), (2, 8));
            assert_eq!(g.shape(out.g), (5, 8));
        }
    }

    #[test]
    fn speaker_relabeling_needs_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = config(1);
        let mut store = ParamStore::new();
        let ind = IndicatorEmbeddings::new(&mut store, &cfg, 4, &mut rng);
        let lookup = |store: &ParamStore, ids: &[usize]| {
            let mut g = Graph::new(Mode::Eval);
            let v = ind.speakers(&mut g, store, ids);
            g.value(v).clone()
        };
        let before = lookup(&store, &[0, 1, 0]);
        // swap labels 0 <-> 1
        let swapped = lookup(&store, &[1, 0, 1]);
        assert_ne!(before, swapped);
        let table = store.value_mut(ind.speaker.table);
        let r0 = table.row(0).to_owned();
        let r1 = table.row(1).to_owned();
        table.row_mut(0).assign(&r1);
        table.row_mut(1).assign(&r0);
        assert_eq!(before, lookup(&store, &[1, 0, 1]));
    }
}
