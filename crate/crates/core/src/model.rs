//! The full tagger: backbone, SC encoder, PA encoder, role projection, and the
//! auxiliary heads used during pre-training.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    pair_ids, tokenize_context, tokenize_utterances, Backbone, BackboneConfig, SubwordPooling, TokenizedContext,
    Vocab,
};
use crate::corpus::{bio_encode, Dialogue, Frame, LabelInventory, Span};
use crate::error::{Error, Result};
use crate::graph::{Block, Graph, Mode, ParamStore, Var};
use crate::mtrans::Variant;
use crate::nn::Linear;
use crate::objectives::{objective_loss_var, HpsiExample, Objective, SaiExample, SpiExample, TlmExample, UorExample};
use crate::pa_encoder::{predict_tags, PaConfig, PaEncoder, RoleProjection};
use crate::sc_encoder::{IndicatorEmbeddings, ScConfig, ScEncoder};

/// Architecture hyperparameters. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lm_layers: usize,
    pub lm_hidden: usize,
    pub lm_heads: usize,
    pub lm_ffn: usize,
    pub lm_dropout: f64,
    pub max_len: usize,
    pub pooling: SubwordPooling,
    pub vocab_min_count: usize,
    /// Model width `d` of both hierarchical encoders.
    pub hidden: usize,
    pub word_layers: usize,
    pub utterance_layers: usize,
    pub pa_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub turn_width: usize,
    pub speaker_width: usize,
    pub predicate_width: usize,
    pub max_speakers: usize,
    pub max_turns: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lm_layers: 4,
            lm_hidden: 32,
            lm_heads: 2,
            lm_ffn: 64,
            lm_dropout: 0.1,
            max_len: 160,
            pooling: SubwordPooling::First,
            vocab_min_count: 1,
            hidden: 64,
            word_layers: 2,
            utterance_layers: 1,
            pa_layers: 1,
            heads: 4,
            ffn: 128,
            dropout: 0.1,
            variant: Variant::Mtrans,
            turn_width: 16,
            speaker_width: 16,
            predicate_width: 16,
            max_speakers: 8,
            max_turns: 48,
        }
    }
}

impl ModelConfig {
    /// Widths and depths of the full-scale setup (hidden 512, two word-level
    /// layers, one predicate-argument layer, sequences up to 512).
    pub fn full_scale() -> Self {
        ModelConfig {
            lm_layers: 12,
            lm_hidden: 768,
            lm_heads: 12,
            lm_ffn: 3072,
            max_len: 512,
            hidden: 512,
            heads: 8,
            ffn: 2048,
            turn_width: 64,
            speaker_width: 64,
            predicate_width: 64,
            ..ModelConfig::default()
        }
    }

    pub fn backbone(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            layers: self.lm_layers,
            hidden: self.lm_hidden,
            heads: self.lm_heads,
            ffn: self.lm_ffn,
            max_len: self.max_len,
            dropout: self.lm_dropout,
            pooling: self.pooling,
        }
    }

    pub fn sc(&self) -> ScConfig {
        ScConfig {
            model: self.hidden,
            word_layers: self.word_layers,
            utterance_layers: self.utterance_layers,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
            variant: self.variant,
            turn_width: self.turn_width,
            speaker_width: self.speaker_width,
            max_speakers: self.max_speakers,
            max_turns: self.max_turns,
        }
    }

    pub fn pa(&self) -> PaConfig {
        PaConfig {
            layers: self.pa_layers,
            predicate_width: self.predicate_width,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone(6).validate()?;
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_speakers < 2 || self.max_turns < 2 {
            return Err(Error::Config("max_speakers and max_turns must be at least 2".into()));
        }
        if self.utterance_layers == 0 {
            return Err(Error::Config("utterance_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pre-training heads; never used at tagging time.
#[derive(Clone, Debug)]
pub struct ObjectiveHeads {
    pub tlm: Linear,
    pub hpsi: Linear,
    pub spi: Linear,
    pub uor: Linear,
    /// Backbone output to width `d`, standing in for the SC encoder under SAI.
    pub sai_proj: Linear,
    pub sai_out: RoleProjection,
}

#[derive(Clone, Debug)]
pub struct CsrlModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub labels: LabelInventory,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub indicators: IndicatorEmbeddings,
    pub sc: ScEncoder,
    pub pa: PaEncoder,
    pub roles: RoleProjection,
    pub heads: ObjectiveHeads,
}

impl CsrlModel {
    pub fn new(config: ModelConfig, vocab: Vocab, labels: LabelInventory, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bcfg = config.backbone(vocab.len());
        let e_width = bcfg.output_width();
        let backbone = Backbone::new(&mut store, bcfg, &mut rng)?;
        let sc_cfg = config.sc();
        let indicators = IndicatorEmbeddings::new(&mut store, &sc_cfg, config.predicate_width, &mut rng);
        let sc = ScEncoder::new(&mut store, sc_cfg, e_width, &mut rng)?;
        let pa_cfg = config.pa();
        let pa_width = pa_cfg.output_width(config.hidden);
        let pa = PaEncoder::new(&mut store, "pa", Block::Pa, pa_cfg, config.hidden, &mut rng)?;
        let roles = RoleProjection::new(&mut store, "pa.roles", Block::Pa, pa_width, labels.tag_count(), &mut rng);
        let shared = LabelInventory::shared();
        let d = config.hidden;
        let heads = ObjectiveHeads {
            tlm: Linear::new(&mut store, "heads.tlm", Block::Heads, config.lm_hidden, vocab.len(), &mut rng),
            hpsi: Linear::new(&mut store, "heads.hpsi", Block::Heads, e_width, 2, &mut rng),
            spi: Linear::new(&mut store, "heads.spi", Block::Heads, d, config.max_speakers, &mut rng),
            uor: Linear::new(&mut store, "heads.uor", Block::Heads, d, config.max_turns, &mut rng),
            sai_proj: Linear::new(&mut store, "heads.sai_proj", Block::Heads, e_width, d, &mut rng),
            sai_out: RoleProjection::new(
                &mut store,
                "heads.sai_out",
                Block::Heads,
                pa_width,
                shared.tag_count(),
                &mut rng,
            ),
        };
        Ok(CsrlModel {
            config,
            vocab,
            labels,
            store,
            backbone,
            indicators,
            sc,
            pa,
            roles,
            heads,
        })
    }

    pub fn context(&self, dialogue: &Dialogue, frame: &Frame) -> Result<TokenizedContext> {
        tokenize_context(dialogue, frame, &self.vocab, self.config.max_len)
    }

    /// Tag logits (after the swish projection) for every word of the frame's
    /// context window.
    pub fn csrl_logits(&self, g: &mut Graph, ctx: &TokenizedContext) -> Result<Var> {
        let e = self.backbone.encode(g, &self.store, ctx)?;
        let sc = self.sc.forward(g, &self.store, &self.indicators, e, ctx, None)?;
        let p = self.indicators.predicates(g, &self.store, &ctx.predicate);
        let a = self.pa.encode(g, &self.store, sc.g, p)?;
        Ok(self.roles.forward(g, &self.store, a))
    }

    /// Gold tag ids for the words kept in `ctx`.
    pub fn csrl_targets(&self, dialogue: &Dialogue, frame: &Frame, ctx: &TokenizedContext) -> Result<Vec<usize>> {
        let tags = bio_encode(frame, dialogue, &self.labels)?;
        let base = dialogue.offsets()[ctx.dropped];
        Ok(tags.ids()[base..base + ctx.word_count()].to_vec())
    }

    pub fn csrl_loss(&self, g: &mut Graph, dialogue: &Dialogue, frame: &Frame) -> Result<Var> {
        let ctx = self.context(dialogue, frame)?;
        let targets: Vec<Option<usize>> = self
            .csrl_targets(dialogue, frame, &ctx)?
            .into_iter()
            .map(Some)
            .collect();
        let logits = self.csrl_logits(g, &ctx)?;
        objective_loss_var(g, Objective::Csrl, logits, &targets, None)
    }

    /// Arg-max tags over the context window, in evaluation mode.
    pub fn predict(&self, dialogue: &Dialogue, frame: &Frame) -> Result<(TokenizedContext, Vec<usize>)> {
        let ctx = self.context(dialogue, frame)?;
        let mut g = Graph::new(Mode::Eval);
        let logits = self.csrl_logits(&mut g, &ctx)?;
        let tags = predict_tags(g.value(logits));
        Ok((ctx, tags))
    }

    pub fn tlm_loss(&self, g: &mut Graph, ex: &TlmExample) -> Result<Var> {
        let states = self.backbone.hidden_states(g, &self.store, &ex.ids)?;
        let last = *states.last().expect("at least four layers");
        let logits = self.heads.tlm.forward(g, &self.store, last);
        objective_loss_var(g, Objective::Tlm, logits, &ex.targets(), None)
    }

    pub fn hpsi_loss(&self, g: &mut Graph, ex: &HpsiExample) -> Result<Var> {
        let ids = pair_ids(&self.vocab, &ex.source, &ex.target);
        let states = self.backbone.hidden_states(g, &self.store, &ids)?;
        let top = self.backbone.top_concat(g, &states);
        let first = g.gather_rows(top, &[0]);
        let logits = self.heads.hpsi.forward(g, &self.store, first);
        objective_loss_var(g, Objective::Hpsi, logits, &[Some(usize::from(ex.parallel))], None)
    }

    /// SPI: classify each masked unit (max-pooled fused states) among the
    /// speakers present in the dialogue.
    pub fn spi_loss(&self, g: &mut Graph, dialogue: &Dialogue, ex: &SpiExample) -> Result<Var> {
        let n = dialogue.utterances.len();
        let ctx = tokenize_utterances(dialogue, n, None, &self.vocab, self.config.max_len)?;
        let offsets = dialogue.offsets();
        let base = offsets[ctx.dropped];
        let speakers = &ex.speakers[base..base + ctx.word_count()];
        let e = self.backbone.encode(g, &self.store, &ctx)?;
        let sc = self.sc.forward(g, &self.store, &self.indicators, e, &ctx, Some(speakers))?;
        let last = self.config.max_speakers - 1;
        let mut segments = Vec::new();
        let mut targets = Vec::new();
        for (&m, &gold) in ex.masked.iter().zip(&ex.gold) {
            let Span { utt, start, end } = ex.units[m];
            if utt < ctx.dropped {
                continue;
            }
            segments.push((offsets[utt] + start - base, offsets[utt] + end + 1 - base));
            targets.push(Some(gold.min(last)));
        }
        if segments.is_empty() {
            return Err(Error::NoTargets(Objective::Spi.name()));
        }
        let pooled = g.segment_max(sc.g, &segments);
        let logits = self.heads.spi.forward(g, &self.store, pooled);
        let mut allowed = vec![false; self.config.max_speakers];
        for &s in &ex.present {
            allowed[s.min(last)] = true;
        }
        objective_loss_var(g, Objective::Spi, logits, &targets, Some(&allowed))
    }

    /// UOR: classify every shuffled utterance's original position among the
    /// suffix positions.
    pub fn uor_loss(&self, g: &mut Graph, ex: &UorExample) -> Result<Var> {
        let n = ex.dialogue.utterances.len();
        if n > self.config.max_turns {
            return Err(Error::InvalidArgument(format!(
                "dialogue {} has {n} utterances, more than max_turns {}",
                ex.dialogue.id, self.config.max_turns
            )));
        }
        let ctx = tokenize_utterances(&ex.dialogue, n, None, &self.vocab, self.config.max_len)?;
        let e = self.backbone.encode(g, &self.store, &ctx)?;
        let sc = self.sc.forward(g, &self.store, &self.indicators, e, &ctx, None)?;
        let all = ex.targets();
        let targets: Vec<Option<usize>> = ctx.utterances.iter().map(|slot| all[slot.source]).collect();
        let logits = self.heads.uor.forward(g, &self.store, sc.u_prime);
        let allowed: Vec<bool> = (0..self.config.max_turns)
            .map(|p| p >= ex.suffix_start && p < n)
            .collect();
        objective_loss_var(g, Objective::Uor, logits, &targets, Some(&allowed))
    }

    /// SAI: the SC encoder is skipped; a projection of the backbone output
    /// feeds the PA encoder directly.
    pub fn sai_loss(&self, g: &mut Graph, ex: &SaiExample) -> Result<Var> {
        let (ctx, logits) = self.sai_logits(g, ex)?;
        debug_assert_eq!(ctx.word_count(), ex.tags.len());
        let targets: Vec<Option<usize>> = ex.tags.iter().copied().map(Some).collect();
        objective_loss_var(g, Objective::Sai, logits, &targets, None)
    }

    pub fn sai_logits(&self, g: &mut Graph, ex: &SaiExample) -> Result<(TokenizedContext, Var)> {
        let dialogue = Dialogue {
            id: "sai".into(),
            language: "und".into(),
            utterances: vec![crate::corpus::Utterance {
                speaker: "S".into(),
                turn: 1,
                tokens: ex.tokens.clone(),
            }],
        };
        let predicate = Span::new(0, ex.predicate.0, ex.predicate.1);
        let ctx = tokenize_utterances(&dialogue, 1, Some(predicate), &self.vocab, self.config.max_len)?;
        let e = self.backbone.encode(g, &self.store, &ctx)?;
        let x = self.heads.sai_proj.forward(g, &self.store, e);
        let p = self.indicators.predicates(g, &self.store, &ctx.predicate);
        let a = self.pa.encode(g, &self.store, x, p)?;
        Ok((ctx, self.heads.sai_out.forward(g, &self.store, a)))
    }

    /// Replaces the role projection with a fresh one sized for `labels`.
    pub fn reset_labels(&mut self, labels: LabelInventory, seed: u64) {
        if labels == self.labels {
            return;
        }
        debug!("re-initializing role projection for {} roles", labels.roles().len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let input = self.roles.linear.input;
        // build in a scratch store, then copy into the existing slots so parameter ids stay put
        let mut scratch = ParamStore::new();
        let fresh = RoleProjection::new(&mut scratch, "pa.roles", Block::Pa, input, labels.tag_count(), &mut rng);
        *self.store.value_mut(self.roles.linear.weight) = scratch.value(fresh.linear.weight).clone();
        *self.store.value_mut(self.roles.linear.bias) = scratch.value(fresh.linear.bias).clone();
        self.roles.linear.output = labels.tag_count();
        self.labels = labels;
    }
}
