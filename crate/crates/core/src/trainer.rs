//! Staged pre-training, CSRL fine-tuning, the learning-rate schedule, the
//! optimizer and checkpoint files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{pair_ids, tokenize_utterances, Vocab};
use crate::corpus::{Dataset, Dialogue, Frame, LabelInventory, ParallelPair, Sample};
use crate::error::{Error, Result};
use crate::evaluator::{extract_tuples, gold_tuples, Counts, ScoreReport, TupleSet};
use crate::graph::{Block, Graph, Mat, Mode, ParamId, ParamStore, Var};
use crate::model::{CsrlModel, ModelConfig};
use crate::objectives::{
    balanced_batch, corrupt_ids, sai_build, spi_corrupt, uor_shuffle, HpsiSampler, Objective, SaiExample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Clm,
    Sc,
    Pa,
    Csrl,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Clm => "clm",
            Stage::Sc => "sc",
            Stage::Pa => "pa",
            Stage::Csrl => "csrl",
        }
    }

    /// Blocks held fixed while this stage trains.
    pub fn frozen(self) -> Vec<Block> {
        match self {
            Stage::Clm | Stage::Csrl => vec![],
            Stage::Sc => vec![Block::Backbone],
            Stage::Pa => vec![Block::Backbone, Block::Sc],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clm" => Ok(Stage::Clm),
            "sc" => Ok(Stage::Sc),
            "pa" => Ok(Stage::Pa),
            "csrl" => Ok(Stage::Csrl),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Optimization settings. Defaults are the full-scale values; [`TrainConfig::desk`]
/// gives settings that converge on small corpora with a randomly initialized backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Learning-rate curve of the backbone parameters.
    pub lm_max_lr: f64,
    pub lm_min_lr: f64,
    pub max_epochs: usize,
    pub max_steps: usize,
    pub patience: usize,
    pub freeze_lm: bool,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub k1: f64,
    pub k2: f64,
    pub mask_rate: f64,
    pub end2end: bool,
    /// Stop fine-tuning once the dev F1_all reaches this value.
    pub target_f1: Option<f64>,
    /// Record the probe loss every this many pre-training steps (0: never).
    pub probe_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Csrl,
            batch_size: 24,
            max_lr: 5e-5,
            min_lr: 1e-5,
            lm_max_lr: 1e-5,
            lm_min_lr: 1e-6,
            max_epochs: 50,
            max_steps: 15_000,
            patience: 10,
            freeze_lm: false,
            seed: 42,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            k1: 30.0,
            k2: 50.0,
            mask_rate: 0.15,
            end2end: false,
            target_f1: None,
            probe_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            max_lr: 2e-3,
            min_lr: 1e-4,
            lm_max_lr: 1e-3,
            lm_min_lr: 5e-5,
            max_epochs: 300,
            max_steps: 20_000,
            patience: 300,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let curve = |name: &str, max: f64, min: f64| {
            if !(min > 0.0 && max >= min) {
                return Err(Error::Config(format!("{name}: need max >= min > 0, got {max} / {min}")));
            }
            Ok(())
        };
        curve("learning rate", self.max_lr, self.min_lr)?;
        curve("backbone learning rate", self.lm_max_lr, self.lm_min_lr)?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        for (name, v) in [("k1", self.k1), ("k2", self.k2)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 100]")));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedule

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub main: f64,
    pub lm: f64,
}

/// One linear-warmup / linear-decay curve.
pub fn linear_schedule(step: usize, total: usize, warmup_fraction: f64, max: f64, min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total}")));
    }
    let warmup = (warmup_fraction * total as f64).floor() as usize;
    if step < warmup {
        return Ok(max * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(min);
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(max + (min - max) * frac)
}

pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<LearningRates> {
    Ok(LearningRates {
        main: linear_schedule(step, total, cfg.warmup_fraction, cfg.max_lr, cfg.min_lr)?,
        lm: linear_schedule(step, total, cfg.warmup_fraction, cfg.lm_max_lr, cfg.lm_min_lr)?,
    })
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay. Decay skips row vectors (biases, norm
/// gains).
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: usize) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    /// Updates every parameter with a gradient; the rest are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], rates: LearningRates) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(grad) = &grads[id.index()] else { continue };
            let block = store.get(id).block;
            let lr = if block == Block::Backbone { rates.lm } else { rates.main };
            let m = self.m[id.index()].get_or_insert_with(|| Mat::zeros(grad.dim()));
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v[id.index()].get_or_insert_with(|| Mat::zeros(grad.dim()));
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (self.m[id.index()].as_ref().unwrap(), self.v[id.index()].as_ref().unwrap());
            let value = store.value_mut(id);
            let decay = if value.nrows() > 1 { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(value).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + self.epsilon);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"XCSRLCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub block: Block,
    pub digest: String,
    pub params: Vec<NamedParam>,
}

/// SHA-256 over names, shapes and little-endian values in order. An empty
/// block hashes the empty input.
pub fn digest(params: &[NamedParam]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        h.update((p.rows as u64).to_le_bytes());
        h.update((p.cols as u64).to_le_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub labels: LabelInventory,
    /// Stages completed so far, in order.
    pub stages: Vec<Stage>,
    pub blocks: Vec<BlockParams>,
}

impl Checkpoint {
    pub fn from_model(model: &CsrlModel, stages: Vec<Stage>) -> Self {
        let blocks = Block::ALL
            .into_iter()
            .map(|block| {
                let params: Vec<NamedParam> = model
                    .store
                    .iter()
                    .filter(|(_, p)| p.block == block)
                    .map(|(_, p)| NamedParam {
                        name: p.name.clone(),
                        rows: p.value.nrows(),
                        cols: p.value.ncols(),
                        data: p.value.iter().copied().collect(),
                    })
                    .collect();
                BlockParams {
                    block,
                    digest: digest(&params),
                    params,
                }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            vocab: model.vocab.clone(),
            labels: model.labels.clone(),
            stages,
            blocks,
        }
    }

    pub fn block(&self, block: Block) -> Option<&BlockParams> {
        self.blocks.iter().find(|b| b.block == block)
    }

    pub fn digest_of(&self, block: Block) -> String {
        self.block(block).map_or_else(|| digest(&[]), |b| b.digest.clone())
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Recomputes every block digest and compares with the stored one.
    pub fn verify(&self) -> Result<()> {
        for b in &self.blocks {
            if digest(&b.params) != b.digest {
                return Err(Error::Checkpoint(format!("digest mismatch in block {}", b.block.tag())));
            }
        }
        Ok(())
    }

    /// Copies parameters into `model` by name. Names missing from the model,
    /// or with a different shape, are a mismatch unless listed in `skip`.
    pub fn load_into(&self, model: &mut CsrlModel, skip: &[&str]) -> Result<()> {
        for b in &self.blocks {
            for p in &b.params {
                if skip.contains(&p.name.as_str()) {
                    continue;
                }
                let id = model
                    .store
                    .find(&p.name)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter {}", p.name)))?;
                let value = model.store.value_mut(id);
                if value.dim() != (p.rows, p.cols) {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {} has shape {:?}, checkpoint has {:?}",
                        p.name,
                        value.dim(),
                        (p.rows, p.cols)
                    )));
                }
                *value = Mat::from_shape_vec((p.rows, p.cols), p.data.clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<CsrlModel> {
        let mut model = CsrlModel::new(self.model.clone(), self.vocab.clone(), self.labels.clone(), 0)?;
        self.load_into(&mut model, &[])?;
        Ok(model)
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header = serde_json::to_vec(self)?;
        out.write_all(MAGIC)?;
        out.write_all(&self.version.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for b in &self.blocks {
            for p in &b.params {
                for v in &p.data {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let mut ckpt: Checkpoint = serde_json::from_slice(&header)?;
        let mut buf = [0u8; 8];
        for b in &mut ckpt.blocks {
            for p in &mut b.params {
                p.data = (0..p.rows * p.cols)
                    .map(|_| input.read_exact(&mut buf).map(|_| f64::from_le_bytes(buf)))
                    .collect::<std::io::Result<_>>()?;
            }
        }
        ckpt.verify()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::MissingCheckpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(file)
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Line-oriented JSON metrics; no timestamps so reruns are byte-identical.
pub struct Metrics<'a> {
    out: Option<&'a mut dyn Write>,
}

impl<'a> Metrics<'a> {
    pub fn new(out: Option<&'a mut dyn Write>) -> Self {
        Metrics { out }
    }

    pub fn none() -> Self {
        Metrics { out: None }
    }

    pub fn emit(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut **out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared step machinery

struct ExampleOutcome {
    losses: Vec<(Objective, f64)>,
    grads: Vec<(ParamId, Mat)>,
}

fn example_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

/// Runs `build` on a training graph, sums the objective losses it returns and
/// backpropagates. Objectives without targets are skipped.
fn run_example(
    model: &CsrlModel,
    frozen: &[Block],
    rng: ChaCha8Rng,
    build: impl FnOnce(&mut Graph, &CsrlModel) -> Result<Vec<(Objective, Result<Var>)>>,
) -> Result<ExampleOutcome> {
    let mut g = Graph::training(rng).with_frozen(frozen.iter().copied());
    let mut losses = Vec::new();
    let mut total: Option<Var> = None;
    for (obj, loss) in build(&mut g, model)? {
        match loss {
            Ok(l) => {
                losses.push((obj, g.scalar(l)));
                total = Some(match total {
                    Some(t) => g.add(t, l),
                    None => l,
                });
            }
            Err(Error::NoTargets(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let grads = match total {
        Some(t) => g.backward(t).params().map(|(id, m)| (id, m.clone())).collect(),
        None => Vec::new(),
    };
    Ok(ExampleOutcome { losses, grads })
}

struct BatchResult {
    grads: Vec<Option<Mat>>,
    losses: BTreeMap<&'static str, f64>,
    examples: usize,
}

/// Gradients averaged over the batch; the reduction order is fixed, so the
/// result does not depend on thread scheduling.
fn reduce(outcomes: Vec<ExampleOutcome>, params: usize) -> BatchResult {
    let n = outcomes.len().max(1) as f64;
    let mut grads: Vec<Option<Mat>> = vec![None; params];
    let mut sums: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for o in &outcomes {
        for (obj, l) in &o.losses {
            let e = sums.entry(obj.name()).or_default();
            e.0 += l;
            e.1 += 1;
        }
        for (id, gm) in &o.grads {
            match &mut grads[id.index()] {
                Some(acc) => *acc += gm,
                slot => *slot = Some(gm.clone()),
            }
        }
    }
    for gm in grads.iter_mut().flatten() {
        gm.mapv_inplace(|v| v / n);
    }
    BatchResult {
        grads,
        losses: sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        examples: outcomes.len(),
    }
}

fn clip(grads: &mut [Option<Mat>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }
}

fn total_steps(cfg: &TrainConfig, examples: usize) -> usize {
    let per_epoch = examples.div_ceil(cfg.batch_size).max(1);
    cfg.max_steps.min(cfg.max_epochs * per_epoch).max(1)
}

// ---------------------------------------------------------------------------
// Pre-training

/// Everything the pre-training stages may consume.
#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub parallel: Vec<ParallelPair>,
    pub dialogues: Vec<Dialogue>,
    pub srl: Vec<Sample>,
}

impl PretrainData {
    fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = Vec::new();
        for p in &self.parallel {
            w.extend(p.source_tokens());
            w.extend(p.target_tokens());
        }
        for d in &self.dialogues {
            w.extend(d.utterances.iter().flat_map(|u| u.tokens.iter().cloned()));
        }
        for s in &self.srl {
            w.extend(s.dialogue.utterances.iter().flat_map(|u| u.tokens.iter().cloned()));
        }
        w
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub steps: usize,
    /// `(step, probe loss)` pairs; the probe set is fixed per run.
    pub probes: Vec<(usize, f64)>,
    pub final_losses: BTreeMap<String, f64>,
}

/// Examples prepared for the objectives of one stage.
struct StageData {
    pairs: Vec<ParallelPair>,
    swapped: Vec<ParallelPair>,
    hpsi: Option<HpsiSampler>,
    dialogues_a: Vec<Dialogue>,
    dialogues_b: Vec<Dialogue>,
    sai: Vec<SaiExample>,
}

fn prepare(stages: &[Stage], data: &PretrainData, model: &CsrlModel) -> Result<StageData> {
    let max_len = model.config.max_len;
    let vocab = &model.vocab;
    let mut out = StageData {
        pairs: Vec::new(),
        swapped: Vec::new(),
        hpsi: None,
        dialogues_a: Vec::new(),
        dialogues_b: Vec::new(),
        sai: Vec::new(),
    };
    if stages.contains(&Stage::Clm) {
        out.pairs = data
            .parallel
            .iter()
            .filter(|p| pair_ids(vocab, &p.source_tokens(), &p.target_tokens()).len() <= max_len)
            .cloned()
            .collect();
        if out.pairs.len() < data.parallel.len() {
            warn!("skipped {} sentence pairs longer than {max_len}", data.parallel.len() - out.pairs.len());
        }
        if out.pairs.is_empty() {
            return Err(Error::InvalidArgument("stage clm needs parallel sentence pairs".into()));
        }
        out.swapped = out.pairs.iter().map(ParallelPair::swapped).collect();
        out.hpsi = Some(HpsiSampler::new(&out.pairs)?);
    }
    if stages.contains(&Stage::Sc) {
        let usable: Vec<Dialogue> = data
            .dialogues
            .iter()
            .filter(|d| {
                d.utterances.len() >= 2
                    && d.utterances.len() <= model.config.max_turns
                    && tokenize_utterances(d, d.utterances.len(), None, vocab, max_len).is_ok()
            })
            .cloned()
            .collect();
        if usable.len() < data.dialogues.len() {
            warn!("skipped {} dialogues unusable for stage sc", data.dialogues.len() - usable.len());
        }
        if usable.is_empty() {
            return Err(Error::InvalidArgument("stage sc needs dialogues with at least two utterances".into()));
        }
        let first = usable[0].language.clone();
        let (a, b): (Vec<Dialogue>, Vec<Dialogue>) = usable.into_iter().partition(|d| d.language == first);
        out.dialogues_b = if b.is_empty() { a.clone() } else { b };
        out.dialogues_a = a;
    }
    if stages.contains(&Stage::Pa) {
        for s in &data.srl {
            let ex = sai_build(s)?;
            if ex.tokens.iter().map(|w| vocab.word_pieces(w).len()).sum::<usize>() + 2 <= max_len {
                out.sai.push(ex);
            }
        }
        if out.sai.is_empty() {
            return Err(Error::InvalidArgument("stage pa needs SRL samples".into()));
        }
    }
    Ok(out)
}

/// Draws one slot's example and returns the objectives it contributes.
#[allow(clippy::too_many_arguments)]
fn stage_losses(
    g: &mut Graph,
    model: &CsrlModel,
    stages: &[Stage],
    data: &StageData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    pair: Option<&ParallelPair>,
    dialogue: Option<&Dialogue>,
    sai: Option<&SaiExample>,
) -> Result<Vec<(Objective, Result<Var>)>> {
    let mut out = Vec::new();
    if stages.contains(&Stage::Clm) {
        let pair = pair.expect("clm slot has a pair");
        let ids = pair_ids(&model.vocab, &pair.source_tokens(), &pair.target_tokens());
        let tlm = corrupt_ids(ids, model.vocab.special_count(), model.vocab.len(), cfg.mask_rate, rng);
        out.push((Objective::Tlm, model.tlm_loss(g, &tlm)));
        let hpsi = data.hpsi.as_ref().expect("sampler").sample(rng);
        out.push((Objective::Hpsi, model.hpsi_loss(g, &hpsi)));
    }
    if stages.contains(&Stage::Sc) {
        let d = dialogue.expect("sc slot has a dialogue");
        let spi = spi_corrupt(d, cfg.k1, model.config.sc().speaker_mask_id(), rng)?;
        out.push((Objective::Spi, model.spi_loss(g, d, &spi)));
        let uor = uor_shuffle(d, cfg.k2, rng)?;
        out.push((Objective::Uor, model.uor_loss(g, &uor)));
    }
    if stages.contains(&Stage::Pa) {
        out.push((Objective::Sai, model.sai_loss(g, sai.expect("pa slot has an SRL sample"))));
    }
    Ok(out)
}

struct Slot<'a> {
    pair: Option<&'a ParallelPair>,
    dialogue: Option<&'a Dialogue>,
    sai: Option<&'a SaiExample>,
}

fn draw_slots<'a>(stages: &[Stage], data: &'a StageData, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Slot<'a>>> {
    let pairs = if stages.contains(&Stage::Clm) {
        Some(balanced_batch(&data.pairs, &data.swapped, n, rng)?)
    } else {
        None
    };
    let dialogues = if stages.contains(&Stage::Sc) {
        Some(balanced_batch(&data.dialogues_a, &data.dialogues_b, n, rng)?)
    } else {
        None
    };
    let sai = if stages.contains(&Stage::Pa) {
        Some((0..n).map(|_| data.sai.choose(rng).expect("non-empty")).collect::<Vec<_>>())
    } else {
        None
    };
    Ok((0..n)
        .map(|i| Slot {
            pair: pairs.as_ref().map(|p| p[i].1),
            dialogue: dialogues.as_ref().map(|d| d[i].1),
            sai: sai.as_ref().map(|s| s[i]),
        })
        .collect())
}

fn check_order(stage: Stage, init: Option<&Checkpoint>) -> Result<()> {
    let needs: &[Stage] = match stage {
        Stage::Clm | Stage::Csrl => &[],
        Stage::Sc => &[Stage::Clm],
        Stage::Pa => &[Stage::Clm, Stage::Sc],
    };
    if needs.is_empty() {
        return Ok(());
    }
    let Some(init) = init else {
        return Err(Error::MissingCheckpoint(format!(
            "stage {} needs a checkpoint from stage {}",
            stage.name(),
            needs.last().unwrap().name()
        )));
    };
    for need in needs {
        if !init.has_stage(*need) {
            return Err(Error::StageOrder(format!(
                "stage {} requires stage {} to have run first",
                stage.name(),
                need.name()
            )));
        }
    }
    Ok(())
}

/// Runs one pre-training stage (or all objectives jointly when `cfg.end2end`).
pub fn pretrain(
    stage: Stage,
    data: &PretrainData,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    init: Option<&Checkpoint>,
    metrics: &mut Metrics,
) -> Result<(Checkpoint, PretrainSummary)> {
    cfg.validate()?;
    if stage == Stage::Csrl {
        return Err(Error::InvalidArgument("use train_csrl for the csrl stage".into()));
    }
    let (stages, frozen) = if cfg.end2end {
        (vec![Stage::Clm, Stage::Sc, Stage::Pa], vec![])
    } else {
        check_order(stage, init)?;
        (vec![stage], stage.frozen())
    };
    let mut model = match init {
        Some(ckpt) => ckpt.to_model()?,
        None => {
            let words = data.words();
            let vocab = Vocab::build(words.iter().map(String::as_str), model_cfg.vocab_min_count);
            CsrlModel::new(model_cfg.clone(), vocab, LabelInventory::shared(), cfg.seed)?
        }
    };
    let prepared = prepare(&stages, data, &model)?;
    let examples = prepared.pairs.len() + prepared.dialogues_a.len().max(prepared.dialogues_b.len()) + prepared.sai.len();
    let total = total_steps(cfg, examples);
    info!("pre-training {:?} for {total} steps", stages.iter().map(|s| s.name()).collect::<Vec<_>>());

    let mut opt = AdamW::new(cfg, model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let probe = {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        draw_slots(&stages, &prepared, 16, &mut probe_rng)?
    };
    let probe_loss = |model: &CsrlModel| -> Result<f64> {
        let mut sum = 0.0;
        for (i, slot) in probe.iter().enumerate() {
            let mut ex_rng = example_rng(cfg.seed.wrapping_add(3), 0, i);
            let mut g = Graph::new(Mode::Eval);
            let losses = stage_losses(&mut g, model, &stages, &prepared, cfg, &mut ex_rng, slot.pair, slot.dialogue, slot.sai)?;
            for (_, l) in losses {
                match l {
                    Ok(v) => sum += g.scalar(v),
                    Err(Error::NoTargets(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(sum / probe.len() as f64)
    };

    let mut summary = PretrainSummary::default();
    for step in 0..total {
        if cfg.probe_every > 0 && step % cfg.probe_every == 0 {
            let p = probe_loss(&model)?;
            summary.probes.push((step, p));
            metrics.emit(serde_json::json!({"stage": stage_label(&stages), "step": step, "probe_loss": p}))?;
        }
        let slots = draw_slots(&stages, &prepared, cfg.batch_size, &mut rng)?;
        let outcomes = slots
            .par_iter()
            .enumerate()
            .map(|(i, slot)| {
                let mut ex_rng = example_rng(cfg.seed, step, i);
                let dropout_rng = example_rng(cfg.seed ^ 0x5eed, step, i);
                run_example(&model, &frozen, dropout_rng, |g, m| {
                    stage_losses(g, m, &stages, &prepared, cfg, &mut ex_rng, slot.pair, slot.dialogue, slot.sai)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut batch = reduce(outcomes, model.store.len());
        clip(&mut batch.grads, cfg.clip_norm);
        let rates = lr_at(step + 1, total, cfg)?;
        opt.step(&mut model.store, &batch.grads, rates);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            metrics.emit(serde_json::json!({
                "stage": stage_label(&stages),
                "step": step,
                "loss": batch.losses,
                "lr": rates.main,
                "lm_lr": rates.lm,
            }))?;
        }
        summary.final_losses = batch.losses.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        debug!("step {step}: {:?} over {} examples", batch.losses, batch.examples);
    }
    summary.steps = total;
    if cfg.probe_every > 0 && total.is_multiple_of(cfg.probe_every) {
        let p = probe_loss(&model)?;
        summary.probes.push((total, p));
        metrics.emit(serde_json::json!({"stage": stage_label(&stages), "step": total, "probe_loss": p}))?;
    }
    let mut done = init.map(|c| c.stages.clone()).unwrap_or_default();
    for s in stages {
        if !done.contains(&s) {
            done.push(s);
        }
    }
    Ok((Checkpoint::from_model(&model, done), summary))
}

fn stage_label(stages: &[Stage]) -> String {
    stages.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
}

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation

/// Scores a model on a dataset. Gold tuples include arguments that fall in
/// utterances truncated away from the model's input.
pub fn evaluate(model: &CsrlModel, data: &Dataset) -> Result<ScoreReport> {
    let frames: Vec<(&Dialogue, &Frame)> = data.frames().collect();
    let sets = frames
        .par_iter()
        .map(|(d, f)| {
            let predicted = predict_tuples(model, d, f)?;
            Ok((gold_tuples(f), predicted))
        })
        .collect::<Result<Vec<(TupleSet, TupleSet)>>>()?;
    let mut counts = Counts::default();
    for (g, p) in &sets {
        counts.add(g, p);
    }
    Ok(counts.report())
}

pub fn predict_tuples(model: &CsrlModel, dialogue: &Dialogue, frame: &Frame) -> Result<TupleSet> {
    let (ctx, tags) = model.predict(dialogue, frame)?;
    Ok(extract_tuples(&tags, frame.predicate, &ctx.utterances, &model.labels))
}

/// Predicted frames in corpus order, tagged with their dialogue id.
pub fn predict_frames(model: &CsrlModel, data: &Dataset) -> Result<Vec<(String, Frame)>> {
    data.frames()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(d, f)| {
            let tuples = predict_tuples(model, d, f)?;
            Ok((
                d.id.clone(),
                Frame {
                    predicate: f.predicate,
                    arguments: tuples
                        .into_iter()
                        .map(|t| crate::corpus::Argument {
                            span: t.argument,
                            role: t.role,
                        })
                        .collect(),
                },
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub f1_all: f64,
    pub f1_cross: f64,
    pub f1_intra: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best: ScoreReport,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Fine-tunes on CSRL frames with early stopping on the dev F1_all (the
/// training set stands in when no dev set is given). The best epoch's
/// parameters are kept.
pub fn train_csrl(
    data: &Dataset,
    dev: Option<&Dataset>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    labels: &LabelInventory,
    init: Option<&Checkpoint>,
    metrics: &mut Metrics,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.frame_count() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut model = match init {
        Some(ckpt) => {
            if ckpt.has_stage(Stage::Csrl) {
                if &ckpt.labels != labels {
                    return Err(Error::CheckpointMismatch(format!(
                        "checkpoint labels {:?} differ from training labels {:?}",
                        ckpt.labels.roles(),
                        labels.roles()
                    )));
                }
                ckpt.to_model()?
            } else {
                let mut m = ckpt.to_model()?;
                m.reset_labels(labels.clone(), cfg.seed);
                m
            }
        }
        None => {
            let words: Vec<&str> = data
                .samples
                .iter()
                .flat_map(|s| s.dialogue.utterances.iter().flat_map(|u| u.tokens.iter().map(String::as_str)))
                .collect();
            let vocab = Vocab::build(words, model_cfg.vocab_min_count);
            CsrlModel::new(model_cfg.clone(), vocab, labels.clone(), cfg.seed)?
        }
    };
    let frames: Vec<(&Dialogue, &Frame)> = data.frames().collect();
    let dev = dev.unwrap_or(data);
    let total = total_steps(cfg, frames.len());
    let frozen = if cfg.freeze_lm { vec![Block::Backbone] } else { vec![] };
    let mut opt = AdamW::new(cfg, model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..frames.len()).collect();

    let mut best_store = model.store.clone();
    let mut best = ScoreReport::default();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let outcomes = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &k)| {
                    let (d, f) = frames[k];
                    run_example(&model, &frozen, example_rng(cfg.seed ^ 0x5eed, step, i), |g, m| {
                        Ok(vec![(Objective::Csrl, m.csrl_loss(g, d, f))])
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut batch = reduce(outcomes, model.store.len());
            clip(&mut batch.grads, cfg.clip_norm);
            step += 1;
            let rates = lr_at(step, total, cfg)?;
            opt.step(&mut model.store, &batch.grads, rates);
            let loss = batch.losses.get("csrl").copied().unwrap_or(0.0);
            epoch_loss += loss;
            batches += 1;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                metrics.emit(serde_json::json!({
                    "stage": "csrl", "step": step, "loss": {"csrl": loss}, "lr": rates.main, "lm_lr": rates.lm,
                }))?;
            }
        }
        if batches == 0 {
            break;
        }
        let report = evaluate(&model, dev)?;
        let record = EpochRecord {
            epoch,
            steps: step,
            loss: epoch_loss / batches as f64,
            f1_all: report.all.f1,
            f1_cross: report.cross.f1,
            f1_intra: report.intra.f1,
        };
        metrics.emit(serde_json::json!({
            "stage": "csrl", "epoch": epoch, "step": step, "loss": record.loss,
            "dev_f1_all": record.f1_all, "dev_f1_cross": record.f1_cross, "dev_f1_intra": record.f1_intra,
        }))?;
        debug!("epoch {epoch}: loss {:.4} dev F1_all {:.4}", record.loss, record.f1_all);
        history.push(record);
        if best_epoch == 0 || report.all.f1 > best.all.f1 {
            best = report;
            best_epoch = epoch;
            best_store = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_f1.is_some_and(|t| best.all.f1 >= t) {
            info!("reached target F1_all {:.4} at epoch {epoch}", best.all.f1);
            break 'epochs;
        }
        if since_best >= cfg.patience {
            info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
        if step >= total {
            break;
        }
    }
    model.store = best_store;
    let mut stages = init.map(|c| c.stages.clone()).unwrap_or_default();
    if !stages.contains(&Stage::Csrl) {
        stages.push(Stage::Csrl);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, stages),
        best,
        best_epoch,
        history,
    })
}

/// Checks that a model trained with `trained` labels can score data using
/// `needed` labels.
pub fn check_labels(trained: &LabelInventory, needed: &LabelInventory) -> Result<()> {
    if trained.covers(needed) {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(format!(
            "checkpoint labels {:?} do not cover {:?}",
            trained.roles(),
            needed.roles()
        )))
    }
}
