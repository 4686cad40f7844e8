//! Zero-shot cross-lingual conversational semantic role labeling.
//!
//! A small Transformer backbone feeds a structure-aware conversation encoder
//! and a predicate-argument encoder, which tag argument spans across the turns
//! of a dialogue. The backbone and both encoders can be pre-trained stage by
//! stage (translation LM + hard parallel sentence identification, then speaker
//! and utterance-order recovery, then single-sentence argument identification)
//! before fine-tuning on conversational frames.

pub mod backbone;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod model;
pub mod mtrans;
pub mod nn;
pub mod objectives;
pub mod pa_encoder;
pub mod sc_encoder;
pub mod synthetic;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, SubwordPooling, TokenizedContext, Vocab};
pub use corpus::{
    Argument, Dataset, DatasetStats, Dialogue, Frame, LabelInventory, ParallelPair, Sample, Span, Tag, TagSequence,
    Utterance,
};
pub use error::{Error, Result};
pub use evaluator::{score, ScoreReport, SemanticTuple, TupleKind, TupleSet};
pub use graph::{Block, Graph, Mat, Mode, ParamStore};
pub use model::{CsrlModel, ModelConfig};
pub use mtrans::{LayerShape, MTransLayer, Variant};
pub use trainer::{Checkpoint, Metrics, PretrainData, Stage, TrainConfig};
