//! Predicate-argument encoder and the role projection head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Block, Graph, Mat, ParamStore, Var};
use crate::mtrans::{LayerShape, MTransLayer, Variant};
use crate::nn::Linear;
use crate::sc_encoder::stack_encode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaConfig {
    /// Argument-encoder layers `N2`.
    pub layers: usize,
    pub predicate_width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub variant: Variant,
}

impl PaConfig {
    /// `width(a^{N2}) = d + d_p + N2·d`
    pub fn output_width(&self, model: usize) -> usize {
        model + self.predicate_width + self.layers * model
    }
}

#[derive(Clone, Debug)]
pub struct PaEncoder {
    pub config: PaConfig,
    pub model: usize,
    pub layers: Vec<MTransLayer>,
}

impl PaEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        config: PaConfig,
        model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut width = model + config.predicate_width;
        let mut layers = Vec::with_capacity(config.layers);
        for j in 0..config.layers {
            let shape = LayerShape {
                variant: config.variant,
                input: width,
                model,
                heads: config.heads,
                ffn: config.ffn,
                dropout: config.dropout,
            };
            layers.push(MTransLayer::new(store, &format!("{name}.layer{j}"), block, shape, rng)?);
            width += model;
        }
        Ok(PaEncoder { config, model, layers })
    }

    /// `a^0 = g ⊕ p`, then `a^j = a^{j-1} ⊕ layer_j(a^{j-1})`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, context: Var, predicate: Var) -> Result<Var> {
        pa_encode(g, store, context, predicate, self.model, &self.layers)
    }
}

pub fn pa_encode(
    g: &mut Graph,
    store: &ParamStore,
    context: Var,
    predicate: Var,
    model: usize,
    layers: &[MTransLayer],
) -> Result<Var> {
    if g.cols(context) != model {
        return Err(Error::WidthMismatch {
            context: "argument encoder context",
            expected: model,
            actual: g.cols(context),
        });
    }
    if g.rows(predicate) != g.rows(context) {
        return Err(Error::WidthMismatch {
            context: "predicate embedding rows",
            expected: g.rows(context),
            actual: g.rows(predicate),
        });
    }
    let a0 = g.concat_cols(&[context, predicate]);
    stack_encode(g, store, a0, layers)
}

/// `l = swish(W a + b)`; one column per tag.
#[derive(Clone, Debug)]
pub struct RoleProjection {
    pub linear: Linear,
}

impl RoleProjection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        input: usize,
        tags: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        RoleProjection {
            linear: Linear::new(store, name, block, input, tags, rng),
        }
    }

    pub fn tags(&self) -> usize {
        self.linear.output
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: Var) -> Var {
        let z = self.linear.forward(g, store, a);
        g.swish(z)
    }
}

/// Per-word tag probabilities.
pub fn label_distribution(logits: &Mat) -> Mat {
    softmax_rows(logits)
}

/// Arg-max tag per row.
pub fn predict_tags(logits: &Mat) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
