//! Small parameterized building blocks shared by the encoders and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Block, Graph, Mat, ParamId, ParamStore, Var};

/// Glorot-uniform matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn normal_like(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    // Irwin-Hall approximation keeps the dependency surface small.
    Mat::from_shape_fn((rows, cols), |_| {
        let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
        (s - 6.0) * std
    })
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), block, glorot(input, output, rng));
        let bias = store.add(format!("{name}.bias"), block, Mat::zeros((1, output)));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        assert_eq!(g.cols(x), self.input, "linear input width");
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// `in·out + out`
    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, block: Block, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), block, Mat::ones((1, width)));
        let bias = store.add(format!("{name}.bias"), block, Mat::zeros((1, width)));
        LayerNorm { gain, bias, width }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        assert_eq!(g.cols(x), self.width, "layer norm width");
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Lookup table; rows are looked up by id.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        rows: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = store.add(name, block, normal_like(rows, width, 0.1, rng));
        Embedding { table, rows, width }
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        debug_assert!(ids.iter().all(|&i| i < self.rows), "embedding id out of range");
        let t = g.param(store, self.table);
        g.gather_rows(t, ids)
    }
}
