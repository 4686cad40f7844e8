//! Transformer encoder layer with configurable residual connections.
//!
//! `Standard` adds in both residuals. `MTrans` concatenates in the first
//! residual, `LaterMTrans` in the second, `BothMTrans` in both. Whatever the
//! variant, a layer maps `|S| × w` to `|S| × d`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Block, Graph, ParamId, ParamStore, Var};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    #[default]
    Mtrans,
    LaterMtrans,
    BothMtrans,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Standard,
        Variant::Mtrans,
        Variant::LaterMtrans,
        Variant::BothMtrans,
    ];

    fn concat_first(self) -> bool {
        matches!(self, Variant::Mtrans | Variant::BothMtrans)
    }

    fn concat_second(self) -> bool {
        matches!(self, Variant::LaterMtrans | Variant::BothMtrans)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "mtrans" => Ok(Variant::Mtrans),
            "later-mtrans" => Ok(Variant::LaterMtrans),
            "both-mtrans" => Ok(Variant::BothMtrans),
            other => Err(Error::Config(format!("unknown layer variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub variant: Variant,
    pub input: usize,
    pub model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl LayerShape {
    fn first_width(&self) -> usize {
        if self.variant.concat_first() {
            2 * self.model
        } else {
            self.model
        }
    }

    /// Closed-form parameter count of a layer with this shape.
    pub fn param_count(&self) -> usize {
        let (w, d, f) = (self.input, self.model, self.ffn);
        let attention = 3 * (w * d + d) + (d * d + d);
        let input_proj = if w != d { w * d + d } else { 0 };
        let h1 = self.first_width();
        let ln1 = 2 * h1;
        let ffn = h1 * f + f + f * d + d;
        let second = if self.variant.concat_second() {
            let c = h1 + d;
            2 * c + (c * d + d)
        } else {
            let residual_proj = if h1 != d { h1 * d + d } else { 0 };
            residual_proj + 2 * d
        };
        attention + input_proj + ln1 + ffn + second
    }
}

#[derive(Clone, Debug)]
pub struct MTransLayer {
    pub shape: LayerShape,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    input_proj: Option<Linear>,
    norm1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    residual_proj: Option<Linear>,
    norm2: LayerNorm,
    out_proj: Option<Linear>,
}

impl MTransLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        shape: LayerShape,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (w, d, f) = (shape.input, shape.model, shape.ffn);
        if shape.heads == 0 || d % shape.heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {} heads",
                shape.heads
            )));
        }
        let mut lin = |store: &mut ParamStore, part: &str, i: usize, o: usize| {
            Linear::new(store, &format!("{name}.{part}"), block, i, o, rng)
        };
        let query = lin(store, "query", w, d);
        let key = lin(store, "key", w, d);
        let value = lin(store, "value", w, d);
        let output = lin(store, "attn_out", d, d);
        let input_proj = (w != d).then(|| lin(store, "input_proj", w, d));
        let h1 = shape.first_width();
        let ffn_in = lin(store, "ffn_in", h1, f);
        let ffn_out = lin(store, "ffn_out", f, d);
        let (residual_proj, out_proj, norm2_width) = if shape.variant.concat_second() {
            (None, Some(lin(store, "out_proj", h1 + d, d)), h1 + d)
        } else {
            ((h1 != d).then(|| lin(store, "residual_proj", h1, d)), None, d)
        };
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), block, h1);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), block, norm2_width);
        Ok(MTransLayer {
            shape,
            query,
            key,
            value,
            output,
            input_proj,
            norm1,
            ffn_in,
            ffn_out,
            residual_proj,
            norm2,
            out_proj,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.query, &self.key, &self.value, &self.output, &self.ffn_in, &self.ffn_out] {
            ids.extend(l.params());
        }
        for l in [&self.input_proj, &self.residual_proj, &self.out_proj].into_iter().flatten() {
            ids.extend(l.params());
        }
        ids.extend(self.norm1.params());
        ids.extend(self.norm2.params());
        ids
    }

    fn attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, x);
        let v = self.value.forward(g, store, x);
        let heads = self.shape.heads;
        let dk = self.shape.model / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            ctx.push(g.matmul(weights, vh));
        }
        let ctx = g.concat_cols(&ctx);
        self.output.forward(g, store, ctx)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.cols(x) != self.shape.input {
            return Err(Error::WidthMismatch {
                context: "mtrans input",
                expected: self.shape.input,
                actual: g.cols(x),
            });
        }
        let rate = self.shape.dropout;
        let attn = self.attention(g, store, x);
        let attn = g.dropout(attn, rate);
        let skip = match &self.input_proj {
            Some(p) => p.forward(g, store, x),
            None => x,
        };
        let h1 = if self.shape.variant.concat_first() {
            g.concat_cols(&[attn, skip])
        } else {
            g.add(skip, attn)
        };
        let h1 = self.norm1.forward(g, store, h1);

        let f = self.ffn_in.forward(g, store, h1);
        let f = g.gelu(f);
        let f = self.ffn_out.forward(g, store, f);
        let f = g.dropout(f, rate);

        let out = match &self.out_proj {
            Some(out_proj) => {
                let c = g.concat_cols(&[h1, f]);
                let c = self.norm2.forward(g, store, c);
                out_proj.forward(g, store, c)
            }
            None => {
                let base = match &self.residual_proj {
                    Some(p) => p.forward(g, store, h1),
                    None => h1,
                };
                let sum = g.add(base, f);
                self.norm2.forward(g, store, sum)
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Mat, Mode};
    use rand::{Rng, SeedableRng};

    fn shape(variant: Variant, input: usize) -> LayerShape {
        LayerShape {
            variant,
            input,
            model: 8,
            heads: 2,
            ffn: 16,
            dropout: 0.1,
        }
    }

    #[test]
    fn every_variant_maps_to_model_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for input in [8, 13] {
            for v in Variant::ALL {
                let mut store = ParamStore::new();
                let layer = MTransLayer::new(&mut store, "l", Block::Sc, shape(v, input), &mut rng).unwrap();
                let mut g = Graph::new(Mode::Eval);
                let x = g.constant(Mat::from_shape_fn((5, input), |_| rng.gen_range(-1.0..1.0)));
                let y = layer.forward(&mut g, &store, x).unwrap();
                assert_eq!(g.shape(y), (5, 8));
                assert!(g.value(y).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = MTransLayer::new(&mut store, "l", Block::Sc, shape(Variant::Mtrans, 8), &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Mat::zeros((2, 7)));
        assert!(matches!(layer.forward(&mut g, &store, x), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut s = shape(Variant::Standard, 8);
        s.heads = 3;
        assert!(MTransLayer::new(&mut store, "l", Block::Sc, s, &mut rng).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            let name = serde_json::to_value(v).unwrap();
            assert_eq!(name.as_str().unwrap().parse::<Variant>().unwrap(), v);
        }
    }
}
