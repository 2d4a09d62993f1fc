//! Transformer building blocks on top of [`Graph`].
//!
//! Layers use post-residual layer normalization: a token whose input
//! embedding has been scaled towards zero contributes only bias terms to the
//! keys and values seen by other tokens.

use rand::Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamGroup, ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

fn pv<T: Scalar>(g: &Graph<'_, T>, id: ParamId) -> Var {
    g.param(id.0)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::randn(fan_in, fan_out, std, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let xw = g.matmul(x, pv(g, self.weight));
        g.add_row(xw, pv(g, self.bias))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::filled(1, d, T::one()));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(1, d));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        g.layer_norm(x, pv(g, self.gamma), pv(g, self.beta), T::of(LN_EPS))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "d_model must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), group, d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), group, d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), group, d_model, d_model, rng),
            heads,
            d_model,
        }
    }

    /// Attention of `queries` over `context`. With `causal`, row `i` sees
    /// context rows `0..=i` only.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        context: Var,
        causal: bool,
    ) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let dh = self.d_model / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = if causal {
                g.causal_softmax(scores, 0)
            } else {
                g.softmax(scores)
            };
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.output.forward(g, joined)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.fc1"), group, d_model, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.fc2"), group, d_ff, d_model, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.gelu(h);
        self.outer.forward(g, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.inner.param_ids();
        ids.extend(self.outer.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let a = self.attention.forward(g, x, x, false);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention.param_ids();
        ids.extend(self.norm1.param_ids());
        ids.extend(self.ff.param_ids());
        ids.extend(self.norm2.param_ids());
        ids
    }
}

/// Bidirectional (unmasked) transformer encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dims: &Dims,
        rng: &mut R,
    ) -> Self {
        let layers = (0..dims.encoder_layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                EncoderLayer {
                    attention: MultiHeadAttention::new(
                        store,
                        &format!("{n}.attn"),
                        group,
                        dims.d_model,
                        dims.heads,
                        rng,
                    ),
                    norm1: LayerNorm::new(store, &format!("{n}.ln1"), group, dims.d_model),
                    ff: FeedForward::new(store, &format!("{n}.ff"), group, dims.d_model, dims.d_ff, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.ln2"), group, dims.d_model),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(g, h))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(EncoderLayer::param_ids).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var) -> Var {
        let a = self.self_attention.forward(g, x, x, true);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let c = self.cross_attention.forward(g, x, memory, false);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.self_attention.param_ids();
        ids.extend(self.norm1.param_ids());
        ids.extend(self.cross_attention.param_ids());
        ids.extend(self.norm2.param_ids());
        ids.extend(self.ff.param_ids());
        ids.extend(self.norm3.param_ids());
        ids
    }
}

/// Causal transformer decoder with cross-attention over encoder memory.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dims: &Dims,
        rng: &mut R,
    ) -> Self {
        let d = dims.d_model;
        let layers = (0..dims.decoder_layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                DecoderLayer {
                    self_attention: MultiHeadAttention::new(
                        store,
                        &format!("{n}.self_attn"),
                        group,
                        d,
                        dims.heads,
                        rng,
                    ),
                    norm1: LayerNorm::new(store, &format!("{n}.ln1"), group, d),
                    cross_attention: MultiHeadAttention::new(
                        store,
                        &format!("{n}.cross_attn"),
                        group,
                        d,
                        dims.heads,
                        rng,
                    ),
                    norm2: LayerNorm::new(store, &format!("{n}.ln2"), group, d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), group, d, dims.d_ff, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.ln3"), group, d),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(g, h, memory))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(DecoderLayer::param_ids).collect()
    }
}

/// Architecture sizes shared by the encoders and the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub max_answer_len: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            d_ff: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 512,
            max_answer_len: 8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Dims {
        Dims {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            encoder_layers: 2,
            decoder_layers: 1,
            max_positions: 16,
            max_answer_len: 4,
        }
    }

    #[test]
    fn encoder_is_shape_preserving_and_finite() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(&mut store, "enc", ParamGroup::QaEncoder, &tiny(), &mut rng);
            let mut g = Graph::new(store.tensors(), store.trainable());
            let x = g.constant(Tensor::randn(5, 8, 1.0, &mut rng));
            let h = enc.forward(&mut g, x);
            assert_eq!(g.value(h).shape(), (5, 8));
            assert!(g.value(h).all_finite());
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "enc", ParamGroup::QaEncoder, &tiny(), &mut rng);
        let x = Tensor::<f64>::randn(4, 8, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut xp = Tensor::zeros(4, 8);
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(i).copy_from_slice(x.row(p));
        }
        let mut g = Graph::new(store.tensors(), store.trainable());
        let a = g.constant(x);
        let b = g.constant(xp);
        let ha = enc.forward(&mut g, a);
        let hb = enc.forward(&mut g, b);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                let d = (g.value(hb).get(i, c) - g.value(ha).get(p, c)).abs();
                assert!(d < 1e-12, "row {i} col {c} differs by {d}");
            }
        }
    }

    #[test]
    fn causal_decoder_prefix_is_independent_of_suffix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, "dec", ParamGroup::QaDecoder, &tiny(), &mut rng);
        let mem = Tensor::<f64>::randn(3, 8, 1.0, &mut rng);
        let x = Tensor::<f64>::randn(4, 8, 1.0, &mut rng);
        let mut x2 = x.clone();
        x2.row_mut(3).iter_mut().for_each(|v| *v += 1.0);
        let mut g = Graph::new(store.tensors(), store.trainable());
        let m = g.constant(mem);
        let a = g.constant(x);
        let b = g.constant(x2);
        let ya = dec.forward(&mut g, a, m);
        let yb = dec.forward(&mut g, b, m);
        for r in 0..3 {
            assert_eq!(g.value(ya).row(r), g.value(yb).row(r));
        }
        assert_ne!(g.value(ya).row(3), g.value(yb).row(3));
    }
}
