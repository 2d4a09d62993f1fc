//! The relevance-gated encoder-decoder QA model.
//!
//! One token embedding and one positional table feed both the relevance
//! encoder and the QA encoder. The relevance encoder starts as a copy of the
//! QA encoder and is trained separately. Table-token embeddings entering the
//! QA encoder are multiplied by the fused relevance score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Decoder, Dims, Encoder, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::relevance::{
    fuse_scores_var, relevance_forward, scale_embeddings, soft_assign, ClusterState, FusionWeights, Noise,
    RelevanceOutput, RelevanceVector, VariationalHead,
};
use crate::scalar::Scalar;
use crate::vocab::{BOA_ID, EOA_ID};

pub const CHECKPOINT_VERSION: u32 = 1;

/// How the QA encoder's table embeddings are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Fused learned and cell scores.
    Learned,
    /// No scaling: the baseline with every score frozen to one.
    Ones,
    /// Fused row-overlap baseline and cell scores.
    Overlap,
}

/// One encoded question/table input with its precomputed external scores.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub ids: &'a [u32],
    pub boundary: usize,
    /// Cell-highlighter scores over the table region.
    pub eta_cell: &'a [f64],
    /// Overlap-baseline scores over the table region.
    pub overlap: &'a [f64],
}

impl ModelInput<'_> {
    pub fn table_len(&self) -> usize {
        self.ids.len() - self.boundary
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub gate: GateMode,
    pub fusion: FusionWeights,
    pub noise: Noise,
    /// Run the relevance scorer even when the gate does not use it
    /// (needed for the clustering losses and for diagnostics).
    pub score: bool,
}

impl ForwardOptions {
    pub fn eval(gate: GateMode, fusion: FusionWeights) -> Self {
        Self {
            gate,
            fusion,
            noise: Noise::Zero,
            score: gate == GateMode::Learned,
        }
    }
}

/// Relevance-scorer intermediates for one input.
pub struct ScorerPass {
    /// Relevance-encoder outputs over the table region, `n x d`.
    pub h_table: Var,
    pub relevance: RelevanceOutput,
    /// Soft cluster assignments, `n x 2`.
    pub q: Var,
}

pub struct EncodedPass {
    pub memory: Var,
    pub scorer: Option<ScorerPass>,
    /// Fused score applied to the table region, if any.
    pub eta: Option<Var>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, vocabulary {vocabulary}")]
    VocabMismatch { checkpoint: String, vocabulary: String },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab_hash: String,
    pub dims: Dims,
    pub vocab_size: usize,
    /// Training configuration that produced the parameters.
    pub config: serde_json::Value,
    pub params: Vec<NamedTensor>,
}

#[derive(Clone, Debug)]
pub struct GatedQaModel<T> {
    pub dims: Dims,
    pub vocab_size: usize,
    pub store: ParamStore<T>,
    pub token_embedding: ParamId,
    pub encoder_positions: ParamId,
    pub decoder_positions: ParamId,
    pub output_bias: ParamId,
    pub relevance_encoder: Encoder,
    pub head: VariationalHead,
    pub clusters: ClusterState,
    pub qa_encoder: Encoder,
    pub decoder: Decoder,
}

fn sinusoidal<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(n, d);
    for p in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * rate;
            t.set(p, i, T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    t
}

impl<T: Scalar> GatedQaModel<T> {
    pub fn new(dims: Dims, vocab_size: usize, seed: u64) -> Self {
        assert!(dims.d_model.is_multiple_of(dims.heads), "d_model must be divisible by heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dims.d_model;
        let token_embedding = store.add(
            "embedding.tokens",
            ParamGroup::Embedding,
            Tensor::randn(vocab_size, d, 1.0, &mut rng),
        );
        let encoder_positions = store.add(
            "embedding.encoder_positions",
            ParamGroup::Embedding,
            sinusoidal(dims.max_positions, d),
        );
        let decoder_positions = store.add(
            "embedding.decoder_positions",
            ParamGroup::Embedding,
            sinusoidal(dims.max_answer_len + 1, d),
        );
        let qa_encoder = Encoder::new(&mut store, "qa_encoder", ParamGroup::QaEncoder, &dims, &mut rng);
        let relevance_encoder = Encoder::new(
            &mut store,
            "relevance_encoder",
            ParamGroup::RelevanceEncoder,
            &dims,
            &mut rng,
        );
        for (dst, src) in relevance_encoder.param_ids().into_iter().zip(qa_encoder.param_ids()) {
            *store.get_mut(dst) = store.get(src).clone();
        }
        let head = VariationalHead::new(&mut store, d, &mut rng);
        let clusters = ClusterState::new(&mut store, d, &mut rng);
        let decoder = Decoder::new(&mut store, "decoder", ParamGroup::QaDecoder, &dims, &mut rng);
        let output_bias = store.add("decoder.output_bias", ParamGroup::QaDecoder, Tensor::zeros(1, vocab_size));
        Self {
            dims,
            vocab_size,
            store,
            token_embedding,
            encoder_positions,
            decoder_positions,
            output_bias,
            relevance_encoder,
            head,
            clusters,
            qa_encoder,
            decoder,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(self.store.tensors(), self.store.trainable())
    }

    fn embed(&self, g: &mut Graph<'_, T>, ids: &[u32], positions: ParamId) -> Var {
        let table = g.param(self.token_embedding.0);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        assert!(idx.iter().all(|&i| i < self.vocab_size), "token id out of range");
        let tok = g.gather(table, &idx);
        let pos_table = g.param(positions.0);
        let pos = g.slice_rows(pos_table, 0, ids.len());
        g.add(tok, pos)
    }

    /// Token plus positional embedding of encoder input `ids`, shared by
    /// both encoders.
    pub fn embed_input(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Var {
        assert!(ids.len() <= self.dims.max_positions, "input longer than max_positions");
        self.embed(g, ids, self.encoder_positions)
    }

    /// Relevance-encoder pass over `e` followed by the head and clustering.
    pub fn score_pass(&self, g: &mut Graph<'_, T>, e: Var, boundary: usize, noise: &Noise) -> ScorerPass {
        let h = self.relevance_encoder.forward(g, e);
        let n = g.value(h).rows();
        assert!(boundary < n, "table region must be non-empty");
        let h_table = g.slice_rows(h, boundary, n - boundary);
        let relevance = relevance_forward(g, h_table, &self.head, noise);
        let mu = g.param(self.clusters.centroids.0);
        let q = soft_assign(g, h_table, mu, self.clusters.alpha);
        ScorerPass {
            h_table,
            relevance,
            q,
        }
    }

    pub fn encode(&self, g: &mut Graph<'_, T>, input: &ModelInput<'_>, opts: &ForwardOptions) -> EncodedPass {
        let t = input.table_len();
        assert_eq!(input.eta_cell.len(), t, "cell scores must cover the table region");
        let e = self.embed_input(g, input.ids);
        let scorer = (opts.score || opts.gate == GateMode::Learned)
            .then(|| self.score_pass(g, e, input.boundary, &opts.noise));
        let eta = match opts.gate {
            GateMode::Ones => None,
            GateMode::Learned => {
                let uns = scorer.as_ref().map(|s| s.relevance.eta_uns).expect("scorer ran");
                Some(fuse_scores_var(g, uns, input.eta_cell, opts.fusion))
            }
            GateMode::Overlap => {
                assert_eq!(input.overlap.len(), t, "overlap scores must cover the table region");
                let ov = g.constant(Tensor::column(input.overlap.iter().map(|&x| T::of(x)).collect()));
                Some(fuse_scores_var(g, ov, input.eta_cell, opts.fusion))
            }
        };
        let e_qa = match eta {
            Some(eta) => scale_embeddings(g, e, eta, input.boundary),
            None => e,
        };
        let memory = self.qa_encoder.forward(g, e_qa);
        EncodedPass { memory, scorer, eta }
    }

    /// Decoder logits (`len(prefix) x V`) for a prefix that starts with the
    /// begin-of-answer token.
    pub fn decoder_logits(&self, g: &mut Graph<'_, T>, memory: Var, prefix: &[u32]) -> Var {
        assert!(prefix.len() <= self.dims.max_answer_len + 1, "decoder prefix too long");
        let x = self.embed(g, prefix, self.decoder_positions);
        let h = self.decoder.forward(g, x, memory);
        let emb = g.param(self.token_embedding.0);
        let logits = g.matmul_t(h, emb);
        let logits = g.scale(logits, T::one() / T::of(self.dims.d_model as f64).sqrt());
        let bias = g.param(self.output_bias.0);
        g.add_row(logits, bias)
    }

    /// Answer ids truncated to the decoder length.
    pub fn clip_answer<'a>(&self, answer: &'a [u32]) -> &'a [u32] {
        &answer[..answer.len().min(self.dims.max_answer_len)]
    }

    /// Teacher-forced mean cross-entropy of `answer` followed by end-of-answer.
    pub fn answer_loss(&self, g: &mut Graph<'_, T>, memory: Var, answer: &[u32]) -> Var {
        let answer = self.clip_answer(answer);
        let mut prefix = vec![BOA_ID];
        prefix.extend_from_slice(answer);
        let mut targets: Vec<Option<usize>> = answer.iter().map(|&a| Some(a as usize)).collect();
        targets.push(Some(EOA_ID as usize));
        let logits = self.decoder_logits(g, memory, &prefix);
        g.cross_entropy(logits, &targets)
    }

    /// Beam-search decoding; `beam = 1` is greedy. Stops at end-of-answer or
    /// `max_len` tokens, whichever comes first.
    pub fn generate(&self, input: &ModelInput<'_>, opts: &ForwardOptions, max_len: usize, beam: usize) -> Vec<u32> {
        let max_len = max_len.min(self.dims.max_answer_len);
        if max_len == 0 {
            return Vec::new();
        }
        let mut g = self.graph();
        let enc = self.encode(&mut g, input, opts);
        self.decode_from(&mut g, enc.memory, max_len, beam.max(1))
    }

    fn decode_from(&self, g: &mut Graph<'_, T>, memory: Var, max_len: usize, beam: usize) -> Vec<u32> {
        // (tokens after BOA, log-probability, finished)
        let mut beams: Vec<(Vec<u32>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut candidates: Vec<(Vec<u32>, f64, bool)> = Vec::new();
            for (tokens, lp, done) in &beams {
                if *done {
                    candidates.push((tokens.clone(), *lp, true));
                    continue;
                }
                let mut prefix = vec![BOA_ID];
                prefix.extend_from_slice(tokens);
                let logits = self.decoder_logits(g, memory, &prefix);
                let last: Vec<f64> = g.value(logits).row(prefix.len() - 1).iter().map(|x| x.as_f64()).collect();
                let logp = log_softmax(&last);
                for (id, l) in top_k(&logp, beam) {
                    let mut next = tokens.clone();
                    let finished = id as u32 == EOA_ID;
                    if !finished {
                        next.push(id as u32);
                    }
                    candidates.push((next, lp + l, finished));
                }
            }
            candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            candidates.truncate(beam);
            beams = candidates;
        }
        beams.into_iter().next().map(|b| b.0).unwrap_or_default()
    }

    /// Evaluation-mode scores over the table region.
    pub fn relevance_scores(&self, input: &ModelInput<'_>, fusion: FusionWeights) -> RelevanceVector {
        let mut g = self.graph();
        let e = self.embed_input(&mut g, input.ids);
        let pass = self.score_pass(&mut g, e, input.boundary, &Noise::Zero);
        let eta_uns = g.value(pass.relevance.eta_uns).to_f64_vec();
        let z = g.value(pass.relevance.z).to_f64_vec();
        let eta = crate::relevance::fuse_scores(&eta_uns, input.eta_cell, fusion).expect("aligned scores");
        RelevanceVector {
            eta_uns,
            eta_cell: input.eta_cell.to_vec(),
            eta,
            z,
            question_boundary: input.boundary,
        }
    }

    /// Relevance-encoder latents of the table region, `n x d`.
    pub fn table_latents(&self, input: &ModelInput<'_>) -> Tensor<T> {
        let mut g = self.graph();
        let e = self.embed_input(&mut g, input.ids);
        let pass = self.score_pass(&mut g, e, input.boundary, &Noise::Zero);
        g.value(pass.h_table).clone()
    }

    pub fn to_checkpoint(&self, vocab_hash: &str, config: serde_json::Value) -> Checkpoint {
        let params = self
            .store
            .ids()
            .map(|id| {
                let t = self.store.get(id);
                NamedTensor {
                    name: self.store.name(id).to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.to_f64_vec(),
                }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab_hash.to_string(),
            dims: self.dims,
            vocab_size: self.vocab_size,
            config,
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, vocab_hash: &str) -> Result<Self, CheckpointError> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if ckpt.vocab_hash != vocab_hash {
            return Err(CheckpointError::VocabMismatch {
                checkpoint: ckpt.vocab_hash.clone(),
                vocabulary: vocab_hash.to_string(),
            });
        }
        let mut model = Self::new(ckpt.dims, ckpt.vocab_size, 0);
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let saved = ckpt
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = model.store.get(id).shape();
            if (saved.rows, saved.cols) != expected || saved.data.len() != saved.rows * saved.cols {
                return Err(CheckpointError::Shape {
                    name,
                    found: (saved.rows, saved.cols),
                    expected,
                });
            }
            *model.store.get_mut(id) = Tensor::from_f64(saved.rows, saved.cols, &saved.data);
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> GatedQaModel<U> {
        GatedQaModel {
            dims: self.dims,
            vocab_size: self.vocab_size,
            store: self.store.cast(),
            token_embedding: self.token_embedding,
            encoder_positions: self.encoder_positions,
            decoder_positions: self.decoder_positions,
            output_bias: self.output_bias,
            relevance_encoder: self.relevance_encoder.clone(),
            head: self.head.clone(),
            clusters: self.clusters.clone(),
            qa_encoder: self.qa_encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Indices of the `k` largest entries, best first; ties go to the lower index.
fn top_k(x: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, x[i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dims {
        Dims {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            max_positions: 32,
            max_answer_len: 4,
        }
    }

    #[test]
    fn relevance_encoder_starts_as_copy_of_qa_encoder() {
        let m = GatedQaModel::<f64>::new(tiny(), 20, 3);
        for (a, b) in m.relevance_encoder.param_ids().into_iter().zip(m.qa_encoder.param_ids()) {
            assert_eq!(m.store.get(a), m.store.get(b));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn both_encoders_embed_through_the_same_table() {
        let m = GatedQaModel::<f64>::new(tiny(), 20, 3);
        let mut g = m.graph();
        let a = m.embed_input(&mut g, &[9, 10, 11]);
        let b = m.embed_input(&mut g, &[9, 10, 11]);
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(g.value(a).shape(), (3, 8));
    }

    #[test]
    fn zero_length_and_beam_one_decoding() {
        let m = GatedQaModel::<f64>::new(tiny(), 20, 5);
        let ids = [9u32, 10, 4, 12, 13];
        let cell = vec![0.0; 3];
        let input = ModelInput {
            ids: &ids,
            boundary: 2,
            eta_cell: &cell,
            overlap: &cell,
        };
        let opts = ForwardOptions::eval(GateMode::Learned, FusionWeights::default());
        assert!(m.generate(&input, &opts, 0, 1).is_empty());
        let greedy = m.generate(&input, &opts, 4, 1);
        // explicit argmax loop
        let mut g = m.graph();
        let enc = m.encode(&mut g, &input, &opts);
        let mut out = Vec::new();
        for _ in 0..4 {
            let mut prefix = vec![BOA_ID];
            prefix.extend_from_slice(&out);
            let l = m.decoder_logits(&mut g, enc.memory, &prefix);
            let row = g.value(l).row(prefix.len() - 1).to_vec();
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u32;
            if best == EOA_ID {
                break;
            }
            out.push(best);
        }
        assert_eq!(greedy, out);
        assert!(m.generate(&input, &opts, 4, 3).len() <= 4);
    }

    #[test]
    fn checkpoint_round_trip_and_vocab_guard() {
        let m = GatedQaModel::<f64>::new(tiny(), 20, 7);
        let ck = m.to_checkpoint("abc", serde_json::json!({"seed": 7}));
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let m2 = GatedQaModel::<f64>::from_checkpoint(&back, "abc").unwrap();
        assert_eq!(m2.store.tensors(), m.store.tensors());
        assert!(matches!(
            GatedQaModel::<f64>::from_checkpoint(&back, "xyz"),
            Err(CheckpointError::VocabMismatch { .. })
        ));
    }
}
