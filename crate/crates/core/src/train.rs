//! End-to-end training of the relevance scorer and QA model, evaluation and
//! ablation grids.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::highlight::{highlight, highlight_question};
use crate::model::{ForwardOptions, GateMode, GatedQaModel, ModelInput};
use crate::nn::{learning_rate, Dims, Graph, Optimizer, OptimizerKind, ParamGroup, SchedulerKind, Tensor, Var};
use crate::perturb::{perturb_example, relative_drop, PerturbationSpec};
use crate::relevance::{
    clustering_loss, overlap_baseline_score, separation_loss, sparsification_loss, target_distribution, two_means,
    FusionWeights, Noise, RelevanceError,
};
use crate::scalar::Scalar;
use crate::synth::{size_bin, AnswerType, Numericity, Operation, QaExample, TaskKind};
use crate::table::{flatten_table, tokenize_linearize, TokenTag};
use crate::vocab::{canonical, Vocabulary};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const HISTOGRAM_BUCKETS: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: &'static str },
    #[error("training diverged at step {step}: loss {loss} stayed above 10x the initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
}

/// Which input drives the cell highlighter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HighlightSource {
    #[default]
    Statement,
    Question,
}

/// Flat training configuration; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps, 0 for none.
    pub max_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub scheduler: SchedulerKind,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Global gradient-norm clip, 0 for none.
    pub grad_clip: f64,
    pub lambda_clu: f64,
    pub lambda_sep: f64,
    pub lambda_sparse: f64,
    pub lambda_uns: f64,
    pub lambda_cell: f64,
    pub gate: GateMode,
    pub highlighter: HighlightSource,
    /// Keep the relevance scorer's parameters fixed.
    pub freeze_scorer: bool,
    pub seed: u64,
    /// Steps between evaluations on the held-out set, 0 for none.
    pub eval_interval: usize,
    pub beam: usize,
    pub checkpoint_path: Option<String>,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub max_answer_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = Dims::default();
        Self {
            epochs: 20,
            batch_size: 32,
            max_steps: 0,
            learning_rate: 3e-4,
            warmup_steps: 0,
            scheduler: SchedulerKind::Cosine,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            grad_clip: 1.0,
            lambda_clu: 1.0,
            lambda_sep: 1.0,
            lambda_sparse: 1.0,
            lambda_uns: 0.7,
            lambda_cell: 0.3,
            gate: GateMode::Learned,
            highlighter: HighlightSource::Statement,
            freeze_scorer: false,
            seed: 0,
            eval_interval: 0,
            beam: 1,
            checkpoint_path: None,
            d_model: dims.d_model,
            heads: dims.heads,
            d_ff: dims.d_ff,
            encoder_layers: dims.encoder_layers,
            decoder_layers: dims.decoder_layers,
            max_positions: dims.max_positions,
            max_answer_len: dims.max_answer_len,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_positions: self.max_positions,
            max_answer_len: self.max_answer_len,
        }
    }

    pub fn fusion(&self) -> FusionWeights {
        FusionWeights {
            uns: self.lambda_uns,
            cell: self.lambda_cell,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            clu: self.lambda_clu,
            sep: self.lambda_sep,
            sparse: self.lambda_sparse,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        let lambdas = [
            self.lambda_clu,
            self.lambda_sep,
            self.lambda_sparse,
            self.lambda_uns,
            self.lambda_cell,
        ];
        if lambdas.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return err("loss weights must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if self.d_model < 2 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err("d_model must be at least 2 and divisible by heads");
        }
        if self.max_positions < 8 || self.max_answer_len == 0 {
            return err("max_positions must be at least 8 and max_answer_len at least 1");
        }
        if self.beam == 0 {
            return err("beam must be at least 1");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    fn scorer_needed(&self) -> bool {
        self.gate == GateMode::Learned || self.weights().any()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clu: f64,
    pub sep: f64,
    pub sparse: f64,
}

impl LossWeights {
    pub fn any(&self) -> bool {
        self.clu > 0.0 || self.sep > 0.0 || self.sparse > 0.0
    }
}

/// An example turned into model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: usize,
    pub ids: Vec<u32>,
    pub boundary: usize,
    pub tags: Vec<TokenTag>,
    pub eta_cell: Vec<f64>,
    pub overlap: Vec<f64>,
    /// Table tokens belonging to gold cells.
    pub gold_mask: Vec<bool>,
    pub answer: Vec<u32>,
    pub answer_text: String,
    pub size_bin: usize,
    pub answer_type: AnswerType,
    pub task_kind: TaskKind,
}

impl Prepared {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            ids: &self.ids,
            boundary: self.boundary,
            eta_cell: &self.eta_cell,
            overlap: &self.overlap,
        }
    }

    pub fn table_len(&self) -> usize {
        self.ids.len() - self.boundary
    }
}

/// Every token that can occur in `examples`, plus the integers 0..=999 so
/// aggregate answers absent from the tables stay representable.
pub fn build_vocabulary(examples: &[QaExample]) -> Vocabulary {
    let numbers: String = (0..1000).map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    let mut texts = vec![numbers];
    for ex in examples {
        texts.push(flatten_table(&ex.table));
        texts.push(ex.question.clone());
        texts.push(ex.answer.clone());
    }
    Vocabulary::build(texts.iter().map(String::as_str))
}

pub fn prepare(ex: &QaExample, vocab: &Vocabulary, max_positions: usize, source: HighlightSource) -> Prepared {
    let enc = tokenize_linearize(&ex.table, &ex.question, vocab);
    let lin = &enc.table;
    let hl = match source {
        HighlightSource::Statement => highlight(&ex.table, lin, &ex.parsing_statement),
        HighlightSource::Question => highlight_question(&ex.table, lin, &ex.question),
    };
    let overlap = overlap_baseline_score(&ex.question, lin);
    let gold_mask: Vec<bool> = lin
        .token_cell_map
        .iter()
        .map(|t| t.cell().is_some_and(|c| ex.gold_cells.contains(&c)))
        .collect();
    let mut boundary = enc.boundary;
    let mut ids = enc.ids.clone();
    let mut keep = lin.len();
    if ids.len() > max_positions {
        // Keep at least one table token; trim the question only if forced to.
        boundary = boundary.min(max_positions - 1);
        keep = max_positions - boundary;
        let mut q = enc.ids[..boundary].to_vec();
        q.extend_from_slice(&enc.ids[enc.boundary..enc.boundary + keep]);
        ids = q;
        log::debug!("example {} truncated to {} tokens", ex.id, max_positions);
    }
    Prepared {
        id: ex.id,
        ids,
        boundary,
        tags: lin.token_cell_map[..keep].to_vec(),
        eta_cell: hl.eta_cell[..keep].to_vec(),
        overlap: overlap[..keep].to_vec(),
        gold_mask: gold_mask[..keep].to_vec(),
        answer: vocab.encode(&ex.answer),
        answer_text: canonical(&ex.answer),
        size_bin: size_bin(&ex.table),
        answer_type: ex.answer_type,
        task_kind: ex.task_kind,
    }
}

pub fn prepare_all(examples: &[QaExample], vocab: &Vocabulary, cfg: &TrainConfig) -> Vec<Prepared> {
    examples
        .iter()
        .map(|ex| prepare(ex, vocab, cfg.max_positions, cfg.highlighter))
        .collect()
}

/// Graph nodes of one example's loss terms before the clustering term.
pub struct LossParts {
    pub ce: Var,
    pub q: Option<Var>,
    pub sparse: Option<Var>,
    pub sep: Option<Var>,
}

pub fn forward_options(cfg: &TrainConfig, noise: Noise) -> ForwardOptions {
    ForwardOptions {
        gate: cfg.gate,
        fusion: cfg.fusion(),
        noise,
        score: cfg.scorer_needed(),
    }
}

/// Records the answer loss and the enabled auxiliary terms of one example.
pub fn loss_parts<T: Scalar>(
    model: &GatedQaModel<T>,
    g: &mut Graph<'_, T>,
    ex: &Prepared,
    cfg: &TrainConfig,
    noise: Noise,
) -> Result<LossParts, TrainError> {
    let opts = forward_options(cfg, noise);
    let enc = model.encode(g, &ex.input(), &opts);
    let ce = model.answer_loss(g, enc.memory, &ex.answer);
    let w = cfg.weights();
    let (mut q, mut sparse, mut sep) = (None, None, None);
    if let Some(s) = &enc.scorer {
        if w.clu > 0.0 {
            q = Some(s.q);
        }
        if w.sparse > 0.0 {
            sparse = Some(sparsification_loss(g, s.relevance.z)?);
        }
        if w.sep > 0.0 {
            let mu = g.param(model.clusters.centroids.0);
            sep = Some(separation_loss(g, mu)?);
        }
    }
    Ok(LossParts { ce, q, sparse, sep })
}

/// Per-example share of the batch loss:
/// `ce/B + clu_clu * KL_i/B + l_sep * sep/B + l_sparse * sparse_i/B`.
/// Returns the total node and the clustering node.
pub fn assemble_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    parts: &LossParts,
    w: LossWeights,
    target: Option<&Tensor<T>>,
    batch_size: usize,
) -> (Var, Option<Var>) {
    let inv_b = T::one() / T::of(batch_size as f64);
    let mut total = g.scale(parts.ce, inv_b);
    let mut clu = None;
    if let (Some(q), Some(z)) = (parts.q, target) {
        let l = clustering_loss(g, q, z, batch_size);
        let term = g.scale(l, T::of(w.clu));
        total = g.add(total, term);
        clu = Some(l);
    }
    if let Some(s) = parts.sep {
        let term = g.scale(s, T::of(w.sep) * inv_b);
        total = g.add(total, term);
    }
    if let Some(s) = parts.sparse {
        let term = g.scale(s, T::of(w.sparse) * inv_b);
        total = g.add(total, term);
    }
    (total, clu)
}

/// Batch-level loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub clu: f64,
    pub sep: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossComponents {
    fn check(&self, step: usize) -> Result<(), TrainError> {
        for (v, name) in [
            (self.ce, "cross-entropy"),
            (self.clu, "clustering loss"),
            (self.sep, "separation loss"),
            (self.sparse, "sparsification loss"),
            (self.total, "total loss"),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step, component: name });
            }
        }
        Ok(())
    }
}

/// Total loss from its components under weights `w`.
pub fn total_loss(c: &LossComponents, w: LossWeights) -> f64 {
    c.ce + w.clu * c.clu + w.sep * c.sep + w.sparse * c.sparse
}

/// Normal draws for every table token of `ex`, or zeros when the scorer is off.
fn draw_noise<R: Rng + ?Sized>(ex: &Prepared, cfg: &TrainConfig, rng: &mut R) -> Noise {
    if cfg.scorer_needed() {
        Noise::Given((0..ex.table_len()).map(|_| rng.sample(StandardNormal)).collect())
    } else {
        Noise::Zero
    }
}

/// One optional gradient per parameter tensor.
pub type ParamGrads<T> = Vec<Option<Tensor<T>>>;

/// Loss and parameter gradients of one batch. The clustering target is
/// computed once from the soft assignments of every table token in the batch.
pub fn batch_gradients<T: Scalar>(
    model: &GatedQaModel<T>,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    noises: Vec<Noise>,
) -> Result<(LossComponents, ParamGrads<T>), TrainError> {
    let b = batch.len();
    let w = cfg.weights();
    let mut graphs = Vec::with_capacity(b);
    for (ex, noise) in batch.iter().zip(noises) {
        let mut g = model.graph();
        let parts = loss_parts(model, &mut g, ex, cfg, noise)?;
        graphs.push((g, parts));
    }
    let targets: Vec<Option<Tensor<T>>> = if graphs.iter().all(|(_, p)| p.q.is_some()) && w.clu > 0.0 {
        let qs: Vec<&Tensor<T>> = graphs.iter().map(|(g, p)| g.value(p.q.expect("checked"))).collect();
        let rows: usize = qs.iter().map(|q| q.rows()).sum();
        let mut data = Vec::with_capacity(rows * 2);
        for q in &qs {
            data.extend_from_slice(q.data());
        }
        let z = target_distribution(&Tensor::from_vec(rows, 2, data));
        let mut start = 0;
        qs.iter()
            .map(|q| {
                let part = z.slice_rows(start, q.rows());
                start += q.rows();
                Some(part)
            })
            .collect()
    } else {
        vec![None; b]
    };
    let mut comps = LossComponents::default();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.store.len()];
    for ((mut g, parts), target) in graphs.into_iter().zip(targets) {
        let (total, clu) = assemble_loss(&mut g, &parts, w, target.as_ref(), b);
        let bf = b as f64;
        comps.ce += g.value(parts.ce).item().as_f64() / bf;
        comps.clu += clu.map_or(0.0, |c| g.value(c).item().as_f64());
        comps.sep += parts.sep.map_or(0.0, |s| g.value(s).item().as_f64() / bf);
        comps.sparse += parts.sparse.map_or(0.0, |s| g.value(s).item().as_f64() / bf);
        comps.total += g.value(total).item().as_f64();
        let eg = g.backward(total).into_param_grads();
        for (acc, gi) in grads.iter_mut().zip(eg) {
            match (acc.as_mut(), gi) {
                (Some(a), Some(gi)) => a.add_assign(&gi),
                (None, Some(gi)) => *acc = Some(gi),
                _ => {}
            }
        }
    }
    Ok((comps, grads))
}

fn clip_gradients<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
}

pub struct TrainOutcome<T> {
    pub model: GatedQaModel<T>,
    pub curve: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
}

/// Initializes the centroids by 2-means over the relevance-encoder latents
/// of the table tokens in `batch`.
pub fn init_centroids<T: Scalar, R: Rng + ?Sized>(model: &mut GatedQaModel<T>, batch: &[&Prepared], rng: &mut R) {
    let latents: Vec<Tensor<T>> = batch.iter().map(|ex| model.table_latents(&ex.input())).collect();
    let rows: usize = latents.iter().map(|t| t.rows()).sum();
    let d = model.dims.d_model;
    let mut data = Vec::with_capacity(rows * d);
    for t in &latents {
        data.extend_from_slice(t.data());
    }
    let centroids = two_means(&Tensor::from_vec(rows, d, data), 20, rng);
    *model.store.get_mut(model.clusters.centroids) = centroids;
}

/// Trains a fresh model on `train`.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train: &[Prepared],
    held_out: Option<&[Prepared]>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let model = GatedQaModel::<T>::new(cfg.dims(), vocab.len(), cfg.seed);
    train_model(model, cfg, train, held_out)
}

/// Continues training `model` on `train` under `cfg`.
pub fn train_model<T: Scalar>(
    mut model: GatedQaModel<T>,
    cfg: &TrainConfig,
    train: &[Prepared],
    held_out: Option<&[Prepared]>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f7a_b1e5);
    if cfg.freeze_scorer {
        model.store.set_trainable_where(ParamGroup::is_relevance_scorer, false);
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * batches_per_epoch;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, &model.store);
    let mut curve = Vec::with_capacity(total_steps);
    let mut evals = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut initial: Option<f64> = None;
    let mut above = 0usize;
    let mut step = 0usize;
    'outer: for epoch in 0.. {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            if step == 0 && cfg.scorer_needed() && !cfg.freeze_scorer {
                init_centroids(&mut model, &batch, &mut rng);
            }
            let noises = batch.iter().map(|ex| draw_noise(ex, cfg, &mut rng)).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch, cfg, noises)?;
            loss.check(step)?;
            let grad_norm = clip_gradients(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    component: "gradient",
                });
            }
            let lr = learning_rate(cfg.scheduler, cfg.learning_rate, step, total_steps, cfg.warmup_steps);
            opt.step(&mut model.store, &grads, lr);
            if !model.store.all_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    component: "parameters",
                });
            }
            let init = *initial.get_or_insert(loss.total);
            if loss.total > 10.0 * init.abs() {
                above += 1;
                if above >= 100 {
                    return Err(TrainError::Diverged {
                        step,
                        loss: loss.total,
                        initial: init,
                    });
                }
            } else {
                above = 0;
            }
            log::debug!("step {step} loss {:.5} ce {:.5}", loss.total, loss.ce);
            curve.push(StepRecord {
                step,
                epoch,
                lr,
                grad_norm,
                loss,
            });
            step += 1;
            if let Some(h) = held_out {
                if cfg.eval_interval > 0 && step.is_multiple_of(cfg.eval_interval) {
                    let accuracy = accuracy(&model, h, &eval_options(cfg));
                    log::info!("step {step}: held-out accuracy {accuracy:.2}");
                    evals.push(EvalPoint { step, accuracy });
                }
            }
        }
    }
    Ok(TrainOutcome { model, curve, evals })
}

/// Normalizes whitespace, case and tokenization before comparing.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    canonical(&pred.to_lowercase()) == canonical(&gold.to_lowercase())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub forward: ForwardOptions,
    pub beam: usize,
}

pub fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        forward: ForwardOptions::eval(cfg.gate, cfg.fusion()),
        beam: cfg.beam,
    }
}

pub fn predict<T: Scalar>(model: &GatedQaModel<T>, ex: &Prepared, opts: &EvalOptions) -> Vec<u32> {
    model.generate(&ex.input(), &opts.forward, model.dims.max_answer_len, opts.beam)
}

pub fn correct<T: Scalar>(model: &GatedQaModel<T>, ex: &Prepared, opts: &EvalOptions, vocab: Option<&Vocabulary>) -> bool {
    let pred = predict(model, ex, opts);
    match vocab {
        Some(v) => exact_match(&v.decode(&pred), &ex.answer_text),
        None => {
            let gold = model.clip_answer(&ex.answer);
            pred == gold && gold.len() == ex.answer.len()
        }
    }
}

/// Exact-match accuracy in percent, comparing token ids.
pub fn accuracy<T: Scalar>(model: &GatedQaModel<T>, data: &[Prepared], opts: &EvalOptions) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.iter().filter(|ex| correct(model, ex, opts, None)).count();
    100.0 * hits as f64 / data.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl GroupAccuracy {
    fn add(&mut self, hit: bool) {
        self.n += 1;
        self.correct += usize::from(hit);
        self.accuracy = 100.0 * self.correct as f64 / self.n as f64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDiagnostics {
    /// Fused score averaged over tokens of gold cells.
    pub mean_eta_gold: f64,
    /// Fused score averaged over tokens of other cells (markers excluded).
    pub mean_eta_non_gold: f64,
    pub mean_eta_uns_gold: f64,
    pub mean_eta_uns_non_gold: f64,
    /// Counts of the learned score over all table tokens in 20 equal buckets.
    pub histogram: Vec<usize>,
    /// Fraction of learned scores in [0.4, 0.6].
    pub mid_fraction: f64,
    pub token_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub spec: PerturbationSpec,
    pub accuracy: f64,
    /// Relative drop in percent; `None` when clean accuracy is zero.
    pub relative_drop: Option<f64>,
    /// Examples skipped because the perturbation could not be applied.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n: usize,
    pub accuracy: f64,
    pub per_size_bin: BTreeMap<usize, GroupAccuracy>,
    pub per_answer_type: BTreeMap<String, GroupAccuracy>,
    pub per_task: BTreeMap<String, GroupAccuracy>,
    pub relevance: Option<RelevanceDiagnostics>,
    pub perturbations: Vec<PerturbationResult>,
}

fn type_keys(t: AnswerType) -> [&'static str; 2] {
    [
        match t.numericity {
            Numericity::Numeric => "numeric",
            Numericity::NonNumeric => "non-numeric",
        },
        match t.operation {
            Operation::Retrieval => "retrieval",
            Operation::Aggregation => "aggregation",
        },
    ]
}

fn task_key(k: TaskKind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Bucket counts of `values` in `[0, 1]`, `buckets` equal-width bins.
pub fn histogram(values: &[f64], buckets: usize) -> Vec<usize> {
    let mut h = vec![0; buckets];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * buckets as f64) as usize).min(buckets - 1);
        h[i] += 1;
    }
    h
}

pub fn relevance_diagnostics<T: Scalar>(model: &GatedQaModel<T>, data: &[Prepared], fusion: FusionWeights) -> RelevanceDiagnostics {
    let (mut g, mut ng, mut ug, mut ung) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut all = Vec::new();
    for ex in data {
        let rv = model.relevance_scores(&ex.input(), fusion);
        for (i, tag) in ex.tags.iter().enumerate() {
            all.push(rv.eta_uns[i]);
            if tag.cell().is_none() {
                continue;
            }
            if ex.gold_mask[i] {
                g.push(rv.eta[i]);
                ug.push(rv.eta_uns[i]);
            } else {
                ng.push(rv.eta[i]);
                ung.push(rv.eta_uns[i]);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mid = all.iter().filter(|&&x| (0.4..=0.6).contains(&x)).count();
    RelevanceDiagnostics {
        mean_eta_gold: mean(&g),
        mean_eta_non_gold: mean(&ng),
        mean_eta_uns_gold: mean(&ug),
        mean_eta_uns_non_gold: mean(&ung),
        histogram: histogram(&all, HISTOGRAM_BUCKETS),
        mid_fraction: if all.is_empty() { 0.0 } else { mid as f64 / all.len() as f64 },
        token_count: all.len(),
    }
}

/// Evaluates `model` on `examples`, then on each perturbed copy of them.
pub fn evaluate<T: Scalar>(
    model: &GatedQaModel<T>,
    vocab: &Vocabulary,
    examples: &[QaExample],
    cfg: &TrainConfig,
    perturbations: &[PerturbationSpec],
    donors: &[crate::table::Table],
) -> EvalReport {
    let data = prepare_all(examples, vocab, cfg);
    let opts = eval_options(cfg);
    let mut hits = 0usize;
    let mut per_size_bin: BTreeMap<usize, GroupAccuracy> = BTreeMap::new();
    let mut per_answer_type: BTreeMap<String, GroupAccuracy> = BTreeMap::new();
    let mut per_task: BTreeMap<String, GroupAccuracy> = BTreeMap::new();
    for ex in &data {
        let hit = correct(model, ex, &opts, Some(vocab));
        hits += usize::from(hit);
        per_size_bin.entry(ex.size_bin).or_default().add(hit);
        for k in type_keys(ex.answer_type) {
            per_answer_type.entry(k.to_string()).or_default().add(hit);
        }
        per_task.entry(task_key(ex.task_kind)).or_default().add(hit);
    }
    let clean = if data.is_empty() { 0.0 } else { 100.0 * hits as f64 / data.len() as f64 };
    let relevance = (!data.is_empty()).then(|| relevance_diagnostics(model, &data, cfg.fusion()));
    let perturbations = perturbations
        .iter()
        .map(|spec| {
            let mut skipped = 0;
            let perturbed: Vec<QaExample> = examples
                .iter()
                .filter_map(|ex| match perturb_example(ex, spec, donors) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        log::warn!("example {} not perturbed: {e}", ex.id);
                        skipped += 1;
                        None
                    }
                })
                .collect();
            let pdata = prepare_all(&perturbed, vocab, cfg);
            let hits = pdata.iter().filter(|ex| correct(model, ex, &opts, Some(vocab))).count();
            let acc = if pdata.is_empty() { 0.0 } else { 100.0 * hits as f64 / pdata.len() as f64 };
            PerturbationResult {
                spec: *spec,
                accuracy: acc,
                relative_drop: relative_drop(clean, acc),
                skipped,
            }
        })
        .collect();
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n: data.len(),
        accuracy: clean,
        per_size_bin,
        per_answer_type,
        per_task,
        relevance,
        perturbations,
    }
}

/// One line of the relevance score dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: usize,
    pub eta_uns: Vec<f64>,
    pub eta_cell: Vec<f64>,
    pub eta: Vec<f64>,
    /// Token tags: `h`, `r<k>`, `s` or `c<row>:<col>`.
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<Vec<f64>>>,
}

pub fn score_records<T: Scalar>(model: &GatedQaModel<T>, data: &[Prepared], fusion: FusionWeights, latents: bool) -> Vec<ScoreRecord> {
    data.iter()
        .map(|ex| {
            let rv = model.relevance_scores(&ex.input(), fusion);
            let lat = latents.then(|| {
                let h = model.table_latents(&ex.input());
                (0..h.rows())
                    .map(|r| h.row(r).iter().map(|x| x.as_f64()).collect())
                    .collect()
            });
            ScoreRecord {
                example_id: ex.id,
                eta_uns: rv.eta_uns,
                eta_cell: rv.eta_cell,
                eta: rv.eta,
                tokens: ex.tags.iter().map(TokenTag::code).collect(),
                latents: lat,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Loss toggles with the cell scores off.
    Table4,
    /// Fusion weights with every loss on.
    Table5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub label: String,
    pub lambda_clu: f64,
    pub lambda_sep: f64,
    pub lambda_sparse: f64,
    pub lambda_uns: f64,
    pub lambda_cell: f64,
}

impl AblationSetting {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lambda_clu: self.lambda_clu,
            lambda_sep: self.lambda_sep,
            lambda_sparse: self.lambda_sparse,
            lambda_uns: self.lambda_uns,
            lambda_cell: self.lambda_cell,
            gate: GateMode::Learned,
            ..base.clone()
        }
    }
}

pub fn grid_settings(grid: Grid) -> Vec<AblationSetting> {
    match grid {
        Grid::Table4 => [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
            .into_iter()
            .map(|(c, s, p)| AblationSetting {
                label: format!("clu={c} sep={s} sparse={p}"),
                lambda_clu: c as f64,
                lambda_sep: s as f64,
                lambda_sparse: p as f64,
                lambda_uns: 1.0,
                lambda_cell: 0.0,
            })
            .collect(),
        Grid::Table5 => [(1.0, 0.0), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7), (0.0, 1.0)]
            .into_iter()
            .map(|(u, c)| AblationSetting {
                label: format!("uns={u} cell={c}"),
                lambda_clu: 1.0,
                lambda_sep: 1.0,
                lambda_sparse: 1.0,
                lambda_uns: u,
                lambda_cell: c,
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub seed: u64,
    pub accuracy: f64,
    pub mid_fraction: f64,
    pub final_loss: f64,
}

/// Trains and evaluates one model per grid setting and seed.
pub fn ablation_grid<T: Scalar>(
    base: &TrainConfig,
    grid: Grid,
    seeds: &[u64],
    vocab: &Vocabulary,
    train_set: &[QaExample],
    eval_set: &[QaExample],
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for setting in grid_settings(grid) {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..setting.apply(base)
            };
            let tr = prepare_all(train_set, vocab, &cfg);
            let out = train::<T>(&cfg, vocab, &tr, None)?;
            let report = evaluate(&out.model, vocab, eval_set, &cfg, &[], &[]);
            rows.push(AblationRow {
                setting: setting.clone(),
                seed,
                accuracy: report.accuracy,
                mid_fraction: report.relevance.map_or(0.0, |r| r.mid_fraction),
                final_loss: out.curve.last().map_or(f64::NAN, |r| r.loss.total),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GeneratorConfig};

    #[test]
    fn exact_match_rules() {
        assert!(exact_match("4", "4"));
        assert!(exact_match("Loss ", "loss"));
        assert!(!exact_match("4", "5"));
        assert!(exact_match("38 - 12", "38-12"));
    }

    #[test]
    fn config_round_trips_through_flat_toml() {
        let cfg = TrainConfig {
            lambda_cell: 0.5,
            gate: GateMode::Ones,
            checkpoint_path: Some("ck.json".into()),
            ..TrainConfig::default()
        };
        let text = cfg.to_toml();
        assert!(!text.contains('['), "config must stay flat: {text}");
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml("lambda_clu = -1.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 3").is_err());
    }

    #[test]
    fn grids_have_the_documented_rows() {
        let t4 = grid_settings(Grid::Table4);
        assert_eq!(t4.len(), 6);
        assert!(t4.iter().all(|s| s.lambda_uns == 1.0 && s.lambda_cell == 0.0));
        let t5 = grid_settings(Grid::Table5);
        assert_eq!(t5.len(), 5);
        assert_eq!((t5[1].lambda_uns, t5[1].lambda_cell), (0.7, 0.3));
        assert_eq!(t4[5].apply(&TrainConfig::default()), t5[0].apply(&TrainConfig::default()));
    }

    #[test]
    fn histogram_counts_every_value() {
        let h = histogram(&[0.5; 7], HISTOGRAM_BUCKETS);
        assert_eq!(h.iter().sum::<usize>(), 7);
        assert_eq!(h.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(histogram(&[0.0, 1.0], 20), {
            let mut v = vec![0; 20];
            v[0] = 1;
            v[19] = 1;
            v
        });
    }

    #[test]
    fn prepare_aligns_scores_with_the_table_region() {
        let data = generate_dataset(&GeneratorConfig::default(), 20).unwrap();
        let vocab = build_vocabulary(&data);
        for ex in &data {
            let p = prepare(ex, &vocab, 64, HighlightSource::Statement);
            assert!(p.ids.len() <= 64);
            let t = p.table_len();
            assert!(t >= 1);
            for v in [&p.eta_cell, &p.overlap] {
                assert_eq!(v.len(), t);
            }
            assert_eq!(p.tags.len(), t);
            assert_eq!(p.gold_mask.len(), t);
            // gold cells are always highlighted
            for i in 0..t {
                if p.gold_mask[i] {
                    assert_eq!(p.eta_cell[i], 1.0);
                }
            }
        }
    }
}
