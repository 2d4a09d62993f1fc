use std::path::Path;

use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use tabrel::highlight::{highlight_cells, highlight_cells_from_question, matched_coords, AuditRecord};
use tabrel::model::{Checkpoint, GatedQaModel};
use tabrel::perturb::{perturb_example, PerturbationKind, PerturbationSpec, ReplacementScale};
use tabrel::synth::{read_dataset, write_dataset, GeneratorConfig, QaExample};
use tabrel::table::Table;
use tabrel::train::{
    ablation_grid, build_vocabulary, evaluate, prepare_all, score_records, AblationRow, Grid, ScoreRecord,
    TrainConfig, TrainError, REPORT_SCHEMA_VERSION,
};
use tabrel::vocab::Vocabulary;
use tabrel::Model32;

use crate::diagnose::{diagnose_variant, DiagnoseReport, DIAGNOSE_SCHEMA_VERSION};
use crate::output::{Classify, CmdResult, Context, Failure};
use crate::{AblateArgs, AuditArgs, DiagnoseArgs, EvalArgs, GenerateArgs, GridArg, KindArg, PerturbArgs, SourceArg, TrainArgs};

pub const MODEL_SCHEMA: &str = "tabrel.model";

/// Checkpoint plus the vocabulary it was trained with.
#[derive(Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema: String,
    pub checkpoint: Checkpoint,
    pub vocab: Vocabulary,
}

fn kind(k: KindArg) -> PerturbationKind {
    match k {
        KindArg::Ra => PerturbationKind::RowAddition,
        KindArg::Rp => PerturbationKind::RowPermutation,
        KindArg::Cp => PerturbationKind::ColumnPermutation,
        KindArg::Cr => PerturbationKind::CellReplacement,
    }
}

fn scale(literal: bool) -> ReplacementScale {
    if literal {
        ReplacementScale::Literal
    } else {
        ReplacementScale::Fraction
    }
}

fn load_dataset(ctx: &mut Context, p: &Path) -> CmdResult<Vec<QaExample>> {
    let bytes = ctx.read_input(p)?;
    let (_, examples) = read_dataset(&bytes[..])
        .map_err(|e| anyhow!("{}: {e}", p.display()))
        .runtime()?;
    Ok(examples)
}

fn load_config(ctx: &mut Context, p: Option<&Path>) -> CmdResult<TrainConfig> {
    match p {
        Some(p) => {
            let bytes = ctx.read_input(p)?;
            let text = String::from_utf8(bytes).config()?;
            TrainConfig::from_toml(&text)
                .map_err(|e| anyhow!("{}: {e}", p.display()))
                .config()
        }
        None => Ok(TrainConfig::default()),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => Failure::Config(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

fn donor_tables(ctx: &mut Context, donors: Option<&Path>, fallback: &[QaExample]) -> CmdResult<Vec<Table>> {
    Ok(match donors {
        Some(p) => load_dataset(ctx, p)?.into_iter().map(|e| e.table).collect(),
        None => fallback.iter().map(|e| e.table.clone()).collect(),
    })
}

pub fn generate(ctx: &mut Context, a: GenerateArgs) -> CmdResult {
    ctx.begin("generate");
    let seed = ctx.seed(a.seed);
    let cfg = GeneratorConfig {
        min_rows: a.min_rows,
        max_rows: a.max_rows,
        min_cols: a.min_cols,
        max_cols: a.max_cols,
        distractor_fraction: a.distractor_fraction,
        seed,
        ..GeneratorConfig::default()
    };
    cfg.validate().config()?;
    if a.n == 0 {
        return Err(Failure::Config(anyhow!("--n must be at least 1")));
    }
    ctx.record_config(&cfg)?;
    let examples = tabrel::synth::generate_dataset(&cfg, a.n).runtime()?;
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &examples, Some(&cfg)).runtime()?;
    ctx.write_output(&a.out, &bytes)?;
    log::info!("wrote {} examples to {}", examples.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MetricLine<'a> {
    Step(&'a tabrel::train::StepRecord),
    Eval(&'a tabrel::train::EvalPoint),
}

fn train_cmd_config(ctx: &mut Context, a: &TrainArgs) -> CmdResult<TrainConfig> {
    let mut cfg = load_config(ctx, a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if a.config.is_none() {
        cfg.seed = ctx.default_seed;
    }
    ctx.record_seed(cfg.seed);
    Ok(cfg)
}

pub fn train(ctx: &mut Context, a: TrainArgs) -> CmdResult {
    ctx.begin("train");
    let cfg = train_cmd_config(ctx, &a)?;
    ctx.record_config(&cfg)?;
    let data = load_dataset(ctx, &a.data)?;
    let held = match &a.eval {
        Some(p) => Some(load_dataset(ctx, p)?),
        None => None,
    };
    let mut vocab_src = data.clone();
    vocab_src.extend(held.iter().flatten().cloned());
    let vocab = build_vocabulary(&vocab_src);
    let prepared = prepare_all(&data, &vocab, &cfg);
    let held_prepared = held.as_ref().map(|h| prepare_all(h, &vocab, &cfg));
    let out = tabrel::train::train::<f32>(&cfg, &vocab, &prepared, held_prepared.as_deref()).map_err(train_failure)?;
    let lines = out
        .curve
        .iter()
        .map(MetricLine::Step)
        .chain(out.evals.iter().map(MetricLine::Eval));
    ctx.write_jsonl(&a.metrics, lines)?;
    let bundle = ModelBundle {
        schema: MODEL_SCHEMA.to_string(),
        checkpoint: out
            .model
            .to_checkpoint(&vocab.hash(), serde_json::to_value(&cfg).runtime()?),
        vocab,
    };
    let path = cfg.checkpoint_path.clone().map(Into::into).unwrap_or(a.out.clone());
    ctx.write_json(&path, &bundle)?;
    if let Some(last) = out.curve.last() {
        log::info!("trained {} steps, final loss {:.4}", out.curve.len(), last.loss.total);
    }
    Ok(())
}

fn load_model(ctx: &mut Context, p: &Path) -> CmdResult<(Model32, Vocabulary, TrainConfig)> {
    let bytes = ctx.read_input(p)?;
    let bundle: ModelBundle = serde_json::from_slice(&bytes)
        .map_err(|e| anyhow!("{}: not a model file: {e}", p.display()))
        .runtime()?;
    if bundle.schema != MODEL_SCHEMA {
        return Err(Failure::Runtime(anyhow!("{}: unknown model schema {}", p.display(), bundle.schema)));
    }
    let model = GatedQaModel::from_checkpoint(&bundle.checkpoint, &bundle.vocab.hash()).runtime()?;
    let cfg: TrainConfig = serde_json::from_value(bundle.checkpoint.config.clone()).runtime()?;
    Ok((model, bundle.vocab, cfg))
}

pub fn eval(ctx: &mut Context, a: EvalArgs) -> CmdResult {
    ctx.begin("eval");
    let (model, vocab, cfg) = load_model(ctx, &a.model)?;
    let data = load_dataset(ctx, &a.data)?;
    let seed = ctx.seed(a.perturb_seed);
    let specs: Vec<PerturbationSpec> = a
        .perturb
        .iter()
        .map(|&k| PerturbationSpec {
            kind: kind(k),
            seed,
            scale: scale(a.literal_fraction),
        })
        .collect();
    ctx.record_config(&(&cfg, &specs))?;
    let donors = donor_tables(ctx, a.donors.as_deref(), &data)?;
    let report = evaluate(&model, &vocab, &data, &cfg, &specs, &donors);
    ctx.write_json(&a.out, &report)?;
    if let Some(p) = &a.scores {
        let recs = score_records(&model, &prepare_all(&data, &vocab, &cfg), cfg.fusion(), a.latents);
        ctx.write_jsonl(p, &recs)?;
    }
    log::info!("accuracy {:.2} on {} examples", report.accuracy, report.n);
    Ok(())
}

pub fn perturb(ctx: &mut Context, a: PerturbArgs) -> CmdResult {
    ctx.begin("perturb");
    let data = load_dataset(ctx, &a.input)?;
    let spec = PerturbationSpec {
        kind: kind(a.kind),
        seed: ctx.seed(a.seed),
        scale: scale(a.literal_fraction),
    };
    if spec.kind.needs_donors() && a.donors.is_none() {
        return Err(Failure::Config(anyhow!("--kind {} needs --donors", spec.kind.code())));
    }
    ctx.record_config(&spec)?;
    let donors = donor_tables(ctx, a.donors.as_deref(), &data)?;
    let out: Vec<QaExample> = data
        .iter()
        .map(|ex| perturb_example(ex, &spec, &donors).map_err(|e| anyhow!("example {}: {e}", ex.id)))
        .collect::<Result<_, _>>()
        .runtime()?;
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &out, None).runtime()?;
    ctx.write_output(&a.out, &bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationReport {
    schema_version: u32,
    grid: Grid,
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
}

pub fn ablate(ctx: &mut Context, a: AblateArgs) -> CmdResult {
    ctx.begin("ablate");
    let base = load_config(ctx, a.config.as_deref())?;
    let grid = match a.grid {
        GridArg::Table4 => Grid::Table4,
        GridArg::Table5 => Grid::Table5,
    };
    ctx.record_config(&(&base, grid, &a.seeds))?;
    if let Some(&s) = a.seeds.first() {
        ctx.record_seed(s);
    }
    let train_set = load_dataset(ctx, &a.data)?;
    let eval_set = load_dataset(ctx, &a.eval)?;
    let mut all = train_set.clone();
    all.extend(eval_set.iter().cloned());
    let vocab = build_vocabulary(&all);
    let rows = ablation_grid::<f32>(&base, grid, &a.seeds, &vocab, &train_set, &eval_set).map_err(train_failure)?;
    let report = AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        grid,
        seeds: a.seeds.clone(),
        rows,
    };
    ctx.write_json(&a.out, &report)
}

pub fn diagnose(ctx: &mut Context, a: DiagnoseArgs) -> CmdResult {
    ctx.begin("diagnose");
    let mut variants = Vec::new();
    for p in &a.scores {
        let bytes = ctx.read_input(p)?;
        let text = String::from_utf8(bytes).runtime()?;
        let records: Vec<ScoreRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow!("{}: {e}", p.display()))
            .runtime()?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        variants.push(diagnose_variant(&name, &records).runtime()?);
    }
    let report = DiagnoseReport {
        schema_version: DIAGNOSE_SCHEMA_VERSION,
        variants,
    };
    ctx.write_json(&a.out, &report)
}

pub fn highlight_audit(ctx: &mut Context, a: AuditArgs) -> CmdResult {
    ctx.begin("highlight-audit");
    let data = load_dataset(ctx, &a.data)?;
    ctx.record_config(&format!("source={:?}", a.source))?;
    let recs: Vec<AuditRecord> = data
        .iter()
        .map(|ex| {
            let (statement, highlighted) = match a.source {
                SourceArg::Statement => (ex.parsing_statement.clone(), highlight_cells(&ex.table, &ex.parsing_statement)),
                SourceArg::Question => (ex.question.clone(), highlight_cells_from_question(&ex.table, &ex.question)),
            };
            AuditRecord {
                example_id: ex.id,
                matched_coords: matched_coords(&ex.table, &highlighted).into_iter().collect(),
                statement,
                highlighted,
            }
        })
        .collect();
    ctx.write_jsonl(&a.out, &recs)
}
