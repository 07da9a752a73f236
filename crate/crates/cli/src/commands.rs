use std::path::{Path, PathBuf};

use serde::Serialize;
use uniattn_core::analysis::{
    cost_profile, format_percent, similarity_profile, verify_bounded_growth, verify_jacobian_sink, verify_theorem_e1,
    verify_uniattn_depth_ratio, CostReport, TheoryReport,
};
use uniattn_core::model::{mha_io_similarity, Model, ModelConfig, VariantSpec};
use uniattn_core::training::{loss, random_tokens, toy_corpus, train_stage1, train_stage2, LossRecord, Stage};
use uniattn_core::uniattn::{
    error_report, init_compensation, logits_gap, plan_fixed, CalibrationBatch, CompensationMeta, CompensationSet,
};
use uniattn_core::{Matrix, RngStream};

use crate::checkpoint::{Checkpoint, Container};
use crate::config::{DataKind, ExperimentConfig, InitChoice, VariantKind};
use crate::error::{CliError, Result};
use crate::output::{write_csv, write_json};

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

/// Shared state of a config-driven command: Baseline weights and the data split.
pub struct Context {
    pub cfg: ExperimentConfig,
    /// Baseline model over the starting weights.
    pub base: Model,
    /// Variant and compensation stored in the starting checkpoint, if any.
    pub start: Option<(VariantSpec, Option<CompensationSet>)>,
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let config = cfg.model_config()?;
        let root = RngStream::new(cfg.seed);
        let (base, start) = match &cfg.checkpoint {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.config.with_variant(VariantSpec::Baseline) != config {
                    return Err(CliError::Config(format!(
                        "checkpoint {} was saved for a different [model] section",
                        path.display()
                    )));
                }
                let base = Model::new(config, ck.weights, None)?;
                (base, Some((ck.config.variant, ck.compensation)))
            }
            None => (Model::init(config, &mut root.fork(INIT_STREAM))?, None),
        };
        let d = &cfg.data;
        let total = d.sequences + d.eval_sequences;
        let vocab = cfg.model.vocab_size;
        let mut all = match d.kind {
            DataKind::Markov => toy_corpus(total, d.seq_len, vocab, &mut root.fork(DATA_STREAM)),
            DataKind::Random => random_tokens(total, d.seq_len, vocab, &mut root.fork(DATA_STREAM)),
        };
        let eval = all.split_off(d.sequences);
        Ok(Self { cfg, base, start, train: all, eval })
    }

    pub fn calibration(&self) -> Result<CalibrationBatch> {
        let n = self.cfg.calibration.sequences.unwrap_or(self.train.len());
        Ok(CalibrationBatch::new(self.train[..n].to_vec())?)
    }

    /// Mean `Sim(i)` of the Baseline model, layers `2..=L`.
    pub fn similarity(&self) -> Result<Vec<f64>> {
        Ok(similarity_profile(&self.base, &self.train)?.layers.iter().map(|l| l.sim).collect())
    }

    /// Mean MHA input-output similarity of the Baseline model, layers `1..=L`.
    pub fn io_similarity(&self) -> Result<Vec<f64>> {
        let traces = self
            .train
            .iter()
            .map(|s| Ok(self.base.forward(s, true)?.trace.expect("trace requested")))
            .collect::<Result<Vec<_>>>()?;
        Ok(mha_io_similarity(&traces)?)
    }

    pub fn variant(&self, kind: VariantKind) -> Result<VariantSpec> {
        self.cfg.variant_spec(kind, || self.similarity(), || self.io_similarity())
    }

    /// Starting model for `kind`. A compensated UniAttn model takes its `W_c`
    /// from the checkpoint when the checkpoint holds the same variant, and is
    /// initialized per `[calibration]` otherwise.
    pub fn model_for(&self, kind: VariantKind) -> Result<Model> {
        let spec = self.variant(kind)?;
        let comp = match &spec {
            VariantSpec::UniAttn { plan, compensated: true } => match &self.start {
                Some((v, Some(c))) if *v == spec => Some(c.clone()),
                _ => Some(match self.cfg.calibration.init {
                    InitChoice::ClosedForm => {
                        init_compensation(&self.base, plan, &self.calibration()?, self.cfg.calibration.v)?
                    }
                    InitChoice::Zero => CompensationSet::zeros(&self.base.config.with_variant(spec.clone())),
                }),
            },
            _ => None,
        };
        Ok(self.base.with_variant(spec, comp)?)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn eval_set(&self) -> &[Vec<usize>] {
        if self.eval.is_empty() {
            &self.train
        } else {
            &self.eval
        }
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn save_model(path: &Path, m: &Model) -> Result<()> {
    Checkpoint { config: m.config.clone(), weights: m.weights.clone(), compensation: m.compensation.clone() }.save(path)
}

pub fn profile_similarity(ctx: &Context) -> Result<()> {
    let report = similarity_profile(&ctx.base, &ctx.train)?;
    let rows: Vec<Vec<String>> = report.layers.iter().map(|l| vec![l.layer.to_string(), num(l.sim)]).collect();
    write_csv(&ctx.out("similarity.csv"), &["layer", "sim"], &rows)?;
    write_json(&ctx.out("similarity.json"), &report)?;
    println!(
        "similarity: mean {:.4} min {:.4} max {:.4} over {} layers",
        report.mean,
        report.min,
        report.max,
        report.layers.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct CompensationSummary {
    meta: CompensationMeta,
    logits_gap_before: f64,
    logits_gap_after: f64,
}

pub fn init_compensation_cmd(ctx: &Context) -> Result<()> {
    if ctx.cfg.variant.kind != VariantKind::Uniattn || !ctx.cfg.variant.compensated {
        return Err(CliError::Config("init-compensation needs variant kind \"uniattn\" with compensated = true".into()));
    }
    let spec = ctx.variant(VariantKind::Uniattn)?;
    let VariantSpec::UniAttn { plan, .. } = &spec else { unreachable!() };
    let calib = ctx.calibration()?;
    let comp = init_compensation(&ctx.base, plan, &calib, ctx.cfg.calibration.v)?;
    let errors = error_report(&ctx.base, plan, Some(&comp), &calib)?;
    let model = ctx.base.with_variant(spec.clone(), Some(comp.clone()))?;
    let plain = ctx.base.with_variant(VariantSpec::UniAttn { plan: plan.clone(), compensated: false }, None)?;
    let summary = CompensationSummary {
        meta: comp.meta.clone(),
        logits_gap_before: logits_gap(&plain, &calib)?,
        logits_gap_after: logits_gap(&model, &calib)?,
    };
    save_model(&ctx.out("compensated.ckpt"), &model)?;
    let rows: Vec<Vec<String>> = errors
        .iter()
        .map(|e| vec![e.layer.to_string(), num(e.uncompensated), num(e.compensated)])
        .collect();
    write_csv(&ctx.out("error_report.csv"), &["layer", "err_before", "err_after"], &rows)?;
    write_json(&ctx.out("compensation.json"), &summary)?;
    for w in &comp.meta.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "compensation: {} layers, logits gap {:.6} -> {:.6}",
        comp.len(),
        summary.logits_gap_before,
        summary.logits_gap_after
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

pub fn train(ctx: &Context, stage: StageArg) -> Result<()> {
    let mut model = ctx.model_for(ctx.cfg.variant.kind)?;
    let seed = ctx.cfg.seed;
    let mut history: Vec<LossRecord> = Vec::new();
    if matches!(stage, StageArg::One | StageArg::Both) {
        if model.compensation.is_none() {
            return Err(CliError::Config("stage 1 needs variant kind \"uniattn\" with compensated = true".into()));
        }
        let tc = ctx.cfg.training.stage1.train_config(Stage::WcOnly, seed);
        let (comp, h) = train_stage1(&model, &ctx.train, &tc)?;
        model.compensation = Some(comp);
        history.extend(h);
    }
    if matches!(stage, StageArg::Two | StageArg::Both) {
        let tc = ctx.cfg.training.stage2.train_config(Stage::Full, seed);
        let (weights, comp, h) = train_stage2(&model, &ctx.train, &tc)?;
        model.weights = weights;
        model.compensation = comp;
        history.extend(h);
    }
    let eval_loss = loss(&model, ctx.eval_set())?;
    save_model(&ctx.out("trained.ckpt"), &model)?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| vec![r.stage.to_string(), r.step.to_string(), num(r.loss), num(r.ema)])
        .collect();
    write_csv(&ctx.out("loss_history.csv"), &["stage", "step", "loss", "ema"], &rows)?;
    println!("train: {} steps, eval loss {eval_loss:.6}", history.len());
    Ok(())
}

#[derive(Serialize)]
struct VariantRow {
    name: String,
    kv_retain: String,
    softmax_layers: usize,
    attention_flops: f64,
    final_eval_loss: f64,
    cost: CostReport,
}

pub fn compare_variants(ctx: &Context) -> Result<()> {
    let seq_lens = if ctx.cfg.compare.seq_lens.is_empty() {
        vec![ctx.cfg.data.seq_len]
    } else {
        ctx.cfg.compare.seq_lens.clone()
    };
    let mut rows = Vec::new();
    for &kind in &ctx.cfg.compare.variants {
        let mut model = ctx.model_for(kind)?;
        if ctx.cfg.compare.train_steps > 0 {
            let mut tc = ctx.cfg.training.stage2.train_config(Stage::Full, ctx.cfg.seed);
            tc.steps = ctx.cfg.compare.train_steps;
            let (w, c, _) = train_stage2(&model, &ctx.train, &tc)?;
            model.weights = w;
            model.compensation = c;
        }
        let cost = cost_profile(&model.config, &seq_lens);
        rows.push(VariantRow {
            name: kind.name().to_string(),
            kv_retain: format_percent(cost.kv_retain_rate),
            softmax_layers: cost.softmax_layer_count,
            attention_flops: cost.per_length[0].attention_flops,
            final_eval_loss: loss(&model, ctx.eval_set())?,
            cost,
        });
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.kv_retain.clone(),
                r.softmax_layers.to_string(),
                num(r.attention_flops),
                num(r.final_eval_loss),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("variants.csv"),
        &["name", "kv_retain", "softmax_layers", "attention_flops", "final_eval_loss"],
        &csv_rows,
    )?;
    write_json(&ctx.out("variants.json"), &rows)?;
    for r in &rows {
        println!("{:<9} kv {:>6}  softmax layers {:>3}  eval loss {:.6}", r.name, r.kv_retain, r.softmax_layers, r.final_eval_loss);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TheoryCheckArg {
    E1,
    Jacobian,
    Growth,
    Depth,
    All,
}

/// Model and data for the depth-ratio check: the config's UniAttn model
/// when given, otherwise an 8-layer toy model reusing layers 6-8.
fn depth_setup(ctx: Option<&Context>, seed: u64) -> Result<(Model, Vec<Vec<usize>>)> {
    match ctx {
        Some(ctx) => {
            if ctx.cfg.variant.kind != VariantKind::Uniattn {
                return Err(CliError::Config("the depth check needs variant kind \"uniattn\"".into()));
            }
            Ok((ctx.model_for(VariantKind::Uniattn)?, ctx.train.clone()))
        }
        None => {
            let root = RngStream::new(seed);
            let config = ModelConfig::toy(8, 32, 32);
            let base = Model::init(config, &mut root.fork(14))?;
            let plan = plan_fixed(8, 5, 4)?;
            let model = base.with_variant(VariantSpec::UniAttn { plan, compensated: false }, None)?;
            Ok((model, random_tokens(16, 16, 32, &mut root.fork(13))))
        }
    }
}

pub fn verify_theory(check: TheoryCheckArg, seed: u64, ctx: Option<&Context>, out_dir: &Path) -> Result<TheoryReport> {
    let root = RngStream::new(seed);
    let want = |c: TheoryCheckArg| check == c || check == TheoryCheckArg::All;
    let mut report = TheoryReport::default();
    if want(TheoryCheckArg::E1) {
        let mut rng = root.fork(10);
        for (m, n, trials) in [(64, 16, 200), (8, 16, 200), (16, 16, 200)] {
            report.checks.push(verify_theorem_e1(m, n, trials, &mut rng)?);
        }
    }
    if want(TheoryCheckArg::Jacobian) {
        report.checks.push(verify_jacobian_sink(1024, 4, &[256, 1024, 4096])?);
    }
    if want(TheoryCheckArg::Growth) {
        report.checks.push(verify_bounded_growth(100, 1.0, 32, 100, &mut root.fork(12))?);
    }
    if want(TheoryCheckArg::Depth) {
        let (model, data) = depth_setup(ctx, seed)?;
        report.checks.push(verify_uniattn_depth_ratio(&model, &data)?);
    }
    write_json(&out_dir.join("theory.json"), &report)?;
    for c in &report.checks {
        println!(
            "{} {}: observed {:.6} expected {:.6}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.observed,
            c.expected
        );
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Theory(failed.join(", ")))
    }
}

/// Writes traced activations of the first `count` training sequences as a container.
pub fn dump_activations(ctx: &Context, count: usize) -> Result<()> {
    let model = ctx.model_for(ctx.cfg.variant.kind)?;
    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    for (s, seq) in ctx.train.iter().take(count).enumerate() {
        let trace = model.forward(seq, true)?.trace.expect("trace requested");
        for (i, lt) in trace.layers.iter().enumerate() {
            let p = format!("seq.{s}.layer.{}", i + 1);
            tensors.push((format!("{p}.x_in"), lt.x_in.clone()));
            tensors.push((format!("{p}.x_mid"), lt.x_mid.clone()));
            if let Some(k) = &lt.keys {
                tensors.push((format!("{p}.keys"), k.clone()));
            }
            if let Some(v) = &lt.values {
                tensors.push((format!("{p}.values"), v.clone()));
            }
            for (h, pr) in lt.probs.iter().flatten().enumerate() {
                tensors.push((format!("{p}.probs.{h}"), pr.clone()));
            }
        }
        tensors.push((format!("seq.{s}.final_hidden"), trace.final_hidden));
    }
    let n = tensors.len();
    Container { config: model.config.clone(), compensation: None, tensors }.save(&ctx.out("activations.bin"))?;
    println!("activations: {n} tensors");
    Ok(())
}
