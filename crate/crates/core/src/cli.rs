//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
//! Settings can also come from a JSON file given with `--config`, whose keys
//! mirror the long flags in snake case; flags win over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cka::{layer_similarity_matrix, SimilarityMatrix};
use crate::error::ErrorClass;
use crate::headmap::{head_similarity_weighted, layer_interactions, map_heads, HeadAssignment, DEFAULT_QK_WEIGHT};
use crate::layermap::{orient_and_map, LayerMapping};
use crate::tensor_io::{
    load_activations, load_adapter, load_model, load_vocab, save_adapter, ModelWeights, Module,
};
use crate::toyforge::{build_fixture, files, ScenarioKind};
use crate::transfer::{vocab_intersection, VocabAlignment};
use crate::transplant::{
    build_plan, emit_lft_config, fit_hidden_transform, transplant_adapter, LftConfig, TransplantConfig,
};
use crate::Error;

/// Environment variable that caps the worker thread count.
pub const THREADS_ENV: &str = "LORASUITE_THREADS";
/// Name of the fine-tuning config written next to a transplanted adapter.
pub const LFT_CONFIG_FILE: &str = "lft_config.json";

#[derive(Debug, Parser)]
#[command(name = "lora-transplant", version, about = "Move LoRA adapters between base-model versions")]
pub struct Cli {
    /// JSON file with default values for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Leave the `generated_at` field out of JSON outputs.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Log filter, e.g. `info` or `lora_transplant=debug`.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align layers of the two models from activation similarity.
    PlanLayers(PlanLayersArgs),
    /// Align layers, then match attention heads within each layer pair.
    PlanHeads(PlanHeadsArgs),
    /// Transplant an adapter from the old model to the new one.
    Transplant(TransplantArgs),
    /// Write a generated toy model pair with a planted upgrade.
    GenToy(GenToyArgs),
    /// Write the layer similarity matrix as CSV.
    ExportSimilarity(ExportSimilarityArgs),
    /// Summarize weights, adapters, activations or similarity files.
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Default)]
pub struct SimilarityInputs {
    #[arg(long)]
    pub activations_old: Option<PathBuf>,
    #[arg(long)]
    pub activations_new: Option<PathBuf>,
    /// Precomputed similarity CSV, used instead of activations.
    #[arg(long)]
    pub similarity: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ModelInputs {
    #[arg(long)]
    pub old_weights: Option<PathBuf>,
    #[arg(long)]
    pub old_manifest: Option<PathBuf>,
    #[arg(long)]
    pub new_weights: Option<PathBuf>,
    #[arg(long)]
    pub new_manifest: Option<PathBuf>,
    /// JSON array of token strings; optional when both models share a
    /// vocabulary of the same size.
    #[arg(long)]
    pub old_vocab: Option<PathBuf>,
    #[arg(long)]
    pub new_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanLayersArgs {
    #[command(flatten)]
    pub sim: SimilarityInputs,
    /// Maximum layer offset; defaults to the depth gap.
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanHeadsArgs {
    #[command(flatten)]
    pub models: ModelInputs,
    #[command(flatten)]
    pub sim: SimilarityInputs,
    #[arg(long)]
    pub delta: Option<usize>,
    /// Keep head i on head i.
    #[arg(long)]
    pub no_head_mapping: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransplantArgs {
    #[command(flatten)]
    pub models: ModelInputs,
    #[command(flatten)]
    pub sim: SimilarityInputs,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Output adapter archive; its sidecar and LFT config go alongside.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output rank; defaults to the input adapter's rank.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub no_head_mapping: bool,
    #[arg(long)]
    pub emit_lft_config: bool,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// One of identity, embed_rotation, head_permutation, layer_insertion,
    /// hidden_growth, intermediate_growth, gqa_to_mha, combined.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportSimilarityArgs {
    #[arg(long)]
    pub activations_old: Option<PathBuf>,
    #[arg(long)]
    pub activations_new: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long)]
    pub similarity: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub old_weights: Option<PathBuf>,
    pub old_manifest: Option<PathBuf>,
    pub new_weights: Option<PathBuf>,
    pub new_manifest: Option<PathBuf>,
    pub old_vocab: Option<PathBuf>,
    pub new_vocab: Option<PathBuf>,
    pub activations_old: Option<PathBuf>,
    pub activations_new: Option<PathBuf>,
    pub similarity: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub delta: Option<usize>,
    pub no_head_mapping: Option<bool>,
    pub emit_lft_config: Option<bool>,
    pub qk_weight: Option<f64>,
    pub lft: Option<LftConfig>,
    pub kind: Option<String>,
    pub seed: Option<u64>,
    pub log_level: Option<String>,
    pub no_timestamp: Option<bool>,
}

enum Failure {
    Usage(clap::Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(subcommand: &str, message: impl std::fmt::Display) -> Failure {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd.find_subcommand_mut(subcommand).cloned().unwrap_or(cmd);
    Failure::Usage(sub.clone().error(ErrorKind::MissingRequiredArgument, message))
}

/// Holds the subcommand name for error messages and the file config.
struct Ctx {
    sub: &'static str,
    file: FileConfig,
    timestamp: bool,
}

impl Ctx {
    fn need(&self, flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Outcome<PathBuf> {
        flag.or_else(|| file.clone())
            .ok_or_else(|| usage(self.sub, format!("the argument --{name} is required")))
    }

    fn pick<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
        flag.or_else(|| file.clone())
    }

    fn emit(&self, mut value: Value, out: Option<&Path>) -> Outcome<()> {
        if self.timestamp {
            if let Value::Object(map) = &mut value {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs());
                map.insert("generated_at".into(), json!(secs));
            }
        }
        let mut text = serde_json::to_string_pretty(&value).expect("json values serialize");
        text.push('\n');
        write_or_print(&text, out)
    }
}

fn write_or_print(text: &str, out: Option<&Path>) -> Outcome<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            2
        }
        Err(Failure::Run(e)) => {
            tracing::error!(error = %e, "run failed");
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            }
        }
    }
}

fn execute(cli: Cli) -> Outcome<()> {
    let sub = match &cli.command {
        Command::PlanLayers(_) => "plan-layers",
        Command::PlanHeads(_) => "plan-heads",
        Command::Transplant(_) => "transplant",
        Command::GenToy(_) => "gen-toy",
        Command::ExportSimilarity(_) => "export-similarity",
        Command::Inspect(_) => "inspect",
    };
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(sub, format!("config file {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let level = Ctx::pick(cli.log_level.clone(), &file.log_level).unwrap_or_else(|| "warn".into());
    let filter = tracing_subscriber::EnvFilter::try_new(&level)
        .map_err(|e| usage(sub, format!("invalid --log-level `{level}`: {e}")))?;
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(filter)
        .try_init();

    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(usage(sub, format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let ctx = Ctx {
        sub,
        timestamp: !(cli.no_timestamp || file.no_timestamp.unwrap_or(false)),
        file,
    };
    pool.install(|| match cli.command {
        Command::PlanLayers(a) => plan_layers(&ctx, a),
        Command::PlanHeads(a) => plan_heads(&ctx, a),
        Command::Transplant(a) => transplant(&ctx, a),
        Command::GenToy(a) => gen_toy(&ctx, a),
        Command::ExportSimilarity(a) => export_similarity(&ctx, a),
        Command::Inspect(a) => inspect(&ctx, a),
    })
}

fn similarity(ctx: &Ctx, inputs: SimilarityInputs) -> Outcome<SimilarityMatrix> {
    let f = &ctx.file;
    if let Some(csv) = Ctx::pick(inputs.similarity, &f.similarity) {
        return Ok(SimilarityMatrix::read_csv(&csv)?);
    }
    let old = ctx.need(inputs.activations_old, &f.activations_old, "activations-old")?;
    let new = ctx.need(inputs.activations_new, &f.activations_new, "activations-new")?;
    let (a, b) = rayon::join(|| load_activations(&old), || load_activations(&new));
    Ok(layer_similarity_matrix(&a?, &b?)?)
}

fn load_models(ctx: &Ctx, m: &ModelInputs) -> Outcome<(ModelWeights, ModelWeights)> {
    let f = &ctx.file;
    let ow = ctx.need(m.old_weights.clone(), &f.old_weights, "old-weights")?;
    let om = ctx.need(m.old_manifest.clone(), &f.old_manifest, "old-manifest")?;
    let nw = ctx.need(m.new_weights.clone(), &f.new_weights, "new-weights")?;
    let nm = ctx.need(m.new_manifest.clone(), &f.new_manifest, "new-manifest")?;
    let (old, new) = rayon::join(|| load_model(&ow, &om), || load_model(&nw, &nm));
    Ok((old?, new?))
}

fn alignment(ctx: &Ctx, m: &ModelInputs, old: &ModelWeights, new: &ModelWeights) -> Outcome<VocabAlignment> {
    let f = &ctx.file;
    match (Ctx::pick(m.old_vocab.clone(), &f.old_vocab), Ctx::pick(m.new_vocab.clone(), &f.new_vocab)) {
        (Some(a), Some(b)) => Ok(vocab_intersection(&load_vocab(&a)?, &load_vocab(&b)?)?),
        (None, None) if old.spec.vocab_size == new.spec.vocab_size => {
            tracing::warn!("no vocabulary files given; assuming both models share one vocabulary");
            Ok(VocabAlignment::identity(old.spec.vocab_size))
        }
        (None, None) => Err(usage(
            ctx.sub,
            "vocabulary sizes differ; --old-vocab and --new-vocab are required",
        )),
        _ => Err(usage(ctx.sub, "--old-vocab and --new-vocab must be given together")),
    }
}

fn mapping_json(mapping: &LayerMapping, sim: &SimilarityMatrix) -> Value {
    let pairs: Vec<Value> = mapping
        .pairs
        .iter()
        .map(|&(o, n)| json!({"old": o, "new": n, "cka": sim.values[(o, n)]}))
        .collect();
    json!({
        "pairs": pairs,
        "total": mapping.total_score,
        "delta": mapping.delta,
        "direction": mapping.direction,
    })
}

fn plan_layers(ctx: &Ctx, a: PlanLayersArgs) -> Outcome<()> {
    let sim = similarity(ctx, a.sim)?;
    let delta = Ctx::pick(a.delta, &ctx.file.delta);
    let mapping = orient_and_map(&sim, sim.n_old(), sim.n_new(), delta)?;
    let out = Ctx::pick(a.out, &ctx.file.out);
    ctx.emit(mapping_json(&mapping, &sim), out.as_deref())
}

fn check_depths(sim: &SimilarityMatrix, old: &ModelWeights, new: &ModelWeights) -> Outcome<()> {
    if (sim.n_old(), sim.n_new()) != (old.spec.n_layers, new.spec.n_layers) {
        return Err(Error::dims(
            "layer similarity",
            format!(
                "similarity is {}x{}, models have {} and {} layers",
                sim.n_old(),
                sim.n_new(),
                old.spec.n_layers,
                new.spec.n_layers
            ),
        )
        .into());
    }
    Ok(())
}

fn plan_heads(ctx: &Ctx, a: PlanHeadsArgs) -> Outcome<()> {
    let f = &ctx.file;
    let (old, new) = load_models(ctx, &a.models)?;
    let align = alignment(ctx, &a.models, &old, &new)?;
    let sim = similarity(ctx, a.sim)?;
    check_depths(&sim, &old, &new)?;
    let mapping = orient_and_map(&sim, old.spec.n_layers, new.spec.n_layers, Ctx::pick(a.delta, &f.delta))?;
    let w_h = fit_hidden_transform(&old, &new, &align)?;
    let qk_weight = f.qk_weight.unwrap_or(DEFAULT_QK_WEIGHT);
    let identity = a.no_head_mapping || f.no_head_mapping.unwrap_or(false);

    let mut layers = Vec::new();
    for &(o, n) in &mapping.pairs {
        let ia = layer_interactions(&old.layers[o], &old.spec)?;
        let ib = layer_interactions(&new.layers[n], &new.spec)?;
        let s = head_similarity_weighted(&ia, &ib, &w_h, qk_weight)?;
        let assignment = if identity {
            HeadAssignment::identity(old.spec.n_heads, new.spec.n_heads)
        } else {
            map_heads(&s)?
        };
        let sim_total: f64 = assignment.pairs.iter().map(|&(i, j)| s[(i, j)]).sum();
        layers.push(json!({
            "layer_old": o,
            "layer_new": n,
            "assignment": assignment.pairs.iter().map(|&(i, j)| [i, j]).collect::<Vec<_>>(),
            "sim_total": sim_total,
        }));
    }
    let out = Ctx::pick(a.out, &f.out);
    ctx.emit(json!({ "layers": layers }), out.as_deref())
}

fn transplant(ctx: &Ctx, a: TransplantArgs) -> Outcome<()> {
    let f = &ctx.file;
    // check required paths before any loading
    let adapter_path = ctx.need(a.adapter, &f.adapter, "adapter")?;
    let out = ctx.need(a.out, &f.out, "out")?;
    let (old, new) = load_models(ctx, &a.models)?;
    let adapter = load_adapter(&adapter_path)?;
    let align = alignment(ctx, &a.models, &old, &new)?;
    let sim = similarity(ctx, a.sim)?;
    check_depths(&sim, &old, &new)?;

    let config = TransplantConfig {
        rank: Ctx::pick(a.rank, &f.rank),
        alpha: f.alpha,
        delta: Ctx::pick(a.delta, &f.delta),
        head_mapping: !(a.no_head_mapping || f.no_head_mapping.unwrap_or(false)),
        qk_weight: f.qk_weight.unwrap_or(DEFAULT_QK_WEIGHT),
        lft: f.lft.clone().unwrap_or_default(),
    };
    let modules = adapter.target_modules();
    let plan = build_plan(&old, &new, &sim, &align, &modules, config)?;
    let moved = transplant_adapter(&old, &new, &adapter, &plan)?;
    save_adapter(&moved, &out)?;

    let lft_path = if a.emit_lft_config || f.emit_lft_config.unwrap_or(false) {
        let path = out.with_file_name(LFT_CONFIG_FILE);
        emit_lft_config(&plan, &moved, &path)?;
        Some(path)
    } else {
        None
    };
    let heads: BTreeMap<String, Vec<[usize; 2]>> = plan
        .heads
        .iter()
        .map(|(&(o, n), h)| (format!("{o}->{n}"), h.pairs.iter().map(|&(i, j)| [i, j]).collect()))
        .collect();
    ctx.emit(
        json!({
            "out": out,
            "rank": moved.rank,
            "alpha": moved.alpha,
            "entries": moved.entries.len(),
            "layers": mapping_json(&plan.layer_mapping, &sim),
            "heads": heads,
            "hidden_transform_is_identity": plan.transfer.hidden_is_identity(),
            "lft_config": lft_path,
        }),
        None,
    )
}

fn gen_toy(ctx: &Ctx, a: GenToyArgs) -> Outcome<()> {
    let f = &ctx.file;
    let kind_name = Ctx::pick(a.kind, &f.kind).ok_or_else(|| usage(ctx.sub, "the argument --kind is required"))?;
    let kind: ScenarioKind = kind_name.parse().map_err(|e: Error| usage(ctx.sub, e))?;
    let seed = Ctx::pick(a.seed, &f.seed).unwrap_or(0);
    let dir = ctx.need(a.out_dir, &f.out_dir, "out-dir")?;
    let fixture = build_fixture(kind, seed);
    fixture.save(&dir)?;
    ctx.emit(
        json!({
            "kind": kind,
            "seed": seed,
            "out_dir": dir,
            "files": [
                files::OLD_WEIGHTS, files::OLD_MANIFEST, files::NEW_WEIGHTS, files::NEW_MANIFEST,
                files::ADAPTER, files::OLD_VOCAB, files::NEW_VOCAB, files::OLD_ACTIVATIONS,
                files::NEW_ACTIVATIONS, files::SCENARIO,
            ],
        }),
        None,
    )
}

fn export_similarity(ctx: &Ctx, a: ExportSimilarityArgs) -> Outcome<()> {
    let f = &ctx.file;
    let inputs = SimilarityInputs {
        activations_old: Some(ctx.need(a.activations_old, &f.activations_old, "activations-old")?),
        activations_new: Some(ctx.need(a.activations_new, &f.activations_new, "activations-new")?),
        similarity: None,
    };
    let sim = similarity(ctx, inputs)?;
    let out = Ctx::pick(a.out, &f.out);
    write_or_print(&sim.to_csv(), out.as_deref())
}

fn inspect(ctx: &Ctx, a: InspectArgs) -> Outcome<()> {
    let mut report = serde_json::Map::new();
    match (&a.weights, &a.manifest) {
        (Some(w), Some(m)) => {
            let model = load_model(w, m)?;
            report.insert(
                "model".into(),
                json!({"spec": model.spec, "matrices": model.matrix_count()}),
            );
        }
        (None, None) => {}
        _ => return Err(usage(ctx.sub, "--weights and --manifest must be given together")),
    }
    if let Some(path) = &a.adapter {
        let adapter = load_adapter(path)?;
        let modules: Vec<Module> = adapter.target_modules();
        report.insert(
            "adapter".into(),
            json!({
                "rank": adapter.rank,
                "alpha": adapter.alpha,
                "entries": adapter.entries.len(),
                "layers": adapter.layers(),
                "target_modules": modules,
            }),
        );
    }
    if let Some(path) = &a.activations {
        let set = load_activations(path)?;
        report.insert(
            "activations".into(),
            json!({
                "corpus_id": set.corpus_id,
                "pooling": set.pooling,
                "layers": set.n_layers(),
                "batches_per_layer": set.batches_per_layer,
                "rows_per_batch": set.rows_per_batch,
                "widths": set.layers.iter().map(|l| l[0].ncols()).collect::<Vec<_>>(),
            }),
        );
    }
    if let Some(path) = &a.similarity {
        let sim = SimilarityMatrix::read_csv(path)?;
        let row_argmax: Vec<usize> = sim
            .values
            .row_iter()
            .map(|r| r.iter().enumerate().fold(0, |best, (j, v)| if *v > r[best] { j } else { best }))
            .collect();
        report.insert(
            "similarity".into(),
            json!({"old_layers": sim.n_old(), "new_layers": sim.n_new(), "row_argmax": row_argmax}),
        );
    }
    if report.is_empty() {
        return Err(usage(
            ctx.sub,
            "give at least one of --weights/--manifest, --adapter, --activations, --similarity",
        ));
    }
    ctx.emit(Value::Object(report), a.out.as_deref())
}
