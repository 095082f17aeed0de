//! The `rpam` command line: argument definitions and one function per
//! subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rpam_core::eval::{compare, DEFAULT_THINKING_KEYWORDS};
use rpam_core::labeling::{build_pl_dataset, Provenance};
use rpam_core::merge::{average_merge, dare_linear_merge, task_arithmetic_merge, ties_merge};
use rpam_core::rpam::rpam_merge;
use rpam_core::{Checkpoint, ModelConfig, ModelTag, PLDataset, ToyModel};
use serde::{Deserialize, Serialize};

use crate::files::{read_model_config, read_pl_dataset, read_prompts, sidecar_for, to_json_bytes, CONFIG_SIDECAR};
use crate::job::{output_root, resolve_output, Job};
use crate::logs::{read_eval_log, read_response_log, summarize, thinking_ratios, EvalRecord};
use crate::recipe::{Method, MergeRecipe, Plan, RecipeInput, Role};
use crate::report::{comparison_table, CoefficientReport, METHOD_KEY, REPORT_HASH_KEY};
use crate::safetensors;
use crate::toy::{self, ToyQuery, ToySpec};

pub const MERGED_FILE: &str = "merged.safetensors";
pub const PL_DATASET_FILE: &str = "pl_dataset.json";
pub const REPORT_FILE: &str = "coefficients.json";
pub const TASKS_FILE: &str = "tasks.json";

#[derive(Debug, Parser)]
#[command(name = "rpam", version, about = "Reasoning-pattern-aware merging of long- and short-reasoning checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a pattern-labeled dataset from a graded response log.
    Label(LabelArgs),
    /// Run the merge described by a recipe.
    Merge(MergeArgs),
    /// Calibrate per-layer coefficients (recipe method `rpam`).
    Calibrate(CalibrateArgs),
    /// Summarize an evaluation log, optionally against a reference.
    Eval(EvalArgs),
    /// Print the tensors and metadata of a checkpoint, or a PL dataset summary.
    Inspect(InspectArgs),
    /// Write the copy/reverse toy fixture.
    GenToy(GenToyArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory. Relative paths resolve under $RPAM_OUTPUT_ROOT when set.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Response log (JSONL).
    #[arg(long)]
    pub log: PathBuf,
    /// Samples expected per query and model.
    #[arg(long, default_value_t = 12)]
    pub k: usize,
    /// Recorded in the dataset's provenance.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    /// Sweep learning rate × epochs per layer and keep the best.
    #[arg(long)]
    pub grid: bool,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluation log (JSONL) for the candidate.
    #[arg(long, conflicts_with = "checkpoint")]
    pub log: Option<PathBuf>,
    /// Grade a toy checkpoint on the eval split of `--tasks` instead.
    #[arg(long, requires = "tasks")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Model config for `--checkpoint`; defaults to its sidecar.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reference evaluation log to compare against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples written per query and model.
    #[arg(long)]
    pub k: Option<usize>,
    /// Model config; defaults to the smallest one the circuit fits in.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Label(a) => label(a),
        Command::Merge(a) => merge(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::GenToy(a) => gen_toy(a),
    }
}

fn start(command: &'static str, out: &OutArgs, recipe_output: Option<PathBuf>) -> Result<Job> {
    let dir = resolve_output(out.out.as_deref(), recipe_output, output_root().as_deref())?;
    Ok(Job::start(command, dir, out.force)?)
}

fn label(a: LabelArgs) -> Result<()> {
    let records = read_response_log(&a.log)?;
    let provenance = Provenance {
        k: a.k,
        seed: a.seed,
        sources: vec![a.log.display().to_string()],
    };
    let ds = build_pl_dataset(&records, a.k, provenance)?;
    let mut job = start("label", &a.out, None)?;
    job.input(&a.log)?;
    job.write_json(PL_DATASET_FILE, &ds)?;
    let long = ds.labels.iter().filter(|l| l.positive == ModelTag::Long).count();
    println!(
        "{} labels: {} long-positive, {} short-positive -> {}",
        ds.labels.len(),
        long,
        ds.labels.len() - long,
        job.path(PL_DATASET_FILE).display()
    );
    job.finish(None, a.seed, &serde_json::json!({ "log": a.log, "k": a.k }))?;
    Ok(())
}

fn read_recipe(path: &Path) -> Result<(MergeRecipe, PathBuf)> {
    let recipe = MergeRecipe::read(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((recipe, base))
}

fn resolve_recipe_output(recipe: &MergeRecipe, base: &Path) -> Option<PathBuf> {
    recipe.output.as_ref().map(|o| if o.is_absolute() { o.clone() } else { base.join(o) })
}

fn read_checkpoint(job: &mut Job, path: &Path) -> Result<Checkpoint> {
    job.input(path)?;
    Ok(safetensors::read_checkpoint(path)?)
}

fn merge(a: MergeArgs) -> Result<()> {
    let (mut recipe, base) = read_recipe(&a.recipe)?;
    let p = &mut recipe.parameters;
    if a.seed.is_some() {
        p.seed = a.seed;
    }
    if a.density.is_some() {
        p.density = a.density;
    }
    if a.drop_rate.is_some() {
        p.drop_rate = a.drop_rate;
    }
    if a.scale.is_some() {
        p.scale = a.scale;
    }
    let plan = recipe.plan(&base)?;
    let output = resolve_recipe_output(&recipe, &base);
    let mut job = start("merge", &a.out, output)?;
    execute(&mut job, &plan)?;
    job.finish(Some(&a.recipe), recipe.parameters.seed, &plan)?;
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let (mut recipe, base) = read_recipe(&a.recipe)?;
    if recipe.method != Method::Rpam {
        bail!("calibrate needs a recipe with method rpam, got {}", recipe.method);
    }
    let p = &mut recipe.parameters;
    if a.grid {
        p.grid = Some(true);
    }
    for (slot, v) in [(&mut p.tau, a.tau), (&mut p.omega, a.omega), (&mut p.learning_rate, a.lr)] {
        if v.is_some() {
            *slot = v;
        }
    }
    if a.epochs.is_some() {
        p.epochs = a.epochs;
    }
    if a.seed.is_some() {
        p.seed = a.seed;
    }
    let plan = recipe.plan(&base)?;
    let output = resolve_recipe_output(&recipe, &base);
    let mut job = start("calibrate", &a.out, output)?;
    execute(&mut job, &plan)?;
    job.finish(Some(&a.recipe), recipe.parameters.seed, &plan)?;
    Ok(())
}

/// Run a validated plan, writing the merged checkpoint, its config sidecar
/// and (for `rpam`) the coefficient report into the job directory.
fn execute(job: &mut Job, plan: &Plan) -> Result<()> {
    let paths = plan.checkpoints();
    let mut ckpts = Vec::with_capacity(paths.len());
    for path in &paths {
        ckpts.push(read_checkpoint(job, path).with_context(|| format!("loading {}", path.display()))?);
    }
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let (mut merged, config) = match plan {
        Plan::Average { .. } => (average_merge(&refs)?, None),
        Plan::TaskArithmetic { scale, .. } => (task_arithmetic_merge(refs[0], &refs[1..], *scale)?, None),
        Plan::Ties { density, scale, .. } => (ties_merge(refs[0], &refs[1..], *density, *scale)?, None),
        Plan::DareLinear {
            drop_rate,
            scales,
            seed,
            ..
        } => (dare_linear_merge(refs[0], &refs[1..], *drop_rate, scales, *seed)?, None),
        Plan::Rpam {
            pl_dataset,
            prompts,
            config,
            calibration,
            ..
        } => {
            job.input(pl_dataset)?;
            job.input(prompts)?;
            job.input(config)?;
            let pl = read_pl_dataset(pl_dataset)?;
            let prompt_map = read_prompts(prompts)?;
            let model_config = read_model_config(config)?;
            let out = rpam_merge(refs[0], refs[1], &pl, &prompt_map, &model_config, calibration)?;
            let report = CoefficientReport {
                pairs: out.coefficients.per_layer.clone(),
                layers: out.layers,
                config: calibration.clone(),
                pl_dataset_sha256: crate::files::sha256_file(pl_dataset)?,
                prompts_sha256: crate::files::sha256_file(prompts)?,
                long_sha256: crate::files::sha256_file(paths[0])?,
                short_sha256: crate::files::sha256_file(paths[1])?,
            };
            let bytes = to_json_bytes(&report);
            job.write(REPORT_FILE, &bytes)?;
            print!("{}", report.summary());
            let mut ckpt = out.checkpoint;
            ckpt.metadata
                .insert(REPORT_HASH_KEY.into(), crate::files::sha256_hex(&bytes));
            (ckpt, Some(model_config))
        }
    };
    merged
        .metadata
        .insert(METHOD_KEY.into(), plan.method().to_string());

    // Carry the architecture along so the result can be loaded directly.
    let config = match config {
        Some(c) => Some(c),
        None => {
            let sidecar = sidecar_for(paths[0]);
            if sidecar.exists() {
                job.input(&sidecar)?;
                Some(read_model_config(&sidecar)?)
            } else {
                None
            }
        }
    };
    if let Some(c) = config {
        job.write_json(CONFIG_SIDECAR, &c)?;
    }
    let path = job.write(MERGED_FILE, &safetensors::to_bytes(&merged))?;
    println!(
        "{} merge of {} checkpoints -> {}",
        plan.method(),
        paths.len(),
        path.display()
    );
    Ok(())
}

/// Toy task set written by `gen-toy` and read by `eval --checkpoint`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub spec: ToySpec,
    pub seed: u64,
    pub queries: Vec<ToyQuery>,
}

#[derive(Serialize)]
struct EvalSummary {
    results: Vec<rpam_core::eval::EvalResult>,
    /// Per benchmark, over responses that carry text.
    thinking_ratio: BTreeMap<String, f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut job = start("eval", &a.out, None)?;
    let records = match (&a.log, &a.checkpoint, &a.tasks) {
        (Some(log), None, _) => {
            job.input(log)?;
            read_eval_log(log)?
        }
        (None, Some(ckpt_path), Some(tasks_path)) => {
            let ckpt = read_checkpoint(&mut job, ckpt_path)?;
            let config_path = a.config.clone().unwrap_or_else(|| sidecar_for(ckpt_path));
            job.input(&config_path)?;
            let config = read_model_config(&config_path)?;
            job.input(tasks_path)?;
            let tasks: TaskFile = crate::files::read_json(tasks_path)?;
            let layout = toy::Layout::new(&tasks.spec);
            let model = ToyModel::from_checkpoint(&ckpt, config)?;
            let eval_queries: Vec<ToyQuery> = tasks
                .queries
                .into_iter()
                .filter(|q| q.split == toy::Split::Eval)
                .collect();
            let graded = toy::grade(&model, &layout, &eval_queries)?;
            let records = toy::eval_records(&graded);
            job.write("eval.jsonl", &jsonl(&records))?;
            records
        }
        _ => bail!("give either --log, or --checkpoint with --tasks"),
    };
    let results = summarize(&records)?;
    let summary = EvalSummary {
        thinking_ratio: thinking_ratios(&records, &DEFAULT_THINKING_KEYWORDS),
        results,
    };
    for r in &summary.results {
        println!(
            "{}: accuracy {:.4} mean tokens {:.2} (n={})",
            r.benchmark, r.accuracy, r.mean_tokens, r.sample_count
        );
    }
    job.write_json("summary.json", &summary)?;
    if let Some(reference) = &a.reference {
        job.input(reference)?;
        let refs = summarize(&read_eval_log(reference)?)?;
        let report = compare(&summary.results, &refs)?;
        let table = comparison_table(&report);
        print!("{table}");
        job.write_json("comparison.json", &report)?;
        job.write("comparison.txt", table.as_bytes())?;
    }
    job.finish(
        None,
        None,
        &serde_json::json!({
            "log": a.log,
            "checkpoint": a.checkpoint,
            "tasks": a.tasks,
            "config": a.config,
            "reference": a.reference,
        }),
    )?;
    Ok(())
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("rows serialize");
        buf.push(b'\n');
    }
    buf
}

fn inspect(a: InspectArgs) -> Result<()> {
    let path = &a.path;
    if path.extension().is_some_and(|e| e == "json") {
        let ds: PLDataset = crate::files::read_json(path)?;
        let long = ds.labels.iter().filter(|l| l.positive == ModelTag::Long).count();
        let ties = ds
            .labels
            .iter()
            .filter(|l| l.reason == rpam_core::labeling::LabelReason::TieTokens)
            .count();
        println!("{}: {} labels (k={})", path.display(), ds.labels.len(), ds.provenance.k);
        println!("  long-positive  {long}");
        println!("  short-positive {}", ds.labels.len() - long);
        println!("  decided on length {ties}");
        return Ok(());
    }
    let ckpt = safetensors::read_checkpoint(path)?;
    println!(
        "{}: {} tensors, {} parameters",
        path.display(),
        ckpt.len(),
        ckpt.num_parameters()
    );
    let sidecar = sidecar_for(path);
    let config: Option<ModelConfig> = if sidecar.exists() {
        read_model_config(&sidecar).ok()
    } else {
        None
    };
    let width = ckpt.names().map(str::len).max().unwrap_or(0);
    for (name, t) in ckpt.iter() {
        let group = config
            .as_ref()
            .and_then(|c| c.layer_group(name))
            .map(|g| format!("  layer {g}"))
            .unwrap_or_default();
        println!("  {name:<width$}  {}{group}", t.shape());
    }
    for (k, v) in &ckpt.metadata {
        println!("  meta {k} = {v}");
    }
    if let Some(c) = config {
        println!("  config {}", serde_json::to_string(&c)?);
    }
    Ok(())
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let mut spec = ToySpec::default();
    if let Some(k) = a.k {
        spec.k = k;
    }
    let config = match &a.config {
        Some(p) => Some(read_model_config(p)?),
        None => None,
    };
    let fixture = toy::generate(&spec, config, a.seed)?;
    let mut job = start("gen-toy", &a.out, None)?;
    if let Some(p) = &a.config {
        job.input(p)?;
    }
    job.write("long.safetensors", &safetensors::to_bytes(&fixture.long))?;
    job.write("short.safetensors", &safetensors::to_bytes(&fixture.short))?;
    job.write_json(CONFIG_SIDECAR, &fixture.config)?;
    job.write_json("prompts.json", &fixture.calibration_prompts())?;
    job.write_json(
        TASKS_FILE,
        &TaskFile {
            spec: spec.clone(),
            seed: a.seed,
            queries: fixture.queries.clone(),
        },
    )?;
    job.write("responses.jsonl", &jsonl(&fixture.responses))?;
    let eval_long: Vec<EvalRecord> = toy::eval_records(&fixture.eval_long);
    let eval_short: Vec<EvalRecord> = toy::eval_records(&fixture.eval_short);
    job.write("eval_long.jsonl", &jsonl(&eval_long))?;
    job.write("eval_short.jsonl", &jsonl(&eval_short))?;
    for (name, recipe) in toy_recipes() {
        job.write_json(&name, &recipe)?;
    }
    let acc = |g: &[toy::Graded]| toy::TaskAccuracy::of(g);
    let (l, s) = (acc(&fixture.eval_long), acc(&fixture.eval_short));
    println!(
        "long: copy {:.2} reverse {:.2}; short: copy {:.2} reverse {:.2} -> {}",
        l.copy,
        l.reverse,
        s.copy,
        s.reverse,
        job.dir().display()
    );
    job.finish(None, Some(a.seed), &serde_json::json!({ "spec": spec, "config": fixture.config }))?;
    Ok(())
}

/// Recipes for the fixture, relative to the fixture directory. The `rpam`
/// recipe expects `rpam label --log responses.jsonl --out label` first.
fn toy_recipes() -> Vec<(String, MergeRecipe)> {
    let input = |role, path: &str| RecipeInput {
        role,
        path: path.into(),
    };
    let pair = || vec![input(Role::Long, "long.safetensors"), input(Role::Short, "short.safetensors")];
    let average = MergeRecipe {
        method: Method::Average,
        inputs: pair(),
        parameters: Default::default(),
        pl_dataset: None,
        prompts: None,
        config: None,
        output: Some("merged/average".into()),
    };
    let ties = MergeRecipe {
        method: Method::Ties,
        inputs: vec![input(Role::Base, "short.safetensors"), input(Role::Tuned, "long.safetensors")],
        output: Some("merged/ties".into()),
        ..average.clone()
    };
    let rpam = MergeRecipe {
        method: Method::Rpam,
        inputs: pair(),
        parameters: crate::recipe::Parameters {
            omega: Some(toy::CALIBRATION_OMEGA),
            grid: Some(true),
            ..Default::default()
        },
        pl_dataset: Some(Path::new("label").join(PL_DATASET_FILE)),
        prompts: Some("prompts.json".into()),
        config: None,
        output: Some("merged/rpam".into()),
    };
    vec![
        ("average.recipe.json".into(), average),
        ("rpam.recipe.json".into(), rpam),
        ("ties.recipe.json".into(), ties),
    ]
}
