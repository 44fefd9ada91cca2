//! Command-line interface: dataset synthesis, Reptile meta-training,
//! k-shot evaluation, ensemble evaluation, report aggregation, and
//! self-checks (gradient + invariants).
//!
//! Exit codes: 0 success, 1 validation error, 2 divergence, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use metagnn::data::{
    load_dataset, save_dataset, split_dataset, synth_generate, zscore_fit, DataError, Dataset,
    Normalizer, SynthSpec,
};
use metagnn::ensemble::{ensemble_init, save_ensemble, EnsembleError, EnsembleMode};
use metagnn::eval::{
    aggregate_across_tasks, baseline_random, evaluate, EvalConfig, EvalError, EvalReport,
    Predictor, TaskStats,
};
use metagnn::layers::{
    egnn_first_layer, load_model, model_forward, model_gradcheck, model_init, save_model,
    ArchKind, Architecture, GraphBatch, Mode, ModelError, ModelParams,
};
use metagnn::meta::{reptile_train, MetaConfig, MetaError};
use metagnn::tensor::Tape;

#[derive(Parser)]
#[command(name = "metagnn", version, about = "Meta-learned GNN regression over graph datasets")]
struct Cli {
    /// Worker threads for evaluation trials (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-task graph dataset.
    Synth(SynthArgs),
    /// Meta-train a model with Reptile.
    Train(TrainArgs),
    /// K-shot evaluation of a trained model or a random baseline.
    Eval(EvalArgs),
    /// K-shot evaluation of an ensemble of trained models.
    EnsembleEval(EnsembleEvalArgs),
    /// Aggregate evaluation CSVs across tasks.
    Report(ReportArgs),
    /// Finite-difference gradient self-check.
    Gradcheck(GradcheckArgs),
    /// Structural invariant self-checks.
    Invariants(InvariantsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset path (JSONL).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    graphs: usize,
    #[arg(long, default_value_t = 5)]
    nodes_min: usize,
    #[arg(long, default_value_t = 15)]
    nodes_max: usize,
    #[arg(long, default_value_t = 4)]
    d_node: usize,
    #[arg(long, default_value_t = 2)]
    d_edge: usize,
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    /// Attach 3-D node coordinates.
    #[arg(long, default_value_t = false)]
    coords: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Architecture: gcn, gat, mpnn, or egnn.
    #[arg(long)]
    arch: String,
    /// Output directory, receives model.json and train_log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Inner-loop learning rate.
    #[arg(long, default_value_t = 5e-3)]
    alpha: f64,
    /// Outer interpolation rate.
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    /// Inner-loop steps.
    #[arg(long, default_value_t = 5)]
    inner_steps: usize,
    /// Support-set size.
    #[arg(long, default_value_t = 10)]
    support: usize,
    /// Outer iterations.
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    /// Train fraction of the graph split.
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    /// Task index excluded from meta-training.
    #[arg(long)]
    holdout_task: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model path (omit with --random-init).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Evaluate freshly initialized models instead of a trained one.
    #[arg(long, default_value_t = false)]
    random_init: bool,
    /// Architecture for --random-init.
    #[arg(long)]
    arch: Option<String>,
    /// Output report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Task indices to evaluate (default: all).
    #[arg(long)]
    task: Vec<usize>,
    #[arg(long, default_value_t = 5e-3)]
    alpha: f64,
    /// Adaptation steps per trial.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    support: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Train fraction used to rebuild the split and normalizer
    /// (trained models carry their own; required for --random-init).
    #[arg(long)]
    train_frac: Option<f64>,
    /// Split seed matching the one used at training time.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EnsembleEvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Member model paths, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    params: Vec<PathBuf>,
    /// Aggregation: average or learned.
    #[arg(long, default_value = "average")]
    agg: String,
    /// Optional path to save the assembled ensemble (JSON).
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Task indices to evaluate (default: all).
    #[arg(long)]
    task: Vec<usize>,
    #[arg(long, default_value_t = 5e-3)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    support: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation CSVs to aggregate.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Task names to exclude.
    #[arg(long, num_args = 0..)]
    exclude: Vec<String>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Architecture to check (default: all four).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InvariantsArgs {
    /// Architecture to check (default: all four).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// Error to exit-code mapping

#[derive(Debug)]
enum CliError {
    Validation(String),
    Divergence(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Divergence(m) | CliError::Io(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::Diverged { .. } => CliError::Divergence(e.to_string()),
            MetaError::Io(_) => CliError::Io(e.to_string()),
            MetaError::Model(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Io(_) => CliError::Io(e.to_string()),
            EnsembleError::Meta(m) => m.into(),
            EnsembleError::Model(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Io(e.to_string()),
            EvalError::Meta(m) => m.into(),
            EvalError::Ensemble(m) => m.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Contract(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: failed to configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::EnsembleEval(a) => cmd_ensemble_eval(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Invariants(a) => cmd_invariants(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        num_graphs: a.graphs,
        nodes_min: a.nodes_min,
        nodes_max: a.nodes_max,
        d_node: a.d_node,
        d_edge: a.d_edge,
        num_tasks: a.tasks,
        with_coords: a.coords,
    };
    let ds = synth_generate(&spec, a.seed)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} graphs, {} tasks to {}", ds.graphs.len(), ds.num_tasks(), a.out.display());
    Ok(())
}

fn resolve_tasks(ds: &Dataset, indices: &[usize]) -> Result<Vec<usize>, CliError> {
    if indices.is_empty() {
        return Ok((0..ds.num_tasks()).collect());
    }
    for &i in indices {
        if i >= ds.num_tasks() {
            return Err(CliError::Validation(format!(
                "task index {i} out of range ({} tasks)",
                ds.num_tasks()
            )));
        }
    }
    Ok(indices.to_vec())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    // validate the full configuration before writing anything
    let kind = ArchKind::parse(&a.arch)?;
    let ds = load_dataset(&a.data)?;
    if kind.uses_coords() && !ds.has_coords {
        return Err(CliError::Validation("egnn requires a dataset with coordinates".into()));
    }
    if let Some(h) = a.holdout_task {
        if h >= ds.num_tasks() {
            return Err(CliError::Validation(format!(
                "holdout task {h} out of range ({} tasks)",
                ds.num_tasks()
            )));
        }
    }
    let train_targets: Vec<usize> =
        (0..ds.num_tasks()).filter(|&t| a.holdout_task != Some(t)).collect();
    if train_targets.is_empty() {
        return Err(CliError::Validation("holdout excludes every task".into()));
    }
    let cfg = MetaConfig {
        inner_lr: a.alpha,
        meta_lr: a.beta,
        inner_steps: a.inner_steps,
        support_size: a.support,
        epochs: a.epochs,
        seed: a.seed,
    };
    cfg.validate().map_err(CliError::from)?;

    let (train_split, _test_split) = split_dataset(&ds, a.train_frac, a.seed)?;
    let norm = zscore_fit(&ds, &train_split)?;
    let arch = Architecture::new(kind, ds.d_node, ds.d_edge);
    let init = model_init(arch, a.seed)?;
    let (trained, log) = reptile_train(&init, &ds, &train_targets, &train_split, &norm, &cfg)?;

    let hyperparams = json!({
        "alpha": a.alpha,
        "beta": a.beta,
        "inner_steps": a.inner_steps,
        "support": a.support,
        "epochs": a.epochs,
        "seed": a.seed,
        "train_frac": a.train_frac,
        "split_seed": a.seed,
        "norm_mean": norm.mean,
        "norm_std": norm.std,
        "holdout_task": a.holdout_task,
    });
    std::fs::create_dir_all(&a.out)?;
    save_model(&trained, &hyperparams, a.out.join("model.json"))?;
    log.save_csv(a.out.join("train_log.csv"))?;
    println!(
        "trained {} for {} iterations on {} tasks; artifacts in {}",
        kind.name(),
        a.epochs,
        train_targets.len(),
        a.out.display()
    );
    Ok(())
}

fn norm_from_hyperparams(hp: &Value) -> Option<Normalizer> {
    let mean = hp.get("norm_mean")?.as_f64()?;
    let std = hp.get("norm_std")?.as_f64()?;
    (std > 0.0).then_some(Normalizer { mean, std })
}

fn split_from_hyperparams(ds: &Dataset, hp: &Value) -> Option<(Vec<usize>, Vec<usize>)> {
    let frac = hp.get("train_frac")?.as_f64()?;
    let seed = hp.get("split_seed")?.as_u64()?;
    split_dataset(ds, frac, seed).ok()
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let targets = resolve_tasks(&ds, &a.task)?;
    let cfg = EvalConfig {
        alpha: a.alpha,
        k: a.steps,
        support_size: a.support,
        trials: a.trials,
        seed: a.seed,
    };
    cfg.validate().map_err(CliError::from)?;

    let (model_name, init_name, stats) = if a.random_init {
        let arch_name = a
            .arch
            .as_deref()
            .ok_or_else(|| CliError::Validation("--random-init requires --arch".into()))?;
        let kind = ArchKind::parse(arch_name)?;
        if kind.uses_coords() && !ds.has_coords {
            return Err(CliError::Validation("egnn requires a dataset with coordinates".into()));
        }
        let frac = a
            .train_frac
            .ok_or_else(|| CliError::Validation("--random-init requires --train-frac".into()))?;
        let split_seed = a.split_seed.unwrap_or(a.seed);
        let (train_split, test_split) = split_dataset(&ds, frac, split_seed)?;
        let norm = zscore_fit(&ds, &train_split)?;
        let arch = Architecture::new(kind, ds.d_node, ds.d_edge);
        let stats = baseline_random(arch, &ds, &targets, &test_split, &norm, &cfg)?;
        (kind.name().to_string(), "random".to_string(), stats)
    } else {
        let model_path = a
            .params
            .as_ref()
            .ok_or_else(|| CliError::Validation("provide --params or --random-init".into()))?;
        let (mp, hp) = load_model(model_path)?;
        if mp.arch.kind.uses_coords() && !ds.has_coords {
            return Err(CliError::Validation("egnn requires a dataset with coordinates".into()));
        }
        let norm = match norm_from_hyperparams(&hp) {
            Some(n) => n,
            None => {
                let frac = a.train_frac.ok_or_else(|| {
                    CliError::Validation(
                        "model carries no normalizer; pass --train-frac and --split-seed".into(),
                    )
                })?;
                let (train_split, _) = split_dataset(&ds, frac, a.split_seed.unwrap_or(a.seed))?;
                zscore_fit(&ds, &train_split)?
            }
        };
        let test_split = match (a.train_frac, split_from_hyperparams(&ds, &hp)) {
            (Some(frac), _) => split_dataset(&ds, frac, a.split_seed.unwrap_or(a.seed))?.1,
            (None, Some((_, test))) => test,
            (None, None) => {
                return Err(CliError::Validation(
                    "model carries no split settings; pass --train-frac and --split-seed".into(),
                ))
            }
        };
        let stats = evaluate(&Predictor::Single(mp.clone()), &ds, &targets, &test_split, &norm, &cfg)?;
        (mp.arch.kind.name().to_string(), "meta".to_string(), stats)
    };

    let report = EvalReport { model: model_name, init: init_name, k: cfg.k, rows: stats };
    report.save_csv(&a.out)?;
    println!("wrote evaluation report to {}", a.out.display());
    Ok(())
}

fn cmd_ensemble_eval(a: EnsembleEvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let targets = resolve_tasks(&ds, &a.task)?;
    let mode = EnsembleMode::parse(&a.agg)?;
    let cfg = EvalConfig {
        alpha: a.alpha,
        k: a.steps,
        support_size: a.support,
        trials: a.trials,
        seed: a.seed,
    };
    cfg.validate().map_err(CliError::from)?;

    let mut members = Vec::new();
    let mut hp = Value::Null;
    for path in &a.params {
        let (mp, h) = load_model(path)?;
        members.push(mp);
        hp = h;
    }
    let ens = ensemble_init(members, mode)?;
    let arch = ens.members[0].arch;
    if arch.kind.uses_coords() && !ds.has_coords {
        return Err(CliError::Validation("egnn requires a dataset with coordinates".into()));
    }
    let norm = norm_from_hyperparams(&hp)
        .ok_or_else(|| CliError::Validation("member models carry no normalizer".into()))?;
    let (_, test_split) = split_from_hyperparams(&ds, &hp)
        .ok_or_else(|| CliError::Validation("member models carry no split settings".into()))?;

    if let Some(save) = &a.save {
        save_ensemble(&ens, &hp, save)?;
    }
    let stats = evaluate(&Predictor::Ensemble(ens), &ds, &targets, &test_split, &norm, &cfg)?;
    let report = EvalReport {
        model: format!("{}-x{}-{}", arch.kind.name(), a.params.len(), mode.name()),
        init: "meta".into(),
        k: cfg.k,
        rows: stats,
    };
    report.save_csv(&a.out)?;
    println!("wrote ensemble report to {}", a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let exclude: Vec<&str> = a.exclude.iter().map(String::as_str).collect();
    let mut out_lines = vec!["model,init,pre_mean,pre_std,step1_mean,step1_std,final_mean,final_std".to_string()];
    for path in &a.inputs {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CliError::Validation(format!("{}: empty report", path.display())))?;
        if !header.starts_with("model,init,task,trials,pre_mean") {
            return Err(CliError::Validation(format!(
                "{}: unrecognized report header",
                path.display()
            )));
        }
        let mut model = String::new();
        let mut init = String::new();
        let mut stats = Vec::new();
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(CliError::Validation(format!(
                    "{}:{}: expected 10 fields, got {}",
                    path.display(),
                    ln + 2,
                    fields.len()
                )));
            }
            model = fields[0].to_string();
            init = fields[1].to_string();
            let parse = |s: &str| -> Result<f64, CliError> {
                s.parse::<f64>()
                    .map_err(|_| CliError::Validation(format!("{}: bad number '{s}'", path.display())))
            };
            stats.push(TaskStats {
                task: fields[2].to_string(),
                trials: fields[3]
                    .parse()
                    .map_err(|_| CliError::Validation(format!("bad trial count '{}'", fields[3])))?,
                mean: vec![parse(fields[4])?, parse(fields[6])?, parse(fields[8])?],
                std: vec![parse(fields[5])?, parse(fields[7])?, parse(fields[9])?],
            });
        }
        if stats.is_empty() {
            return Err(CliError::Validation(format!("{}: no task rows", path.display())));
        }
        let agg = aggregate_across_tasks(&stats, &exclude).map_err(CliError::from)?;
        out_lines.push(format!(
            "{model},{init},{},{},{},{},{},{}",
            metagnn::data::sci3(agg.mean[0]),
            metagnn::data::sci3(agg.std[0]),
            metagnn::data::sci3(agg.mean[1]),
            metagnn::data::sci3(agg.std[1]),
            metagnn::data::sci3(agg.mean[2]),
            metagnn::data::sci3(agg.std[2]),
        ));
    }
    let text = out_lines.join("\n") + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn tiny_dataset(coords: bool, seed: u64) -> Result<Dataset, CliError> {
    Ok(synth_generate(
        &SynthSpec {
            num_graphs: 4,
            nodes_min: 4,
            nodes_max: 7,
            d_node: 3,
            d_edge: 2,
            num_tasks: 2,
            with_coords: coords,
        },
        seed,
    )?)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let kinds: Vec<ArchKind> = match &a.arch {
        Some(name) => vec![ArchKind::parse(name)?],
        None => vec![ArchKind::Gcn, ArchKind::Gat, ArchKind::Mpnn, ArchKind::Egnn],
    };
    let mut failed = false;
    for kind in kinds {
        let ds = tiny_dataset(true, a.seed)?;
        let mut arch = Architecture::new(kind, ds.d_node, ds.d_edge);
        arch.hidden_dim = 8;
        let mp = model_init(arch, a.seed.wrapping_add(1))?;
        let indices = vec![0, 1, 2];
        let labels: Vec<f64> = indices.iter().map(|&i| ds.graphs[i].targets[0]).collect();
        let batch = GraphBatch::from_graphs(&ds, &indices, &labels);
        let err = model_gradcheck(&mp, &batch, a.probes, 1e-5, a.seed)?;
        let ok = err < a.tolerance;
        println!(
            "{} gradcheck: max relative error {:.3e} [{}]",
            kind.name(),
            err,
            if ok { "pass" } else { "FAIL" }
        );
        failed |= !ok;
    }
    if failed {
        return Err(CliError::Validation("gradient check failed".into()));
    }
    Ok(())
}

fn permute_dataset(ds: &Dataset, rng: &mut ChaCha8Rng) -> Dataset {
    let mut out = ds.clone();
    for g in &mut out.graphs {
        let mut perm: Vec<usize> = (0..g.num_nodes).collect();
        perm.shuffle(rng);
        let mut feats = vec![vec![]; g.num_nodes];
        for (old, row) in g.node_feats.iter().enumerate() {
            feats[perm[old]] = row.clone();
        }
        g.node_feats = feats;
        if let Some(c) = &mut g.coords {
            let mut moved = vec![[0.0; 3]; g.num_nodes];
            for (old, row) in c.iter().enumerate() {
                moved[perm[old]] = *row;
            }
            *c = moved;
        }
        for (i, j) in g.edges.iter_mut() {
            let (p, q) = (perm[*i], perm[*j]);
            *i = p.min(q);
            *j = p.max(q);
        }
    }
    out
}

fn predictions(mp: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>, CliError> {
    let labels: Vec<f64> = indices.iter().map(|&i| ds.graphs[i].targets[0]).collect();
    let batch = GraphBatch::from_graphs(ds, indices, &labels);
    let mut tape = Tape::new();
    let bound = mp.params.bind(&mut tape);
    let (preds, _) = model_forward(&mut tape, mp, &bound, &batch, Mode::Eval)?;
    Ok(tape.data(preds).to_vec())
}

fn cmd_invariants(a: InvariantsArgs) -> Result<(), CliError> {
    let mut failed = false;
    let mut check = |name: &str, ok: bool| {
        println!("{name}: [{}]", if ok { "pass" } else { "FAIL" });
        failed |= !ok;
    };

    let ds = tiny_dataset(true, a.seed)?;
    let indices = vec![0, 1, 2, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(7));
    let kinds: Vec<ArchKind> = match &a.arch {
        Some(name) => vec![ArchKind::parse(name)?],
        None => vec![ArchKind::Gcn, ArchKind::Gat, ArchKind::Mpnn, ArchKind::Egnn],
    };

    // node-permutation invariance, every requested architecture
    for kind in kinds.iter().copied() {
        let mut arch = Architecture::new(kind, ds.d_node, ds.d_edge);
        arch.hidden_dim = 8;
        let mp = model_init(arch, a.seed.wrapping_add(1))?;
        let base = predictions(&mp, &ds, &indices)?;
        let mut ok = true;
        for _ in 0..50 {
            let permuted = permute_dataset(&ds, &mut rng);
            let p = predictions(&mp, &permuted, &indices)?;
            ok &= base.iter().zip(&p).all(|(x, y)| (x - y).abs() < 1e-9);
        }
        check(&format!("{} permutation invariance (50 draws)", kind.name()), ok);
    }

    // E(3) equivariance of the coordinate stream and invariance of the
    // scalar prediction
    if kinds.contains(&ArchKind::Egnn) {
        let mut arch = Architecture::new(ArchKind::Egnn, ds.d_node, ds.d_edge);
        arch.hidden_dim = 8;
        let mp = model_init(arch, a.seed.wrapping_add(2))?;
        let labels: Vec<f64> = indices.iter().map(|&i| ds.graphs[i].targets[0]).collect();
        let batch = GraphBatch::from_graphs(&ds, &indices, &labels);
        let base_pred = predictions(&mp, &ds, &indices)?;
        let (_, base_x) = egnn_first_layer(&mp, &batch, Mode::Eval)?;
        let mut ok = true;
        for _ in 0..20 {
            let q = random_orthogonal(&mut rng);
            let t: [f64; 3] = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let mut moved = batch.clone();
            let coords = moved.coords.as_mut().unwrap();
            for row in 0..coords.shape[0] {
                let p = [coords.data[row * 3], coords.data[row * 3 + 1], coords.data[row * 3 + 2]];
                for c in 0..3 {
                    coords.data[row * 3 + c] = q[c][0] * p[0] + q[c][1] * p[1] + q[c][2] * p[2] + t[c];
                }
            }
            let (_, x2) = egnn_first_layer(&mp, &moved, Mode::Eval)?;
            for row in 0..base_x.shape[0] {
                let p = [base_x.data[row * 3], base_x.data[row * 3 + 1], base_x.data[row * 3 + 2]];
                for c in 0..3 {
                    let want = q[c][0] * p[0] + q[c][1] * p[1] + q[c][2] * p[2] + t[c];
                    ok &= (x2.data[row * 3 + c] - want).abs() < 1e-9;
                }
            }
            let mut moved_ds = ds.clone();
            for (gi, &idx) in indices.iter().enumerate() {
                let _ = gi;
                if let Some(c) = &mut moved_ds.graphs[idx].coords {
                    for row in c.iter_mut() {
                        let p = *row;
                        for ch in 0..3 {
                            row[ch] = q[ch][0] * p[0] + q[ch][1] * p[1] + q[ch][2] * p[2] + t[ch];
                        }
                    }
                }
            }
            let p2 = predictions(&mp, &moved_ds, &indices)?;
            ok &= base_pred.iter().zip(&p2).all(|(x, y)| (x - y).abs() < 1e-9);
        }
        check("egnn E(3) equivariance (20 transforms)", ok);
    }

    // per-graph locality: predictions for a graph do not depend on what
    // else is in the batch
    {
        let mut arch = Architecture::new(ArchKind::Gcn, ds.d_node, ds.d_edge);
        arch.hidden_dim = 8;
        let mp = model_init(arch, a.seed.wrapping_add(3))?;
        let solo = predictions(&mp, &ds, &[1])?;
        let batched = predictions(&mp, &ds, &indices)?;
        check("per-graph batch locality", (solo[0] - batched[1]).abs() < 1e-9);
    }

    if failed {
        return Err(CliError::Validation("invariant check failed".into()));
    }
    Ok(())
}

fn random_orthogonal(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    loop {
        let mut q = [[0.0f64; 3]; 3];
        for row in q.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut ok = true;
        for i in 0..3 {
            for j in 0..i {
                let dot: f64 = (0..3).map(|k| q[i][k] * q[j][k]).sum();
                for k in 0..3 {
                    q[i][k] -= dot * q[j][k];
                }
            }
            let norm: f64 = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-3 {
                ok = false;
                break;
            }
            for k in 0..3 {
                q[i][k] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}
