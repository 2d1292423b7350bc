//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multigran::data::{gen_synthetic, Dataset, Split, SynthConfig};
use multigran::induce;
use multigran::model::{Backbone, ModelSpec, Variant};
use multigran::par::Execution;
use multigran::taxonomy::Taxonomy;
use multigran::train::{self, TrainConfig, TrainedModel};

#[derive(Parser)]
#[command(name = "multigran", version, about = "Multi-granularity fine-grained classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical dataset (train.csv, test.csv, taxonomy.txt).
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Alpha/beta loss-weight sweep on a two-level dataset.
    Sweep(SweepArgs),
    /// Induce a label hierarchy by clustering class centroids.
    BuildHierarchy(BuildHierarchyArgs),
    /// Parse and validate a taxonomy file.
    ValidateTax(ValidateTaxArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Level sizes coarse to fine, e.g. 4,16. Each must divide the next.
    #[arg(long, value_delimiter = ',', required = true)]
    tax_shape: Vec<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    s_coarse: f64,
    #[arg(long, default_value_t = 3.0)]
    s_fine: f64,
    #[arg(long, default_value_t = 1.5)]
    noise: f64,
}

/// Model and optimizer settings shared by `train` and `sweep`. Flags override
/// values read from `--config`.
#[derive(Args)]
struct ModelArgs {
    /// key=value training config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.csv, test.csv and taxonomy.txt.
    #[arg(long)]
    data_dir: PathBuf,
    /// Hidden widths of the MLP backbone; `none` for a single linear layer.
    #[arg(long, default_value = "128,128")]
    hidden: String,
    /// Embedding width D.
    #[arg(long, default_value_t = 600)]
    feature_dim: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    lr_heads: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    variant: String,
    #[command(flatten)]
    model: ModelArgs,
    /// Per-level loss weights, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    loss_weights: Option<Vec<f64>>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Output directory for checkpoint.txt and metrics.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// train or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional metrics CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "vanilla_single")]
    variant: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Worker threads for independent cells; 1 runs sequentially.
    #[arg(long)]
    jobs: Option<usize>,
    /// Sweep CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildHierarchyArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Sizes of the induced coarser levels, coarse to fine.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<usize>,
    /// Cluster backbone embeddings of this checkpoint instead of raw features.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateTaxArgs {
    #[arg(long)]
    file: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

struct DataDir {
    taxonomy: Arc<Taxonomy>,
    train: Dataset,
    test: Dataset,
}

fn load_data_dir(dir: &Path) -> Result<DataDir> {
    let tax_path = dir.join("taxonomy.txt");
    let taxonomy = Arc::new(
        Taxonomy::parse(&read(&tax_path)?)
            .with_context(|| format!("invalid taxonomy {}", tax_path.display()))?,
    );
    let load = |name: &str, split: Split| -> Result<Dataset> {
        let path = dir.join(name);
        Dataset::load_csv(&read(&path)?, taxonomy.clone(), split)
            .with_context(|| format!("invalid dataset {}", path.display()))
    };
    Ok(DataDir {
        train: load("train.csv", Split::Train)?,
        test: load("test.csv", Split::Test)?,
        taxonomy,
    })
}

fn build_config(args: &ModelArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::parse(&read(path)?)
            .with_context(|| format!("invalid config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr_backbone {
        cfg.lr_backbone = v;
    }
    if let Some(v) = args.lr_heads {
        cfg.lr_heads = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn build_spec(variant: &str, args: &ModelArgs, data: &DataDir, seed: u64) -> Result<ModelSpec> {
    let hidden = if args.hidden == "none" {
        Vec::new()
    } else {
        args.hidden
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad --hidden `{}`", args.hidden))?
    };
    let spec = ModelSpec {
        variant: variant.parse::<Variant>()?,
        input_dim: data.train.dim(),
        backbone: Backbone::Mlp(hidden),
        feature_dim: args.feature_dim,
        level_sizes: data.taxonomy.level_sizes(),
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        level_sizes: args.tax_shape,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        dim: args.dim,
        s_coarse: args.s_coarse,
        s_fine: args.s_fine,
        noise: args.noise,
        seed: multigran::seed::sub_seed(args.seed, "data"),
    };
    if cfg.scales_overlap() {
        eprintln!("warning: s_coarse <= s_fine; coarse clusters will overlap");
    }
    let synth = gen_synthetic(&cfg)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    write(&args.out_dir.join("taxonomy.txt"), &synth.taxonomy.to_file_string())?;
    write(&args.out_dir.join("train.csv"), &synth.train.to_csv_string())?;
    write(&args.out_dir.join("test.csv"), &synth.test.to_csv_string())?;
    println!(
        "wrote {}: levels {:?}, dim {}, train N={}, test N={}",
        args.out_dir.display(),
        synth.taxonomy.level_sizes(),
        cfg.dim,
        synth.train.len(),
        synth.test.len()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let data = load_data_dir(&args.model.data_dir)?;
    let mut cfg = build_config(&args.model)?;
    if let Some(w) = args.loss_weights {
        cfg.loss_weights = w;
    }
    if let Some(e) = args.eval_every {
        cfg.eval_every = e;
    }
    let spec = build_spec(&args.variant, &args.model, &data, cfg.seed)?;
    let out = train::train(&spec, &data.train, &data.test, &cfg)?;

    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    write(&args.out.join("checkpoint.txt"), &out.model.to_checkpoint())?;
    write(&args.out.join("metrics.csv"), &out.final_metrics.to_csv())?;
    let mut history = String::from("epoch,train_loss\n");
    for r in &out.history {
        history.push_str(&format!("{},{}\n", r.epoch + 1, r.train_loss));
    }
    write(&args.out.join("history.csv"), &history)?;
    println!(
        "variant {} | train loss {:.4} -> {:.4}",
        spec.variant,
        out.initial_train_loss,
        out.final_train_loss()
    );
    println!("{}", out.final_metrics);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let data = load_data_dir(&args.data_dir)?;
    let model = TrainedModel::from_checkpoint(&read(&args.checkpoint)?)
        .with_context(|| format!("invalid checkpoint {}", args.checkpoint.display()))?;
    let ds = match args.split.as_str() {
        "train" => &data.train,
        "test" => &data.test,
        other => bail!(multigran::Error::Config(format!("unknown split `{other}`"))),
    };
    if model.params.spec().level_sizes != data.taxonomy.level_sizes() {
        bail!(multigran::Error::Config(
            "checkpoint levels do not match the dataset taxonomy".into()
        ));
    }
    let metrics = model.evaluate(ds)?;
    if let Some(out) = &args.out {
        write(out, &metrics.to_csv())?;
    }
    println!("{metrics}");
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let data = load_data_dir(&args.model.data_dir)?;
    if data.taxonomy.depth() != 2 {
        bail!(multigran::Error::Config(format!(
            "sweep needs a 2-level taxonomy, got {} levels",
            data.taxonomy.depth()
        )));
    }
    let cfg = build_config(&args.model)?;
    let spec = build_spec(&args.variant, &args.model, &data, cfg.seed)?;
    let result = train::sweep_alpha_beta(
        &spec,
        &data.train,
        &data.test,
        &cfg,
        &args.alphas,
        &args.betas,
        &args.seeds,
        Execution::with_jobs(args.jobs),
    )?;
    write(&args.out, &result.to_csv())?;
    print!("{}", result.summary_table());
    Ok(())
}

fn build_hierarchy_cmd(args: BuildHierarchyArgs) -> Result<()> {
    let data = load_data_dir(&args.data_dir)?;
    let model = match &args.checkpoint {
        Some(p) => Some(TrainedModel::from_checkpoint(&read(p)?)?),
        None => None,
    };
    let c = induce::centroids(&data.train, model.as_ref())?;
    let tax = induce::build_hierarchy(&c, &args.levels)?;
    write(&args.out, &tax.to_file_string())?;
    println!("wrote {}: levels {:?}", args.out.display(), tax.level_sizes());
    Ok(())
}

fn validate_tax(args: ValidateTaxArgs) -> Result<()> {
    let tax = Taxonomy::parse(&read(&args.file)?)
        .with_context(|| format!("invalid taxonomy {}", args.file.display()))?;
    tax.validate().map_err(multigran::Error::from)?;
    println!("ok: {} levels, sizes {:?}", tax.depth(), tax.level_sizes());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<multigran::Error>() {
        Some(multigran::Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::BuildHierarchy(a) => build_hierarchy_cmd(a),
        Command::ValidateTax(a) => validate_tax(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
