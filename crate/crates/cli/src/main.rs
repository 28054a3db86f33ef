use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dagrl::experiment::{
    emit_report, group_prefix, parse_pairs, run_plan_on_dataset, write_failure_manifest, write_run_artifacts,
    ExperimentPlan,
};
use dagrl::graph::{edge_density, parse_tudataset, split_by_density, write_tudataset, Domain, DomainDataset};
use dagrl::synthetic::{shift_task, ShiftTaskConfig};
use dagrl::trainer::{TrainConfig, Variant};
use dagrl::wl::{gram_matrix, write_gram_csv, WlLabeler};

#[derive(Parser)]
#[command(name = "dagrl", version, about = "Domain-adaptive graph classification experiments", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (source, target, seed) run of a transfer plan.
    Run(RunArgs),
    /// Print the four edge-density groups of a dataset.
    Split(DatasetArgs),
    /// Write the WL-kernel Gram matrix of a dataset as CSV.
    Gram {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Cosine-normalise the kernel.
        #[arg(long)]
        normalized: bool,
    },
    /// Write the synthetic density-shift task as one TU-format dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "Synthetic")]
        name: String,
        #[arg(long, default_value_t = 160)]
        graphs_per_domain: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    dataset: String,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// `all` or `s,t[;s,t...]` over groups 0..3.
    #[arg(long, default_value = "all")]
    pairs: String,
    /// full, p1, p2, gin-only or gkn-only.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    wl_depth: Option<usize>,
    /// Disable both perturbations.
    #[arg(long)]
    no_perturb: bool,
}

impl RunArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
        }
        macro_rules! override_field {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        override_field!(epochs, lr, lambda1, lambda2, epsilon, hidden_dim, batch_size, wl_depth, variant);
        if self.no_perturb {
            cfg.perturb = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(data: &DatasetArgs) -> Result<DomainDataset> {
    parse_tudataset(&data.data_root, &data.dataset)
        .with_context(|| format!("loading {} from {}", data.dataset, data.data_root.display()))
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let config = args.train_config()?;
    let plan = ExperimentPlan {
        data_root: args.data.data_root.clone(),
        dataset: args.data.dataset.clone(),
        pairs: parse_pairs(&args.pairs)?,
        config,
        seeds: args.seeds.clone(),
    };
    plan.validate()?;
    let dataset = load(&args.data)?;
    let prefix = group_prefix(&plan.dataset);
    eprintln!(
        "{}: {} graphs, {} runs, variant {}",
        plan.dataset,
        dataset.len(),
        plan.runs().len(),
        plan.config.variant
    );
    let outcome = run_plan_on_dataset(&plan, &dataset)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.txt"), plan.config.to_text())
        .with_context(|| format!("writing config to {}", args.out.display()))?;
    for r in &outcome.runs {
        write_run_artifacts(r, &prefix, &args.out)?;
    }
    if !outcome.table.is_empty() {
        emit_report(&outcome.table, &args.out)?;
        print!("{}", outcome.table.summary_csv());
    }
    if outcome.all_completed() {
        return Ok(ExitCode::SUCCESS);
    }
    let manifest = write_failure_manifest(&outcome.failures, &prefix, &args.out)?;
    for f in &outcome.failures {
        eprintln!("failed: {prefix}{}->{prefix}{} seed {}: {}", f.source, f.target, f.seed, f.error);
    }
    eprintln!(
        "{} of {} runs failed; see {}",
        outcome.failures.len(),
        plan.runs().len(),
        manifest.display()
    );
    Ok(ExitCode::FAILURE)
}

fn split(data: &DatasetArgs) -> Result<()> {
    let ds = load(data)?;
    let part = split_by_density(&ds)?;
    let prefix = group_prefix(&data.dataset);
    println!("group,graphs,min_density,max_density");
    for (g, idx) in part.groups.iter().enumerate() {
        let d: Vec<f64> = idx.iter().map(|&i| edge_density(&ds.graphs()[i])).collect();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("{prefix}{g},{},{lo},{hi}", idx.len());
    }
    Ok(())
}

fn gram(data: &DatasetArgs, out: &Path, depth: usize, normalized: bool) -> Result<()> {
    let ds = load(data)?;
    let labeler = WlLabeler::fit(ds.graphs(), depth);
    let features: Vec<_> = ds.graphs().iter().map(|g| labeler.features(g)).collect();
    let ids: Vec<usize> = (1..=ds.len()).collect();
    write_gram_csv(out, &ids, &gram_matrix(&features, normalized))?;
    eprintln!("wrote {}x{} Gram matrix to {}", ds.len(), ds.len(), out.display());
    Ok(())
}

fn synth(out: &Path, name: &str, graphs_per_domain: usize, seed: u64) -> Result<()> {
    let cfg = ShiftTaskConfig {
        graphs_per_domain,
        seed,
        ..ShiftTaskConfig::default()
    };
    let (source, target) = shift_task(&cfg)?;
    let mut graphs = source.graphs().to_vec();
    graphs.extend_from_slice(target.graphs());
    if graphs.len() < 4 {
        bail!("synthetic dataset needs at least 4 graphs");
    }
    let combined = DomainDataset::new(graphs, Domain::Source, source.num_classes(), source.label_alphabet_size())?;
    write_tudataset(&combined, out, name)?;
    eprintln!("wrote {} graphs to {}", combined.len(), out.join(name).display());
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => run(args),
        Command::Split(data) => split(data).map(|_| ExitCode::SUCCESS),
        Command::Gram {
            data,
            out,
            depth,
            normalized,
        } => gram(data, out, *depth, *normalized).map(|_| ExitCode::SUCCESS),
        Command::Synth {
            out,
            name,
            graphs_per_domain,
            seed,
        } => synth(out, name, *graphs_per_domain, *seed).map(|_| ExitCode::SUCCESS),
    }
}
