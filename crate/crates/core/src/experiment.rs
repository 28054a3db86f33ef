//! Transfer-task matrix over the density-split sub-datasets, ablations and
//! CSV report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::Checkpoint;
use crate::graph::{parse_tudataset, split_by_density, DatasetError, Domain, DomainDataset, GraphError, NUM_DENSITY_GROUPS};
use crate::trainer::{loss_history_csv, EpochRecord, TrainConfig, TrainError, TrainState, Variant};

/// Caps the worker threads used by [`run_plan`].
pub const THREADS_ENV: &str = "DAGRL_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("result table is empty; nothing written")]
    EmptyTable,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The 12 ordered pairs of distinct groups, source-major.
pub fn all_pairs() -> Vec<(usize, usize)> {
    let n = NUM_DENSITY_GROUPS;
    (0..n).flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t))).collect()
}

/// Parses `all` or `s,t[;s,t...]`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>, ExperimentError> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("all") {
        return Ok(all_pairs());
    }
    let pairs = text
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let bad = || ExperimentError::Config(format!("invalid pair {p:?}; expected s,t"));
            let (s, t) = p.split_once(',').ok_or_else(bad)?;
            Ok((s.trim().parse().map_err(|_| bad())?, t.trim().parse().map_err(|_| bad())?))
        })
        .collect::<Result<Vec<(usize, usize)>, ExperimentError>>()?;
    validate_pairs(&pairs)?;
    Ok(pairs)
}

fn validate_pairs(pairs: &[(usize, usize)]) -> Result<(), ExperimentError> {
    if pairs.is_empty() {
        return Err(ExperimentError::Config("no transfer pairs given".into()));
    }
    for &(s, t) in pairs {
        if s >= NUM_DENSITY_GROUPS || t >= NUM_DENSITY_GROUPS {
            return Err(ExperimentError::Config(format!(
                "group index out of range in pair ({s},{t}); groups are 0..{}",
                NUM_DENSITY_GROUPS - 1
            )));
        }
        if s == t {
            return Err(ExperimentError::Config(format!("pair ({s},{t}) uses the same group as source and target")));
        }
    }
    Ok(())
}

/// Sub-dataset prefix: the dataset's initial, upper-cased.
pub fn group_prefix(dataset: &str) -> String {
    dataset
        .chars()
        .next()
        .map(|c| c.to_uppercase().collect())
        .unwrap_or_else(|| "G".into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub data_root: PathBuf,
    pub dataset: String,
    pub pairs: Vec<(usize, usize)>,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    /// Every ordered pair, seeds 0, 1, 2.
    pub fn new(data_root: impl Into<PathBuf>, dataset: impl Into<String>, config: TrainConfig) -> Self {
        Self {
            data_root: data_root.into(),
            dataset: dataset.into(),
            pairs: all_pairs(),
            config,
            seeds: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        validate_pairs(&self.pairs)?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("no seeds given".into()));
        }
        self.config
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// `(source, target, seed)` in execution and report order.
    pub fn runs(&self) -> Vec<(usize, usize, u64)> {
        self.pairs
            .iter()
            .flat_map(|&(s, t)| self.seeds.iter().map(move |&seed| (s, t, seed)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultCell {
    pub source: usize,
    pub target: usize,
    pub seed: u64,
    pub accuracy: f64,
}

/// Per-pair statistics over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSummary {
    pub source: usize,
    pub target: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 with a single seed.
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub prefix: String,
    pub cells: Vec<ResultCell>,
}

impl ResultTable {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            cells: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Pairs in first-appearance order.
    pub fn summaries(&self) -> Vec<PairSummary> {
        let mut order: Vec<(usize, usize)> = Vec::new();
        for c in &self.cells {
            if !order.contains(&(c.source, c.target)) {
                order.push((c.source, c.target));
            }
        }
        order
            .into_iter()
            .map(|(s, t)| {
                let accs: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| (c.source, c.target) == (s, t))
                    .map(|c| c.accuracy)
                    .collect();
                let n = accs.len() as f64;
                let mean = accs.iter().sum::<f64>() / n;
                let std = if accs.len() > 1 {
                    (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                PairSummary {
                    source: s,
                    target: t,
                    mean,
                    std,
                    runs: accs.len(),
                }
            })
            .collect()
    }

    /// Arithmetic mean of the per-pair means.
    pub fn average(&self) -> Option<f64> {
        let s = self.summaries();
        (!s.is_empty()).then(|| s.iter().map(|p| p.mean).sum::<f64>() / s.len() as f64)
    }

    fn group(&self, g: usize) -> String {
        format!("{}{g}", self.prefix)
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("source,target,seed,accuracy\n");
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", self.group(c.source), self.group(c.target), c.seed, c.accuracy).expect("string write");
        }
        out
    }

    /// Percentages with one decimal, followed by the exact fractions.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("source,target,mean_pct,std_pct,mean,std,runs\n");
        for p in self.summaries() {
            writeln!(
                out,
                "{},{},{:.1},{:.1},{},{},{}",
                self.group(p.source),
                self.group(p.target),
                100.0 * p.mean,
                100.0 * p.std,
                p.mean,
                p.std,
                p.runs
            )
            .expect("string write");
        }
        if let Some(avg) = self.average() {
            writeln!(out, "Avg.,,{:.1},,{},,", 100.0 * avg, avg).expect("string write");
        }
        out
    }
}

/// Everything produced by one (pair, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub cell: ResultCell,
    pub history: Vec<EpochRecord>,
    pub model: Checkpoint,
    pub perturbations: Checkpoint,
}

#[derive(Debug)]
pub struct RunFailure {
    pub source: usize,
    pub target: usize,
    pub seed: u64,
    pub error: TrainError,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub table: ResultTable,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<RunFailure>,
}

impl PlanOutcome {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn run_one(
    config: &TrainConfig,
    groups: &[DomainDataset],
    source: usize,
    target: usize,
    seed: u64,
) -> Result<RunOutcome, TrainError> {
    let config = TrainConfig { seed, ..config.clone() };
    let labeled_target = &groups[target];
    let mut state = TrainState::new(config, &groups[source], &labeled_target.without_labels())?;
    state.fit(None)?;
    let accuracy = state.evaluate(labeled_target)?;
    Ok(RunOutcome {
        cell: ResultCell {
            source,
            target,
            seed,
            accuracy,
        },
        history: state.history().to_vec(),
        model: state.model_checkpoint(),
        perturbations: state.perturbations().to_checkpoint(),
    })
}

/// Runs the plan on an already parsed dataset. Individual run failures are
/// collected, not propagated.
pub fn run_plan_on_dataset(plan: &ExperimentPlan, dataset: &DomainDataset) -> Result<PlanOutcome, ExperimentError> {
    plan.validate()?;
    let partition = split_by_density(dataset)?;
    let groups = partition
        .groups
        .iter()
        .map(|idx| dataset.subset(idx, Domain::Source))
        .collect::<Result<Vec<_>, _>>()?;
    let runs = plan.runs();
    let exec = || -> Vec<_> {
        runs.par_iter()
            .map(|&(s, t, seed)| (s, t, seed, run_one(&plan.config, &groups, s, t, seed)))
            .collect()
    };
    let results = match thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?
            .install(exec),
        None => exec(),
    };
    let mut outcome = PlanOutcome {
        table: ResultTable::new(group_prefix(&plan.dataset)),
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for (source, target, seed, r) in results {
        match r {
            Ok(run) => {
                outcome.table.cells.push(run.cell);
                outcome.runs.push(run);
            }
            Err(error) => outcome.failures.push(RunFailure {
                source,
                target,
                seed,
                error,
            }),
        }
    }
    Ok(outcome)
}

/// Parses `<data_root>/<dataset>` and runs the plan.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanOutcome, ExperimentError> {
    plan.validate()?;
    let dataset = parse_tudataset(&plan.data_root, &plan.dataset)?;
    run_plan_on_dataset(plan, &dataset)
}

/// [`run_plan_on_dataset`] with the variant substituted into the config.
pub fn run_ablation(plan: &ExperimentPlan, variant: Variant, dataset: &DomainDataset) -> Result<PlanOutcome, ExperimentError> {
    let mut plan = plan.clone();
    plan.config.variant = variant;
    run_plan_on_dataset(&plan, dataset)
}

/// Writes `results.csv` and `summary.csv` into `dir`.
pub fn emit_report(table: &ResultTable, dir: &Path) -> Result<(), ExperimentError> {
    if table.is_empty() {
        return Err(ExperimentError::EmptyTable);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let results = dir.join("results.csv");
    fs::write(&results, table.results_csv()).map_err(io_err(&results))?;
    let summary = dir.join("summary.csv");
    fs::write(&summary, table.summary_csv()).map_err(io_err(&summary))?;
    Ok(())
}

/// Loss history and checkpoints of one run, named after its groups and seed.
pub fn write_run_artifacts(run: &RunOutcome, prefix: &str, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tag = format!("{prefix}{}_{prefix}{}_{}", run.cell.source, run.cell.target, run.cell.seed);
    let history = dir.join(format!("loss_history_{tag}.csv"));
    fs::write(&history, loss_history_csv(&run.history)).map_err(io_err(&history))?;
    let model = dir.join(format!("model_{tag}.ckpt"));
    fs::write(&model, run.model.to_text()).map_err(io_err(&model))?;
    let pert = dir.join(format!("perturbations_{tag}.ckpt"));
    fs::write(&pert, run.perturbations.to_text()).map_err(io_err(&pert))?;
    Ok(())
}

/// `failures.csv` with one row per failed run.
pub fn write_failure_manifest(failures: &[RunFailure], prefix: &str, dir: &Path) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = String::from("source,target,seed,error\n");
    for f in failures {
        let msg = f.error.to_string().replace(['\n', '"'], " ");
        writeln!(out, "{prefix}{},{prefix}{},{},\"{msg}\"", f.source, f.target, f.seed).expect("string write");
    }
    let path = dir.join("failures.csv");
    fs::write(&path, out).map_err(io_err(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pairs() {
        let p = all_pairs();
        assert_eq!(p.len(), 12);
        assert_eq!(p[0], (0, 1));
        assert_eq!(p[11], (3, 2));
        assert!(p.iter().all(|(s, t)| s != t));
    }

    #[test]
    fn pair_parsing() {
        assert_eq!(parse_pairs("0,1; 2,3").unwrap(), vec![(0, 1), (2, 3)]);
        assert_eq!(parse_pairs("ALL").unwrap().len(), 12);
        assert!(parse_pairs("1,1").is_err());
        assert!(parse_pairs("0,4").is_err());
        assert!(parse_pairs("0-1").is_err());
        assert!(parse_pairs("").is_err());
    }

    #[test]
    fn prefix_from_initial() {
        assert_eq!(group_prefix("Mutagenicity"), "M");
        assert_eq!(group_prefix("tox"), "T");
    }

    fn cell(source: usize, target: usize, seed: u64, accuracy: f64) -> ResultCell {
        ResultCell {
            source,
            target,
            seed,
            accuracy,
        }
    }

    #[test]
    fn single_cell_summary_row() {
        let table = ResultTable {
            prefix: "M".into(),
            cells: vec![cell(0, 1, 0, 0.779)],
        };
        let summary = table.summary_csv();
        assert!(summary.lines().nth(1).unwrap().starts_with("M0,M1,77.9,"), "{summary}");
        assert!(summary.lines().nth(2).unwrap().starts_with("Avg.,,77.9,"));
    }

    #[test]
    fn average_is_mean_of_pair_means() {
        let table = ResultTable {
            prefix: "M".into(),
            cells: vec![cell(0, 1, 0, 0.5), cell(0, 1, 1, 0.7), cell(1, 0, 0, 0.9)],
        };
        assert!((table.average().unwrap() - 0.75).abs() < 1e-15);
        let s = table.summaries();
        assert!((s[0].std - 0.2 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].std, 0.0);
    }

    #[test]
    fn empty_table_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        assert!(matches!(emit_report(&ResultTable::new("M"), &out), Err(ExperimentError::EmptyTable)));
        assert!(!out.exists());
    }

    #[test]
    fn unwritable_path_is_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let table = ResultTable {
            prefix: "M".into(),
            cells: vec![cell(0, 1, 0, 0.5)],
        };
        let err = emit_report(&table, &blocker.join("sub")).unwrap_err().to_string();
        assert!(err.contains("file"), "{err}");
    }
}
