//! Experiment harness and the `treemaml` command line.

pub mod harness;
pub mod report;
pub mod spec;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::clustering::TreeDump;
use crate::error::{Error, Result};
use crate::meta::{AdaptationTrace, Checkpoint, Mode};
use crate::tasks::TaskDistribution;

pub use harness::{run_cell, run_experiment, CellFailure, CellOutcome, RunResult};
pub use report::{emit_table, CsvRow};
pub use spec::{CellKey, ExperimentSpec};

#[derive(Debug, Parser)]
#[command(name = "treemaml", about = "MAML / TreeMAML experiments on hierarchical linear regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment grid.
    Run(RunArgs),
    /// Write the cluster centers of a generator seed as JSON.
    ExportDist {
        /// Spec file supplying the generator (defaults otherwise).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Version,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub spec: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub mode: Option<Vec<Mode>>,
    #[arg(long, value_delimiter = ',')]
    pub points: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    #[arg(long, default_value = "results")]
    pub out_dir: PathBuf,
    /// Write the cluster tree of the first meta-test task of each tree cell.
    #[arg(long)]
    pub dump_tree: bool,
    #[arg(long, value_enum)]
    pub second_order: Option<Switch>,
    /// Fill the wall_seconds column (makes results.csv run-dependent).
    #[arg(long)]
    pub timings: bool,
    /// Save the meta-trained parameters of every cell.
    #[arg(long)]
    pub checkpoints: bool,
    /// Also write per-task test errors.
    #[arg(long)]
    pub per_task: bool,
    #[arg(long)]
    pub meta_test_tasks: Option<usize>,
    #[arg(long)]
    pub outer_iterations: Option<usize>,
}

impl RunArgs {
    pub fn resolve_spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::load(&self.spec)?;
        if let Some(m) = &self.mode {
            spec.modes = m.clone();
        }
        if let Some(p) = &self.points {
            spec.points_sweep = p.clone();
        }
        if let Some(s) = &self.seed {
            spec.replicate_seeds = s.clone();
        }
        if let Some(so) = self.second_order {
            spec.meta.second_order = so == Switch::On;
        }
        if let Some(n) = self.meta_test_tasks {
            spec.meta_test_tasks = n;
        }
        if let Some(n) = self.outer_iterations {
            spec.meta.outer_iterations = n;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Write the centers of `spec`'s generator under `seed`.
pub fn export_distribution(spec: &ExperimentSpec, seed: u64, path: &Path) -> Result<()> {
    TaskDistribution::with_seed(spec.generator.clone(), seed)?.save(path)
}

pub fn export_tree(trace: &AdaptationTrace, path: &Path) -> Result<()> {
    trace.to_tree_dump().save(path)
}

fn file_stem(key: CellKey) -> String {
    format!("{}_p{}_s{}", key.mode, key.points, key.seed)
}

/// Execute `run`; returns the process exit code.
pub fn execute_run(args: &RunArgs) -> Result<i32> {
    let spec = args.resolve_spec()?;
    let out = &args.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let outcomes = run_experiment(&spec)?;
    let ok: Vec<RunResult> = outcomes.iter().filter_map(|o| o.as_ref().ok().cloned()).collect();
    let failures: Vec<(CellKey, String)> = outcomes
        .iter()
        .filter_map(|o| o.as_ref().err().map(|f| (f.key, f.error.to_string())))
        .collect();

    let table = emit_table(&ok, out, args.timings)?;
    report::write_log(&outcomes, &out.join("log.jsonl"))?;
    if args.per_task {
        report::write_per_task(&ok, &out.join("per_task.csv"))?;
    }
    for seed in &spec.replicate_seeds {
        let name = if spec.replicate_seeds.len() == 1 {
            "centers.json".to_string()
        } else {
            format!("centers_s{seed}.json")
        };
        export_distribution(&spec, *seed, &out.join(name))?;
    }
    for r in &ok {
        if args.dump_tree {
            if let Some(tree) = &r.first_tree {
                tree.save(&out.join(format!("tree_{}.json", file_stem(r.key))))?;
            }
        }
        if args.checkpoints {
            let it = r.train_log.len();
            Checkpoint::new(&r.omega, &r.config, it).save(&out.join(format!("omega_{}.json", file_stem(r.key))))?;
        }
    }

    print!("{table}");
    if failures.is_empty() {
        Ok(0)
    } else {
        eprint!("{}", report::cell_summary(&failures));
        Ok(1)
    }
}

pub fn main_with(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(args) => execute_run(&args),
        Command::ExportDist { spec, seed, out } => spec
            .map_or_else(|| Ok(ExperimentSpec::default()), |p| ExperimentSpec::load(&p))
            .and_then(|s| export_distribution(&s, seed, &out))
            .map(|_| 0),
        Command::Version => {
            println!("treemaml {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        2
    })
}

/// Convenience for tests: dumps are re-read via [`TreeDump::load`].
pub fn load_tree(path: &Path) -> Result<TreeDump> {
    TreeDump::load(path)
}
