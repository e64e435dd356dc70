//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. The two experiment grids take
//! a few minutes on one core.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use treemaml::cli::report::{rows, write_csv, CsvRow};
use treemaml::cli::{run_cell, run_experiment, CellKey, ExperimentSpec, RunResult};
use treemaml::clustering::{build_tree, ClusterConfig};
use treemaml::meta::{adapt_tree, inner_step_cluster, inner_step_task, meta_gradient, meta_train, replay_meta_loss, FixedTree, MetaConfig, Mode};
use treemaml::numerics::{finite_difference_gradient, relative_error, DEFAULT_FD_STEP};
use treemaml::rng::stream;
use treemaml::tasks::{Sample, SplitSizes};
use treemaml::{LinearRegressionModel, ParamVector, TaskDistribution, TaskGeneratorConfig, TaskInstance};

const FD_INSTANCES: usize = 50;
const FD_REL_TOL: f64 = 1e-4;
const FD_BUDGET_S: f64 = 10.0;
const DEGENERATION_RUNS: u64 = 20;
const DEGENERATION_BUDGET_S: f64 = 5.0;
const POOLING_INSTANCES: u64 = 200;
const POOLING_TOL: f64 = 1e-12;
const CLUSTER_SEQUENCES: u64 = 1000;
const CLUSTER_BUDGET_S: f64 = 10.0;
const FIXED_OVER_MAML_MAX: f64 = 0.75;
const LEARNED_OVER_FIXED_MAX: f64 = 1.25;
const GRID_BUDGET_S: f64 = 15.0 * 60.0;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn small_generator(dim: usize, depth: usize) -> TaskGeneratorConfig {
    TaskGeneratorConfig {
        dim,
        branching: vec![2; depth],
        level_scales: vec![1.0; depth + 1],
        ..Default::default()
    }
}

fn meta_config(mode: Mode, k: usize, alpha: f64) -> MetaConfig {
    MetaConfig {
        mode,
        inner_steps: k,
        inner_lr: alpha,
        fixed_tree: Some(FixedTree { depth: k - 1 }),
        cluster: Some(ClusterConfig {
            max_depth: k.saturating_sub(1).max(1),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut r = stream(1, "acceptance-fd", &[]);
    let modes = [Mode::Maml, Mode::TreeFixed, Mode::TreeLearned];
    for i in 0..FD_INSTANCES {
        let mode = modes[i % modes.len()];
        let dim = r.random_range(1..=4);
        let m = r.random_range(1..=4);
        let k = if mode == Mode::Maml { r.random_range(1..=3) } else { r.random_range(2..=3) };
        let dist = TaskDistribution::with_seed(small_generator(dim, k.max(2) - 1), i as u64).unwrap();
        let points = r.random_range(1..=5);
        let tasks = dist
            .sample_task_batch(m, SplitSizes::new(points, points, 0), 0, &mut stream(i as u64, "fd-tasks", &[]))
            .unwrap();
        let model = LinearRegressionModel::new(dim).unwrap();
        let omega = ParamVector::new((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let cfg = meta_config(mode, k, 0.01);
        let trace = adapt_tree(&model, &omega, &tasks, &cfg).unwrap();
        let analytic = meta_gradient(&model, &trace, &tasks, cfg.inner_lr, true).unwrap();
        let numeric = finite_difference_gradient(
            |w| replay_meta_loss(&model, w, &trace, &tasks, cfg.inner_lr),
            &omega,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        "1 (meta-gradient vs finite differences)",
        worst < FD_REL_TOL && secs < FD_BUDGET_S,
        format!("{FD_INSTANCES} instances, worst relative error {worst:.2e} (< {FD_REL_TOL:e}), {secs:.2}s"),
    );
}

/// Give every task its own top-level branch, so the fixed tree splits the
/// batch into singletons at every step.
fn singleton_paths(mut tasks: Vec<TaskInstance>) -> Vec<TaskInstance> {
    for (i, t) in tasks.iter_mut().enumerate() {
        t.params.path = vec![i, 0];
    }
    tasks
}

fn criterion_2(report: &mut Report) {
    let start = Instant::now();
    let mut identical = 0;
    for seed in 0..DEGENERATION_RUNS {
        let dist = TaskDistribution::with_seed(small_generator(8, 2), seed).unwrap();
        let model = LinearRegressionModel::new(8).unwrap();
        let source = |it: usize| {
            dist.sample_task_batch(8, SplitSizes::new(5, 5, 0), 0, &mut stream(seed, "train", &[it as u64]))
                .map(singleton_paths)
        };
        let tree_cfg = MetaConfig {
            seed,
            tasks_per_batch: 8,
            outer_iterations: 5,
            ..meta_config(Mode::TreeFixed, 3, 0.007)
        };
        let maml_cfg = MetaConfig {
            mode: Mode::Maml,
            ..tree_cfg.clone()
        };
        let omega_t = meta_train(&model, source, &tree_cfg).unwrap().omega;
        let omega_m = meta_train(&model, source, &maml_cfg).unwrap().omega;
        let tasks = source(99).unwrap();
        let a = adapt_tree(&model, &omega_t, &tasks, &tree_cfg).unwrap();
        let b = adapt_tree(&model, &omega_m, &tasks, &maml_cfg).unwrap();
        let same_bits = |x: &ParamVector, y: &ParamVector| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
        if same_bits(&omega_t, &omega_m) && (0..tasks.len()).all(|i| same_bits(a.final_params(i), b.final_params(i))) {
            identical += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        "2 (singleton TreeMAML == MAML)",
        identical == DEGENERATION_RUNS && secs < DEGENERATION_BUDGET_S,
        format!("{identical}/{DEGENERATION_RUNS} seeded runs bit-identical, {secs:.2}s"),
    );
}

fn criterion_3(report: &mut Report) {
    let mut worst: f64 = 0.0;
    for i in 0..POOLING_INSTANCES {
        let mut r = stream(i, "acceptance-pool", &[]);
        let dim = r.random_range(1..=8);
        let dist = TaskDistribution::with_seed(small_generator(dim, 2), i).unwrap();
        let members = r.random_range(1..=6);
        let tasks: Vec<TaskInstance> = (0..members)
            .map(|j| {
                let n = r.random_range(1..=10);
                dist.sample_task(SplitSizes::new(n, 0, 0), j, &mut r).unwrap()
            })
            .collect();
        let model = LinearRegressionModel::new(dim).unwrap();
        let params = ParamVector::new((0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let batches: Vec<&[Sample]> = tasks.iter().map(|t| t.train_points.as_slice()).collect();
        let pooled = inner_step_cluster(&model, &params, &batches, 0.007).unwrap();
        let flat = inner_step_task(&model, &params, &batches.concat(), 0.007).unwrap();
        worst = worst.max(pooled.max_abs_diff(&flat).unwrap());
    }
    report.line(
        "3 (cluster pooling identity)",
        worst <= POOLING_TOL,
        format!("{POOLING_INSTANCES} instances, worst |diff| {worst:.2e} (<= {POOLING_TOL:e})"),
    );
}

fn criterion_4(report: &mut Report) {
    let start = Instant::now();
    let mut violations = Vec::new();
    for s in 0..CLUSTER_SEQUENCES {
        let mut r = stream(s, "acceptance-otd", &[]);
        let dim = r.random_range(2..=6);
        let n = r.random_range(1..=40);
        let depth = r.random_range(1..=4);
        let cfg = ClusterConfig {
            max_depth: depth,
            xi: r.random_range(0.0..3.0),
            ..Default::default()
        };
        let anchors: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let grads: Vec<(u64, ParamVector)> = (0..n)
            .map(|i| {
                let a = &anchors[r.random_range(0..4)];
                let v: Vec<f64> = a.iter().map(|x| x + r.random_range(-0.3..0.3)).collect();
                (i as u64 * 3 + 1, ParamVector::new(v).unwrap())
            })
            .collect();
        let tree = build_tree(&grads, &cfg).unwrap();
        let ids: HashSet<u64> = grads.iter().map(|g| g.0).collect();
        let mut ok = tree.max_depth() <= depth && tree.leaves().len() == n;
        let mut prev: Option<Vec<Vec<u64>>> = None;
        for k in 1..=depth + 1 {
            let level = tree.clusters_at_level(k);
            let flat: Vec<u64> = level.iter().flatten().copied().collect();
            ok &= flat.len() == n && flat.iter().copied().collect::<HashSet<_>>() == ids;
            if let Some(p) = &prev {
                ok &= level.iter().all(|c| p.iter().any(|pc| c.iter().all(|x| pc.contains(x))));
            }
            prev = Some(level);
        }
        ok &= prev.is_some_and(|p| p.len() == n);
        if !ok {
            violations.push(s);
        }
    }
    let e = |i: usize, y: f64| {
        let mut v = vec![0.0; 3];
        v[i] = 1.0;
        v[(i + 1) % 2] = y;
        ParamVector::new(v).unwrap()
    };
    let pairs = vec![(10, e(0, 0.0)), (20, e(1, 0.0)), (11, e(0, 0.1)), (21, e(1, 0.1))];
    let tree = build_tree(&pairs, &ClusterConfig::default()).unwrap();
    let shape = (tree.clusters_at_level(1).len(), tree.clusters_at_level(2).len());
    let secs = start.elapsed().as_secs_f64();
    report.line(
        "4 (clustering structure)",
        violations.is_empty() && shape == (2, 4) && secs < CLUSTER_BUDGET_S,
        format!(
            "{CLUSTER_SEQUENCES} sequences, {} violations; orthogonal pairs give {}-then-{}; {secs:.2}s",
            violations.len(),
            shape.0,
            shape.1
        ),
    );
}

fn collect(spec: &ExperimentSpec) -> (Vec<RunResult>, Vec<String>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for o in run_experiment(spec).unwrap() {
        match o {
            Ok(r) => ok.push(r),
            Err(f) => failed.push(format!("{}: {}", f.key, f.error)),
        }
    }
    (ok, failed)
}

fn by_cell(results: &[RunResult]) -> BTreeMap<(Mode, usize), f64> {
    treemaml::cli::report::aggregate(&rows(results, false))
        .into_iter()
        .map(|(k, (m, _))| (k, m))
        .collect()
}

fn criterion_5(report: &mut Report) -> Vec<RunResult> {
    let spec = ExperimentSpec::load(&config_path("comparison.toml")).unwrap();
    let start = Instant::now();
    let (results, failed) = collect(&spec);
    let secs = start.elapsed().as_secs_f64();
    let cells = by_cell(&results);
    let get = |m, p| cells.get(&(m, p)).copied().unwrap_or(f64::NAN);

    let mut order = Vec::new();
    let mut ratio_b = Vec::new();
    let mut ratio_c = Vec::new();
    let (mut a_ok, mut b_ok, mut c_ok) = (failed.is_empty(), failed.is_empty(), failed.is_empty());
    for &p in &spec.points_sweep {
        let (base, maml, fixed, learned) = (get(Mode::Baseline, p), get(Mode::Maml, p), get(Mode::TreeFixed, p), get(Mode::TreeLearned, p));
        a_ok &= fixed < maml && maml < base;
        b_ok &= fixed <= FIXED_OVER_MAML_MAX * maml;
        c_ok &= learned <= LEARNED_OVER_FIXED_MAX * fixed;
        order.push(format!("p={p}: {fixed:.1} < {maml:.1} < {base:.1}"));
        ratio_b.push(format!("p={p}: {:.3}", fixed / maml));
        ratio_c.push(format!("p={p}: {:.3}", learned / fixed));
    }
    let timing = if secs < GRID_BUDGET_S { String::new() } else { format!(" (over {GRID_BUDGET_S}s budget)") };
    if !failed.is_empty() {
        println!("       failed cells: {}", failed.join("; "));
    }
    report.line("5a (Fixed < MAML < Baseline)", a_ok, format!("{}; grid {secs:.0}s{timing}", order.join(", ")));
    report.line("5b (Fixed / MAML <= 0.75)", b_ok, ratio_b.join(", "));
    report.line("5c (Learned / Fixed <= 1.25)", c_ok, ratio_c.join(", "));
    results
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_6(report: &mut Report) {
    let spec = ExperimentSpec::load(&config_path("points_sweep.toml")).unwrap();
    let (results, failed) = collect(&spec);
    let cells = by_cell(&results);
    let points: Vec<f64> = spec.points_sweep.iter().map(|&p| p as f64).collect();
    // Advantage of the tree over MAML; positive when TreeMAML is better.
    let gap: Vec<f64> = spec
        .points_sweep
        .iter()
        .map(|&p| cells.get(&(Mode::Maml, p)).copied().unwrap_or(f64::NAN) - cells.get(&(Mode::TreeFixed, p)).copied().unwrap_or(f64::NAN))
        .collect();
    let rho = pearson(&ranks(&gap), &ranks(&points));
    let argmax = (0..gap.len()).max_by(|&a, &b| gap[a].total_cmp(&gap[b])).unwrap();
    let listing: Vec<String> = spec.points_sweep.iter().zip(&gap).map(|(p, g)| format!("{p}:{g:.1}")).collect();
    report.line(
        "6 (tree advantage shrinks with points)",
        failed.is_empty() && argmax == 0 && rho < 0.0,
        format!("MAML - Fixed gap {}; largest at points={}; Spearman {rho:.3}", listing.join(" "), spec.points_sweep[argmax]),
    );
}

fn csv_bytes(rows: &[CsvRow]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_csv(rows, &path).unwrap();
    std::fs::read(path).unwrap()
}

fn criterion_7(report: &mut Report, grid: &[RunResult]) {
    let spec = ExperimentSpec::load(&config_path("comparison.toml")).unwrap();
    let mut checked = 0;
    let mut identical = 0;
    for mode in [Mode::Maml, Mode::TreeLearned] {
        let key = CellKey { mode, points: 5, seed: 1 };
        let Some(first) = grid.iter().find(|r| r.key == key) else { continue };
        let again = run_cell(&spec, key).unwrap();
        checked += 1;
        if csv_bytes(&rows(std::slice::from_ref(first), false)) == csv_bytes(&rows(&[again], false)) {
            identical += 1;
        }
    }
    report.line(
        "7 (determinism)",
        checked == 2 && identical == checked,
        format!("{identical}/{checked} re-run cells produce byte-identical CSV"),
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    let grid = criterion_5(&mut report);
    criterion_6(&mut report);
    criterion_7(&mut report, &grid);
    println!("SKIP criterion 8: cross-lingual experiment is out of scope at this scale");
    if report.failures > 0 {
        eprintln!("{} acceptance criteria failed", report.failures);
        std::process::exit(1);
    }
}
