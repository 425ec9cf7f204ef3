//! Experiment drivers: build a run from a [`SimConfig`], execute it, and
//! write its artifacts.
//!
//! A run directory holds `config.toml` (snapshot), `trace.jsonl`,
//! `trace.csv`, `metrics.csv` and, when requested, `bound_report.json`.
//! A sweep directory holds `summary.csv` plus one run directory per row.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::clock::round_latency;
use crate::config::{DatasetConfig, SimConfig, SweepAxis};
use crate::data::{self, Dataset, HorizontalShard, VerticalPartition};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, Split};
use crate::model::{Architecture, LossSpec, ParamBlock, SiloModelSpec};
use crate::oracles::{self, BoundConstants, BoundInputs, BoundReport, ProbeConfig, Problem, ReductionKind, ReductionSetup};
use crate::protocol::{self as trace, Engine, ProtocolConfig, TrainingFailure, TrainingTrace};
use crate::synthetic::{self, LeastSquaresFacts, Synthetic, SyntheticSpec};

/// A fully instantiated problem: data, partitions, shards and the initial
/// blocks, ready to hand to an [`Engine`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: SimConfig,
    pub dataset: Dataset,
    pub facts: Option<LeastSquaresFacts>,
    pub loss: LossSpec,
    pub specs: Vec<SiloModelSpec>,
    pub partitions: Vec<VerticalPartition>,
    pub shards: Vec<Vec<HorizontalShard>>,
    pub init: Vec<ParamBlock>,
}

pub fn load_dataset(config: &SimConfig) -> Result<(Dataset, Option<LeastSquaresFacts>)> {
    match &config.dataset {
        DatasetConfig::Synthetic { spec } => {
            let g = synthetic::generate(spec, config.seeds.data, 0)?;
            Ok((g.dataset, g.facts))
        }
        DatasetConfig::Csv { path, label_column } => Ok((data::read_csv(path, label_column)?, None)),
        DatasetConfig::Binary { path } => Ok((data::read_binary(path)?, None)),
    }
}

impl Experiment {
    pub fn build(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let (dataset, facts) = load_dataset(config)?;
        Self::from_dataset(config, dataset, facts)
    }

    pub fn from_dataset(config: &SimConfig, dataset: Dataset, facts: Option<LeastSquaresFacts>) -> Result<Self> {
        let loss = config.loss_spec()?;
        let dims = config.silo_dims(dataset.num_features())?;
        let partitions = data::split_vertical(dataset.num_features(), &dims)?;
        let arch: Architecture = config.architecture();
        let e = loss.required_embedding_dim();
        let specs: Vec<SiloModelSpec> = partitions
            .iter()
            .map(|p| SiloModelSpec::new(p.silo_index, p.width(), e, arch))
            .collect();
        for s in &specs {
            s.validate()?;
        }
        let shards = partitions
            .iter()
            .zip(config.client_counts()?)
            .map(|(p, k)| data::shard_horizontal(p, &dataset.labels, k, config.seeds.shard))
            .collect::<Result<Vec<_>>>()?;
        let init = specs.iter().map(|s| s.init_block(config.seeds.init)).collect();
        Ok(Self {
            config: config.clone(),
            dataset,
            facts,
            loss,
            specs,
            partitions,
            shards,
            init,
        })
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            dataset: &self.dataset,
            specs: &self.specs,
            partitions: &self.partitions,
            loss: self.loss,
        }
    }

    pub fn engine(&self, protocol: ProtocolConfig) -> Result<Engine<'_>> {
        Engine::new(
            &self.dataset,
            self.specs.clone(),
            self.partitions.clone(),
            self.shards.clone(),
            self.init.clone(),
            self.loss,
            protocol,
        )
    }

    /// Train for the configured number of rounds.
    pub fn train(&self) -> std::result::Result<TrainingTrace, TrainingFailure> {
        self.train_with(self.config.protocol_config(), self.config.rounds)
    }

    pub fn train_with(&self, protocol: ProtocolConfig, rounds: u64) -> std::result::Result<TrainingTrace, TrainingFailure> {
        let engine = self.engine(protocol).map_err(|error| TrainingFailure {
            completed: Vec::new(),
            error,
        })?;
        engine.run_training(rounds)
    }

    pub fn reduction_setup(&self, rounds: u64) -> ReductionSetup<'_> {
        ReductionSetup {
            problem: self.problem(),
            shards: self.shards.clone(),
            init: self.init.clone(),
            learning_rate: self.config.learning_rate,
            local_steps: self.config.local_steps,
            batch_size: self.config.batch_size,
            batch_seed: self.config.seeds.batch,
            rounds,
        }
    }
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: TrainingTrace,
    pub metrics: Vec<MetricReport>,
    pub bound: Option<BoundArtifact>,
}

#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub completed_rounds: usize,
}

impl RunFailure {
    /// 2 for divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.error.is_divergence() {
            2
        } else {
            1
        }
    }
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Error::Numeric { .. } = self.error {
            write!(f, "divergence: {} (after {} completed rounds)", self.error, self.completed_rounds)
        } else if self.error.is_divergence() {
            write!(f, "{} (after {} completed rounds)", self.error, self.completed_rounds)
        } else {
            write!(f, "{}", self.error)
        }
    }
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            completed_rounds: 0,
        }
    }
}

/// Execute one configured run and write its artifacts into `out_dir`.
/// On divergence the rounds completed before it are still written.
pub fn run(config: &SimConfig, out_dir: &Path) -> std::result::Result<RunOutcome, RunFailure> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    config.write_snapshot(&out_dir.join("config.toml"))?;
    let exp = Experiment::build(config)?;
    execute(&exp, out_dir)
}

fn execute(exp: &Experiment, out_dir: &Path) -> std::result::Result<RunOutcome, RunFailure> {
    let trace = match exp.train() {
        Ok(t) => t,
        Err(failure) => {
            let rows: Vec<_> = failure.completed.iter().flat_map(|r| r.records.iter()).map(trace::TraceRow::from).collect();
            trace::write_jsonl(&out_dir.join("trace.jsonl"), &rows)?;
            trace::write_csv(&out_dir.join("trace.csv"), &rows)?;
            return Err(RunFailure {
                error: failure.error,
                completed_rounds: failure.completed.len(),
            });
        }
    };
    let rows = trace.rows();
    trace::write_jsonl(&out_dir.join("trace.jsonl"), &rows)?;
    trace::write_csv(&out_dir.join("trace.csv"), &rows)?;
    let report = metrics::evaluate(&trace.model, &exp.dataset, Split::Train, &exp.loss, exp.config.top_k)?;
    let metrics = vec![report];
    write_metrics(&out_dir.join("metrics.csv"), &metrics)?;
    let bound = if exp.config.bound_report && !trace.is_empty() {
        let b = bound_artifact(exp, std::slice::from_ref(&trace))?;
        std::fs::write(out_dir.join("bound_report.json"), serde_json::to_string_pretty(&b).map_err(Error::from)?)
            .map_err(Error::from)?;
        Some(b)
    } else {
        None
    };
    Ok(RunOutcome { trace, metrics, bound })
}

/// Columns: `split, loss, accuracy, f1, top_k_accuracy, top_k, samples`.
pub fn write_metrics(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["split", "loss", "accuracy", "f1", "top_k_accuracy", "top_k", "samples"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in reports {
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        w.write_record([
            split.to_string(),
            format!("{:?}", r.loss),
            opt(r.accuracy),
            opt(r.f1),
            opt(r.top_k_accuracy),
            r.top_k.map(|k| k.to_string()).unwrap_or_default(),
            r.samples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of `bound_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundArtifact {
    pub learning_rate: f64,
    pub local_steps: u64,
    pub rounds: u64,
    pub runs: usize,
    pub constants: BoundConstants,
    pub report: BoundReport,
}

/// Round-start virtual models of `trace`, at most `count` of them, evenly
/// spaced. Needs a trace recorded with iterates on.
pub fn round_start_iterates(specs: &[SiloModelSpec], trace: &TrainingTrace, count: usize) -> Vec<Vec<ParamBlock>> {
    let starts: Vec<&Vec<f64>> = trace
        .rounds
        .iter()
        .filter_map(|r| r.records.first())
        .map(|rec| &rec.virtual_model)
        .filter(|v| !v.is_empty())
        .collect();
    if starts.is_empty() || count == 0 {
        return Vec::new();
    }
    let picks = count.min(starts.len());
    let last = starts.len() - 1;
    (0..picks)
        .map(|i| if picks == 1 { 0 } else { i * last / (picks - 1) })
        .map(|i| oracles::unflatten(specs, starts[i]))
        .collect()
}

/// Bound constants probed at the runs' round-start iterates, and the
/// bound evaluated on the runs' averaged losses and gradient norms.
pub fn bound_artifact(exp: &Experiment, traces: &[TrainingTrace]) -> Result<BoundArtifact> {
    let inputs = BoundInputs::from_traces(traces)?;
    let probe = ProbeConfig::new(exp.config.batch_size, exp.config.seeds.batch);
    let mut iterates: Vec<Vec<ParamBlock>> = traces
        .iter()
        .flat_map(|t| round_start_iterates(&exp.specs, t, probe.probe_iterates))
        .collect();
    if iterates.is_empty() {
        iterates.push(exp.init.clone());
    }
    let constants = oracles::estimate_constants(&exp.problem(), &exp.shards, &iterates, &probe)?;
    let report = oracles::convergence_bound(&inputs, &constants, exp.config.learning_rate, exp.config.local_steps);
    Ok(BoundArtifact {
        learning_rate: exp.config.learning_rate,
        local_steps: exp.config.local_steps,
        rounds: inputs.rounds,
        runs: traces.len(),
        constants,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
            RunStatus::Failed => "failed",
        }
    }
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub silos: usize,
    pub clients: String,
    pub local_steps: u64,
    pub learning_rate: f64,
    pub rounds: u64,
    pub status: RunStatus,
    pub final_clock: Option<f64>,
    pub final_loss: Option<f64>,
    pub loss_at_budget: Option<f64>,
    pub clock_to_target: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub target_loss: Option<f64>,
    /// `(clock, loss)` curves, empty for failed rows.
    pub curves: Vec<Vec<(f64, f64)>>,
}

/// Loss of the last curve point at or before `clock`.
pub fn loss_at_clock(curve: &[(f64, f64)], clock: f64) -> Option<f64> {
    curve.iter().take_while(|(c, _)| *c <= clock).last().map(|p| p.1)
}

/// Clock of the first curve point whose loss is at or below `target`.
pub fn clock_to_target(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    curve.iter().find(|(_, l)| *l <= target).map(|p| p.0)
}

/// Rounds needed for a run with this config to reach `budget` on the
/// simulated clock.
fn rounds_for_budget(config: &SimConfig, budget: f64) -> u64 {
    let t = round_latency(config.local_steps, &config.latency);
    if t > 0.0 {
        (budget / t).ceil() as u64
    } else {
        config.rounds
    }
}

/// Lowest-final-loss rate from `grid` after `iterations` local
/// iterations. Ties keep the earlier grid entry; `None` if every rate
/// diverged.
pub fn grid_search(exp: &Experiment, grid: &[f64], iterations: u64) -> Option<(f64, f64)> {
    let rounds = iterations.div_ceil(exp.config.local_steps);
    let mut best: Option<(f64, f64)> = None;
    for &eta in grid {
        let mut pc = exp.config.protocol_config();
        pc.learning_rate = eta;
        pc.record_iterates = false;
        if let Ok(t) = exp.train_with(pc, rounds) {
            let l = t.final_state.loss;
            if l.is_finite() && best.map_or(true, |(_, b)| l < b) {
                best = Some((eta, l));
            }
        }
    }
    best
}

/// Run every value of the config's sweep axis on the same data and
/// seeds. With `clock_budget` set each run gets enough rounds to reach
/// the budget. Individual failures become rows; the sweep continues.
pub fn sweep(config: &SimConfig, out_dir: Option<&Path>) -> Result<SweepSummary> {
    config.validate()?;
    let spec = config.sweep.clone().ok_or_else(|| Error::config("config has no [sweep] table"))?;
    let (dataset, facts) = load_dataset(config)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        config.write_snapshot(&dir.join("config.toml"))?;
    }
    let mut rows = Vec::with_capacity(spec.values.len());
    let mut curves = Vec::with_capacity(spec.values.len());
    let mut budgets = Vec::with_capacity(spec.values.len());
    for (i, &value) in spec.values.iter().enumerate() {
        let mut cfg = config.with_axis(spec.axis, value)?;
        if let Some(b) = spec.clock_budget {
            cfg.rounds = rounds_for_budget(&cfg, b);
        }
        let mut row = SweepRow {
            axis: spec.axis,
            value,
            silos: cfg.silos,
            clients: cfg.client_counts()?.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            local_steps: cfg.local_steps,
            learning_rate: cfg.learning_rate,
            rounds: cfg.rounds,
            status: RunStatus::Ok,
            final_clock: None,
            final_loss: None,
            loss_at_budget: None,
            clock_to_target: None,
            message: String::new(),
        };
        let outcome = (|| -> std::result::Result<TrainingTrace, RunFailure> {
            let mut exp = Experiment::from_dataset(&cfg, dataset.clone(), facts.clone())?;
            if let Some(grid) = &spec.eta_grid {
                let iters = spec.grid_iterations.unwrap_or(cfg.rounds * cfg.local_steps);
                let (eta, _) = grid_search(&exp, grid, iters)
                    .ok_or_else(|| Error::config("every learning rate in the grid diverged"))?;
                exp.config.learning_rate = eta;
            }
            match out_dir {
                Some(dir) => {
                    let run_dir = dir.join(format!("run_{i:03}"));
                    std::fs::create_dir_all(&run_dir).map_err(Error::from)?;
                    exp.config.write_snapshot(&run_dir.join("config.toml"))?;
                    execute(&exp, &run_dir).map(|o| o.trace)
                }
                None => exp.train().map_err(|f| RunFailure {
                    error: f.error,
                    completed_rounds: f.completed.len(),
                }),
            }
            .map(|t| {
                row.learning_rate = exp.config.learning_rate;
                t
            })
        })();
        match outcome {
            Ok(t) => {
                let curve = t.loss_curve();
                let budget = spec.clock_budget.unwrap_or(t.final_state.clock);
                row.final_clock = Some(t.final_state.clock);
                row.final_loss = Some(t.final_state.loss);
                row.loss_at_budget = loss_at_clock(&curve, budget).or(Some(t.initial_loss));
                curves.push(curve);
                budgets.push(budget);
            }
            Err(f) => {
                row.status = if f.error.is_divergence() {
                    RunStatus::Diverged
                } else {
                    RunStatus::Failed
                };
                row.message = f.to_string();
                log::warn!("sweep value {value}: {}", row.message);
                curves.push(Vec::new());
                budgets.push(0.0);
            }
        }
        rows.push(row);
    }

    let target_loss = spec.target_loss.or_else(|| {
        let best = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.loss_at_budget.map(|l| (i, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        loss_at_clock(&curves[best.0], 0.8 * budgets[best.0])
    });
    if let Some(target) = target_loss {
        for (row, curve) in rows.iter_mut().zip(&curves) {
            row.clock_to_target = clock_to_target(curve, target);
        }
    }
    let summary = SweepSummary {
        rows,
        target_loss,
        curves,
    };
    if let Some(dir) = out_dir {
        write_summary(&dir.join("summary.csv"), &summary)?;
    }
    Ok(summary)
}

/// Columns: `axis, value, silos, clients, local_steps, learning_rate,
/// rounds, status, final_clock, final_loss, loss_at_budget,
/// clock_to_target, target_loss, message`.
pub fn write_summary(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "axis",
        "value",
        "silos",
        "clients",
        "local_steps",
        "learning_rate",
        "rounds",
        "status",
        "final_clock",
        "final_loss",
        "loss_at_budget",
        "clock_to_target",
        "target_loss",
        "message",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in &summary.rows {
        w.write_record([
            r.axis.as_str().to_string(),
            format!("{:?}", r.value),
            r.silos.to_string(),
            r.clients.clone(),
            r.local_steps.to_string(),
            format!("{:?}", r.learning_rate),
            r.rounds.to_string(),
            r.status.as_str().to_string(),
            opt(r.final_clock),
            opt(r.final_loss),
            opt(r.loss_at_budget),
            opt(r.clock_to_target),
            opt(summary.target_loss),
            r.message.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Generate a synthetic dataset and write it to `path` (CSV with label
/// column `y` for a `.csv` extension, the binary format otherwise), plus
/// `<path>.meta.json` with the generating parameters and, for least
/// squares, the exact optimum and smoothness.
pub fn generate_to_file(spec: &SyntheticSpec, seed: u64, path: &Path) -> Result<Synthetic> {
    let g = synthetic::generate(spec, seed, 0)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => data::write_csv(path, &g.dataset, "y")?,
        _ => data::write_binary(path, &g.dataset)?,
    }
    #[derive(Serialize)]
    struct Meta<'a> {
        seed: u64,
        spec: &'a SyntheticSpec,
        truth: &'a [f64],
        facts: Option<&'a LeastSquaresFacts>,
    }
    let meta = Meta {
        seed,
        spec,
        truth: &g.truth,
        facts: g.facts.as_ref(),
    };
    let mut meta_path: PathBuf = path.as_os_str().to_owned().into();
    meta_path.as_mut_os_string().push(".meta.json");
    std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check_config(silos: usize, clients: usize, samples: usize, features: usize, q: u64, eta: f64, batch: usize) -> SimConfig {
    let text = format!(
        "silos = {silos}\nclients = {clients}\nlocal_steps = {q}\nlearning_rate = {eta:?}\nbatch_size = {batch}\nrounds = 50\n\
         [model]\narchitecture = \"linear\"\n[loss]\nkind = \"squared_error\"\n\
         [seeds]\ndata = 11\ninit = 12\nbatch = 13\nshard = 14\n\
         [dataset]\nsource = \"synthetic\"\nsamples = {samples}\nfeatures = {features}\ntask = \"least_squares\"\nnoise = 0.1\n"
    );
    SimConfig::from_toml_str(&text).expect("built-in check config is valid")
}

/// Self-test: gradient oracle for every model/loss pair, the three
/// reductions to known algorithms, and the convergence bound on a small
/// quadratic with exhaustively enumerated batches.
pub fn check() -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    let losses = [LossSpec::squared_error(), LossSpec::binary_logistic(), LossSpec::softmax(3)];
    for loss in losses {
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 5 }] {
            let spec = SiloModelSpec::new(0, 4, loss.required_embedding_dim(), arch);
            let err = oracles::gradient_check(&spec, &loss, 6, 100, 1e-6, 1)?;
            out.push(CheckLine {
                name: format!("gradient {:?} {:?}", arch, loss.kind),
                passed: err < 1e-5,
                detail: format!("max relative error {err:.3e}"),
            });
        }
    }

    let cases = [
        (ReductionKind::Q1Centralized, check_config(2, 2, 64, 6, 1, 0.05, 64)),
        (ReductionKind::N1LocalSgd, check_config(1, 3, 60, 4, 5, 0.02, 24)),
        (ReductionKind::K1Vfl, check_config(3, 1, 60, 6, 5, 0.02, 16)),
    ];
    for (kind, cfg) in cases {
        let exp = Experiment::build(&cfg)?;
        let r = oracles::reduction_check(kind, &exp.reduction_setup(cfg.rounds), 1e-10)?;
        out.push(CheckLine {
            name: format!("reduction {kind:?}"),
            passed: r.passed,
            detail: format!("max relative deviation {:.3e}", r.max_deviation),
        });
    }

    let base = check_config(2, 2, 8, 4, 1, 0.0, 4);
    for q in [1u64, 2, 4] {
        for frac in [1.0, 0.5, 0.25] {
            let b = quadratic_bound(&base, q, frac, &[21, 22, 23, 24, 25], 40)?;
            out.push(CheckLine {
                name: format!("bound Q={q} eta=eta_max*{frac}"),
                passed: b.report.satisfied && b.report.eta_admissible,
                detail: format!("lhs {:.4e} rhs {:.4e}", b.report.lhs, b.report.rhs),
            });
        }
    }
    Ok(out)
}

/// Evaluate the convergence bound on a linear least-squares config at
/// `η = fraction · η_max`, averaging over one run per batch seed.
pub fn quadratic_bound(base: &SimConfig, local_steps: u64, fraction: f64, batch_seeds: &[u64], rounds: u64) -> Result<BoundArtifact> {
    let mut cfg = base.clone();
    cfg.local_steps = local_steps;
    cfg.rounds = rounds;
    cfg.bound_report = true;
    let exp0 = Experiment::build(&cfg)?;
    let probe = ProbeConfig::new(cfg.batch_size, cfg.seeds.batch);
    let c0 = oracles::estimate_constants(&exp0.problem(), &exp0.shards, std::slice::from_ref(&exp0.init), &probe)?;
    if c0.source != oracles::ConstantSource::Analytic {
        return Err(Error::config("bound check needs a linear least-squares problem"));
    }
    let eta = fraction / (8.0 * local_steps as f64 * c0.smoothness.max(c0.max_local_smoothness));
    cfg.learning_rate = eta;
    let mut traces = Vec::with_capacity(batch_seeds.len());
    let mut exp = Experiment::from_dataset(&cfg, exp0.dataset.clone(), exp0.facts.clone())?;
    for &seed in batch_seeds {
        exp.config.seeds.batch = seed;
        traces.push(exp.train().map_err(|f| f.error)?);
    }
    exp.config.seeds.batch = cfg.seeds.batch;
    bound_artifact(&exp, &traces)
}
