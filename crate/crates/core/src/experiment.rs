//! End-to-end experiment drivers.
//!
//! Two shapes are supported. A static sweep trains one model on logged data
//! and scores it at every gamma of a grid, so gamma is varied purely at
//! inference time. A closed loop retrains after every round and serves the
//! next round with the fresh model at one fixed gamma.
//!
//! Every random choice is derived from the experiment seed, the component and
//! the round index, so results for one seed never depend on which other seeds
//! run alongside it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::config::{ExperimentConfig, SelectionRule};
use crate::error::{Error, Result};
use crate::logging::{
    accumulate_exposures, run_logging_round, ExposureCounts, ImpressionRecord, LoggingPolicy, PolicyKind,
};
use crate::math::{derive_seed, stream};
use crate::metrics::{
    exposure_gini, negative_recall_at_k, popular_dominance, positive_recall_at_k, spearman,
    unique_retrieved_items, EvaluationSet, MetricsReport, Retrievals,
};
use crate::model::{train, train_opc_baseline, ModelParams, TrainConfig};
use crate::scoring::{build_index, retrieve_top_k};
use crate::world::{generate_world, World, WorldConfig};

const WORLD_TAG: u64 = 0x3017;
const LOG_TAG: u64 = 0x1096;
const TRAIN_TAG: u64 = 0x07A1;

/// World configuration for one experiment seed.
pub fn world_config_for(config: &ExperimentConfig, seed: u64) -> WorldConfig {
    WorldConfig {
        seed: derive_seed(seed, &[WORLD_TAG, config.world.seed]),
        ..config.world.clone()
    }
}

/// Training configuration for the model fitted on logs up to and including
/// `last_round`.
pub fn train_config_for(config: &ExperimentConfig, seed: u64, last_round: u32) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, &[TRAIN_TAG, config.train.seed, last_round as u64]),
        ..config.train.clone()
    }
}

fn log_round(
    world: &World,
    policy: &LoggingPolicy<'_>,
    config: &ExperimentConfig,
    seed: u64,
    round: u32,
) -> Result<(Vec<ImpressionRecord>, ExposureCounts)> {
    let users: Vec<usize> = (0..world.n_users()).collect();
    let mut rng = stream(seed, &[LOG_TAG, config.world.seed, round as u64]);
    run_logging_round(world, policy, &users, round, &mut rng)
}

fn bootstrap_policy(config: &ExperimentConfig) -> LoggingPolicy<'static> {
    LoggingPolicy {
        kind: PolicyKind::ZipfBootstrap,
        slate_size: config.slate_size,
        exploration_epsilon: 0.0,
    }
}

/// Retrieves top-k for every evaluated user at `gamma` and computes the
/// report. `counts` is the exposure history the model was trained on.
pub fn evaluate_model(
    params: &ModelParams,
    gamma: f64,
    k: usize,
    eval: &EvaluationSet,
    counts: &ExposureCounts,
    top_fraction: f64,
) -> Result<MetricsReport> {
    let users = eval.users();
    if users.is_empty() {
        return Err(Error::EmptyEvaluation("held-out logs contain no users".into()));
    }
    let index = build_index(params, gamma)?;
    let empty = HashSet::new();
    let lists: Vec<(usize, Vec<usize>)> = users
        .par_iter()
        .map(|&u| {
            let top = retrieve_top_k(&index, params, u, k, &empty)?;
            Ok((u, top.into_iter().map(|s| s.item).collect()))
        })
        .collect::<Result<_>>()?;
    let retrievals: Retrievals = lists.into_iter().collect();
    Ok(MetricsReport {
        positive_recall_at_k: positive_recall_at_k(&retrievals, eval)?,
        negative_recall_at_k: negative_recall_at_k(&retrievals, eval)?,
        unique_retrieved: unique_retrieved_items(&retrievals),
        popular_dominance: popular_dominance(&retrievals, counts, top_fraction)?,
        exposure_gini: exposure_gini(counts)?,
        k,
        gamma,
        n_eval_users: users.len(),
    })
}

/// One two-head report in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub seed: u64,
    pub model_fingerprint: String,
    pub report: MetricsReport,
}

/// The OPC baseline's report for one seed (always scored at gamma 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpcRow {
    pub seed: u64,
    pub model_fingerprint: String,
    pub report: MetricsReport,
}

/// Per-seed facts about the trained sweep model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub training_records: usize,
    pub holdout_records: usize,
    pub final_train_loss: f64,
    /// Spearman correlation between each item's mean predicted exposure
    /// probability and its empirical exposure frequency in the training logs.
    pub exposure_spearman: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub positive_recall_at_k: f64,
    pub negative_recall_at_k: f64,
    pub unique_retrieved: f64,
    pub popular_dominance: f64,
    pub exposure_gini: f64,
}

impl MetricSummary {
    fn of(r: &MetricsReport) -> Self {
        MetricSummary {
            positive_recall_at_k: r.positive_recall_at_k,
            negative_recall_at_k: r.negative_recall_at_k,
            unique_retrieved: r.unique_retrieved as f64,
            popular_dominance: r.popular_dominance,
            exposure_gini: r.exposure_gini,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 5] {
        [
            ("positive_recall_at_k", self.positive_recall_at_k),
            ("negative_recall_at_k", self.negative_recall_at_k),
            ("unique_retrieved", self.unique_retrieved),
            ("popular_dominance", self.popular_dominance),
            ("exposure_gini", self.exposure_gini),
        ]
    }

    fn from_fields(v: [f64; 5]) -> Self {
        MetricSummary {
            positive_recall_at_k: v[0],
            negative_recall_at_k: v[1],
            unique_retrieved: v[2],
            popular_dominance: v[3],
            exposure_gini: v[4],
        }
    }
}

/// Mean and sample standard deviation over seeds for one gamma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaAggregate {
    pub gamma: f64,
    pub n_seeds: usize,
    pub mean: MetricSummary,
    pub sd: MetricSummary,
}

fn aggregate<'a>(gamma: f64, reports: impl Iterator<Item = &'a MetricsReport>) -> GammaAggregate {
    let rows: Vec<[f64; 5]> = reports
        .map(|r| MetricSummary::of(r).fields().map(|(_, x)| x))
        .collect();
    let n = rows.len();
    let mut mean = [0.0; 5];
    let mut sd = [0.0; 5];
    for j in 0..5 {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        mean[j] = m;
        if n > 1 {
            let ss: f64 = rows.iter().map(|r| (r[j] - m).powi(2)).sum();
            sd[j] = (ss / (n - 1) as f64).sqrt();
        }
    }
    GammaAggregate {
        gamma,
        n_seeds: n,
        mean: MetricSummary::from_fields(mean),
        sd: MetricSummary::from_fields(sd),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ordered by gamma, then by seed in configuration order.
    pub rows: Vec<SweepRow>,
    pub opc: Vec<OpcRow>,
    pub diagnostics: Vec<SeedDiagnostics>,
    /// One entry per gamma, ascending.
    pub aggregates: Vec<GammaAggregate>,
    pub opc_aggregate: Option<GammaAggregate>,
}

impl SweepResult {
    /// Assembles a result from per-(gamma, seed) rows, checking that every
    /// pair appears exactly once.
    pub fn from_rows(rows: Vec<SweepRow>, opc: Vec<OpcRow>, diagnostics: Vec<SeedDiagnostics>) -> Result<Self> {
        let mut gammas: Vec<f64> = Vec::new();
        let mut seeds: Vec<u64> = Vec::new();
        for r in &rows {
            if !gammas.iter().any(|g| g.to_bits() == r.gamma.to_bits()) {
                gammas.push(r.gamma);
            }
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        gammas.sort_by(f64::total_cmp);
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert((r.gamma.to_bits(), r.seed)) {
                return Err(Error::Shape(format!("duplicate report for gamma {} seed {}", r.gamma, r.seed)));
            }
        }
        if seen.len() != gammas.len() * seeds.len() {
            return Err(Error::Shape(format!(
                "sweep has {} reports, expected {} gammas x {} seeds",
                seen.len(),
                gammas.len(),
                seeds.len()
            )));
        }
        let mut ordered = rows;
        ordered.sort_by(|a, b| {
            a.gamma.total_cmp(&b.gamma).then_with(|| {
                let ia = seeds.iter().position(|s| *s == a.seed);
                let ib = seeds.iter().position(|s| *s == b.seed);
                ia.cmp(&ib)
            })
        });
        let aggregates = gammas
            .iter()
            .map(|&g| aggregate(g, ordered.iter().filter(|r| r.gamma == g).map(|r| &r.report)))
            .collect();
        let opc_aggregate = (!opc.is_empty()).then(|| aggregate(0.0, opc.iter().map(|r| &r.report)));
        Ok(SweepResult {
            rows: ordered,
            opc,
            diagnostics,
            aggregates,
            opc_aggregate,
        })
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.aggregates.iter().map(|a| a.gamma).collect()
    }

    pub fn report(&self, gamma: f64, seed: u64) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.gamma == gamma && r.seed == seed)
            .map(|r| &r.report)
    }

    pub fn aggregate(&self, gamma: f64) -> Option<&GammaAggregate> {
        self.aggregates.iter().find(|a| a.gamma == gamma)
    }
}

/// Everything a static sweep produces for one seed.
#[derive(Debug, Clone)]
pub struct SeedSweep {
    pub rows: Vec<SweepRow>,
    pub opc: OpcRow,
    pub diagnostics: SeedDiagnostics,
}

/// Simulates the logs of a static sweep: a popularity bootstrap round, then
/// `rounds - 1` rounds served by one model trained on the bootstrap round
/// and scored at `logging_gamma`.
pub fn simulate_static_logs(config: &ExperimentConfig, seed: u64) -> Result<(World, Vec<ImpressionRecord>)> {
    config.validate()?;
    let world = generate_world(&world_config_for(config, seed))?;
    let (mut logs, _) = log_round(&world, &bootstrap_policy(config), config, seed, 0)?;
    let logging_model = train(
        &logs,
        &train_config_for(config, seed, 0),
        world.n_users(),
        world.n_items(),
    )
    .map_err(|e| Error::in_round(0, e))?
    .params;
    let index = build_index(&logging_model, config.logging_gamma)?;
    let policy = LoggingPolicy {
        kind: PolicyKind::ModelTopK {
            index: &index,
            params: &logging_model,
        },
        slate_size: config.slate_size,
        exploration_epsilon: config.exploration_epsilon,
    };
    for round in 1..config.rounds as u32 {
        let (records, _) = log_round(&world, &policy, config, seed, round)?;
        logs.extend(records);
    }
    Ok((world, logs))
}

/// Trains on all but the last `holdout_rounds` rounds present in `logs`,
/// evaluates every gamma of the grid on the held-out rounds, and trains and
/// evaluates the OPC baseline on the same split.
pub fn evaluate_on_logs(config: &ExperimentConfig, seed: u64, logs: &[ImpressionRecord]) -> Result<SeedSweep> {
    config.validate()?;
    let rounds: BTreeSet<u32> = logs.iter().map(|r| r.round).collect();
    if rounds.len() <= config.holdout_rounds {
        return Err(Error::EmptyEvaluation(format!(
            "logs contain {} distinct rounds; need more than holdout_rounds = {}",
            rounds.len(),
            config.holdout_rounds
        )));
    }
    let first_holdout = *rounds.iter().rev().nth(config.holdout_rounds - 1).expect("enough rounds");
    let last_train = *rounds.range(..first_holdout).next_back().expect("a training round");
    let (n_users, n_items) = (config.world.n_users, config.world.n_items);
    for r in logs {
        if r.user_id >= n_users {
            return Err(Error::Index { kind: "user", index: r.user_id, len: n_users });
        }
        if r.item_id >= n_items {
            return Err(Error::Index { kind: "item", index: r.item_id, len: n_items });
        }
    }
    let (train_logs, holdout): (Vec<ImpressionRecord>, Vec<ImpressionRecord>) =
        logs.iter().copied().partition(|r| r.round < first_holdout);

    let counts = ExposureCounts::from_records(n_items, &train_logs)?;
    let eval = EvaluationSet::from_records(&holdout);
    if eval.positives().values().all(|s| s.is_empty()) {
        return Err(Error::EmptyEvaluation("held-out rounds contain no positive engagements".into()));
    }
    if eval.negatives().values().all(|s| s.is_empty()) {
        return Err(Error::EmptyEvaluation("held-out rounds contain no negative impressions".into()));
    }

    let train_config = train_config_for(config, seed, last_train);
    let outcome = train(&train_logs, &train_config, n_users, n_items).map_err(|e| Error::in_round(last_train as usize, e))?;
    let params = outcome.params;
    let fingerprint = params.fingerprint();
    let rows = config
        .gamma_grid
        .iter()
        .map(|&gamma| {
            Ok(SweepRow {
                gamma,
                seed,
                model_fingerprint: fingerprint.clone(),
                report: evaluate_model(&params, gamma, config.scoring.k, &eval, &counts, config.top_fraction)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let freq: Vec<f64> = (0..n_items).map(|v| counts.frequency(v)).collect();
    let exposure_spearman = spearman(&params.mean_exposure_probability(), &freq)?;

    let opc_params = train_opc_baseline(&train_logs, &train_config, &counts, config.propensity_clip, n_users)
        .map_err(|e| Error::in_round(last_train as usize, e))?
        .params;
    let opc = OpcRow {
        seed,
        model_fingerprint: opc_params.fingerprint(),
        report: evaluate_model(&opc_params, 0.0, config.scoring.k, &eval, &counts, config.top_fraction)?,
    };

    Ok(SeedSweep {
        rows,
        opc,
        diagnostics: SeedDiagnostics {
            seed,
            training_records: train_logs.len(),
            holdout_records: holdout.len(),
            final_train_loss: outcome.trace.last().map_or(f64::NAN, |e| e.total),
            exposure_spearman,
        },
    })
}

/// Static sweep for a single seed.
pub fn sweep_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedSweep> {
    let (_, logs) = simulate_static_logs(config, seed)?;
    evaluate_on_logs(config, seed, &logs)
}

/// Runs the static sweep for every configured seed.
pub fn run_static_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let per_seed: Vec<SeedSweep> = config
        .seeds
        .par_iter()
        .map(|&seed| sweep_seed(config, seed))
        .collect::<Result<_>>()?;
    collect_sweeps(per_seed)
}

/// Combines per-seed sweeps, in the order given, into one result.
pub fn collect_sweeps(per_seed: Vec<SeedSweep>) -> Result<SweepResult> {
    let mut rows = Vec::new();
    let mut opc = Vec::new();
    let mut diagnostics = Vec::new();
    for s in per_seed {
        rows.extend(s.rows);
        opc.push(s.opc);
        diagnostics.push(s.diagnostics);
    }
    SweepResult::from_rows(rows, opc, diagnostics)
}

/// Picks a gamma from a sweep's per-gamma means. Ties go to the smaller gamma.
pub fn grid_search_gamma(sweep: &SweepResult, rule: SelectionRule) -> Result<(f64, GammaAggregate)> {
    if sweep.aggregates.is_empty() {
        return Err(Error::EmptyInput("sweep has no gammas".into()));
    }
    let objective = |a: &GammaAggregate| match rule {
        SelectionRule::MaxPositive | SelectionRule::ConstrainedPositive { .. } => a.mean.positive_recall_at_k,
        SelectionRule::Scalarized { lambda } => a.mean.positive_recall_at_k - lambda * a.mean.negative_recall_at_k,
    };
    let feasible = |a: &GammaAggregate| match rule {
        SelectionRule::ConstrainedPositive { beta } => a.mean.negative_recall_at_k <= beta,
        _ => true,
    };
    let mut best: Option<&GammaAggregate> = None;
    for a in sweep.aggregates.iter().filter(|a| feasible(a)) {
        if best.is_none_or(|b| objective(a) > objective(b)) {
            best = Some(a);
        }
    }
    match best {
        Some(a) => Ok((a.gamma, a.clone())),
        None => {
            let lowest = sweep
                .aggregates
                .iter()
                .map(|a| a.mean.negative_recall_at_k)
                .fold(f64::INFINITY, f64::min);
            let beta = match rule {
                SelectionRule::ConstrainedPositive { beta } => beta,
                _ => unreachable!("only the constrained rule can be infeasible"),
            };
            Err(Error::NoFeasibleGamma(format!(
                "constraint mean negative_recall_at_k <= {beta}; lowest mean over the grid is {lowest}"
            )))
        }
    }
}

/// One round of a closed-loop run. `report` is absent for round 0; for later
/// rounds it scores the model that served the round against that round's
/// impressions, with dominance measured on the exposure history before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: u32,
    /// Gini of cumulative exposure through this round.
    pub exposure_gini: f64,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct LoopRun {
    pub seed: u64,
    pub gamma: f64,
    pub rows: Vec<TraceRow>,
    pub logs: Vec<ImpressionRecord>,
}

/// Closed feedback loop for one seed: bootstrap round 0, then every round is
/// served by a model retrained on all earlier rounds and scored at `gamma`.
pub fn run_closed_loop_seed(config: &ExperimentConfig, seed: u64, gamma: f64) -> Result<LoopRun> {
    config.validate_for_loop()?;
    crate::scoring::ScoringConfig {
        gamma,
        k: config.scoring.k,
    }
    .validate()?;
    let world = generate_world(&world_config_for(config, seed))?;
    let (n_users, n_items) = (world.n_users(), world.n_items());
    let (mut logs, mut counts) = log_round(&world, &bootstrap_policy(config), config, seed, 0)?;
    let mut rows = vec![TraceRow {
        round: 0,
        exposure_gini: exposure_gini(&counts)?,
        report: None,
    }];
    if config.rounds == 1 {
        return Ok(LoopRun { seed, gamma, rows, logs });
    }
    let fit = |logs: &[ImpressionRecord], round: u32| {
        train(logs, &train_config_for(config, seed, round), n_users, n_items)
            .map(|o| o.params)
            .map_err(|e| Error::in_round(round as usize, e))
    };
    let mut model = fit(&logs, 0)?;
    for round in 1..config.rounds as u32 {
        let index = build_index(&model, gamma)?;
        let policy = LoggingPolicy {
            kind: PolicyKind::ModelTopK {
                index: &index,
                params: &model,
            },
            slate_size: config.slate_size,
            exploration_epsilon: config.exploration_epsilon,
        };
        let (records, delta) = log_round(&world, &policy, config, seed, round)?;
        let eval = EvaluationSet::from_records(&records);
        let report = evaluate_model(&model, gamma, config.scoring.k, &eval, &counts, config.top_fraction)
            .map_err(|e| Error::in_round(round as usize, e))?;
        counts = accumulate_exposures(&counts, &delta)?;
        logs.extend(records);
        rows.push(TraceRow {
            round,
            exposure_gini: exposure_gini(&counts)?,
            report: Some(report),
        });
        if round + 1 < config.rounds as u32 {
            model = fit(&logs, round)?;
        }
    }
    Ok(LoopRun { seed, gamma, rows, logs })
}

/// Closed loop over every configured seed, in configuration order.
pub fn run_closed_loop(config: &ExperimentConfig, gamma: f64) -> Result<Vec<LoopRun>> {
    config.validate_for_loop()?;
    config
        .seeds
        .par_iter()
        .map(|&seed| run_closed_loop_seed(config, seed, gamma))
        .collect()
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// One row per (gamma, seed) for the two-head model, followed by one `opc`
/// row per seed.
pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "model,seed,model_fingerprint,{}", MetricsReport::CSV_HEADER)?;
    for r in &sweep.rows {
        writeln!(out, "exposure,{},{},{}", r.seed, r.model_fingerprint, r.report.csv_row())?;
    }
    for r in &sweep.opc {
        writeln!(out, "opc,{},{},{}", r.seed, r.model_fingerprint, r.report.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

/// Per-gamma mean and standard deviation, plus the OPC baseline row.
pub fn write_aggregate_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut out = create(path)?;
    let names = MetricSummary::default().fields().map(|(n, _)| n);
    let mut header = String::from("model,gamma,n_seeds");
    for n in names {
        header.push_str(&format!(",mean_{n},sd_{n}"));
    }
    writeln!(out, "{header}")?;
    let mut line = |model: &str, a: &GammaAggregate| -> std::io::Result<()> {
        let mut s = format!("{model},{},{}", a.gamma, a.n_seeds);
        for ((_, m), (_, d)) in a.mean.fields().iter().zip(a.sd.fields().iter()) {
            s.push_str(&format!(",{m},{d}"));
        }
        writeln!(out, "{s}")
    };
    for a in &sweep.aggregates {
        line("exposure", a)?;
    }
    if let Some(a) = &sweep.opc_aggregate {
        line("opc", a)?;
    }
    out.flush()?;
    Ok(())
}

/// Plot-ready long format: `gamma,metric,mean,sd`.
pub fn write_long_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "gamma,metric,mean,sd")?;
    for a in &sweep.aggregates {
        for ((name, m), (_, d)) in a.mean.fields().iter().zip(a.sd.fields().iter()) {
            writeln!(out, "{},{name},{m},{d}", a.gamma)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChosenGamma {
    pub rule: SelectionRule,
    pub gamma: f64,
    pub aggregate: GammaAggregate,
}

pub fn write_chosen_json(path: &Path, chosen: &ChosenGamma) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, chosen)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const CHOSEN_JSON: &str = "chosen_gamma.json";
pub const LONG_CSV: &str = "sweep_long.csv";
pub const TRACE_CSV: &str = "trace.csv";

/// Writes the four sweep artifacts into `dir` (created if needed) and returns
/// their paths.
pub fn write_sweep_outputs(dir: &Path, sweep: &SweepResult, chosen: &ChosenGamma) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<_> = [SWEEP_CSV, AGGREGATE_CSV, CHOSEN_JSON, LONG_CSV]
        .iter()
        .map(|name| dir.join(name))
        .collect();
    write_sweep_csv(&paths[0], sweep)?;
    write_aggregate_csv(&paths[1], sweep)?;
    write_chosen_json(&paths[2], chosen)?;
    write_long_csv(&paths[3], sweep)?;
    Ok(paths)
}

/// Static sweep plus gamma selection under the configured rule.
pub fn sweep_and_select(config: &ExperimentConfig) -> Result<(SweepResult, ChosenGamma)> {
    let sweep = run_static_sweep(config)?;
    let chosen = choose(&sweep, config.selection)?;
    Ok((sweep, chosen))
}

pub fn choose(sweep: &SweepResult, rule: SelectionRule) -> Result<ChosenGamma> {
    let (gamma, aggregate) = grid_search_gamma(sweep, rule)?;
    Ok(ChosenGamma { rule, gamma, aggregate })
}

/// Log file name used when exporting a loop run.
pub fn loop_log_name(seed: u64) -> String {
    format!("logs_seed_{seed}.csv")
}

pub const TRACE_HEADER: &str =
    "seed,gamma,round,exposure_gini,n_eval_users,positive_recall_at_k,negative_recall_at_k,unique_retrieved,popular_dominance";

/// Per-round trace for one or more loop runs. Metric columns are empty on
/// round 0.
pub fn write_trace_csv(path: &Path, runs: &[LoopRun]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{TRACE_HEADER}")?;
    for run in runs {
        for row in &run.rows {
            match &row.report {
                Some(r) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    run.seed,
                    run.gamma,
                    row.round,
                    row.exposure_gini,
                    r.n_eval_users,
                    r.positive_recall_at_k,
                    r.negative_recall_at_k,
                    r.unique_retrieved,
                    r.popular_dominance
                )?,
                None => writeln!(out, "{},{},{},{},,,,,", run.seed, run.gamma, row.round, row.exposure_gini)?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-seed medians of a trace column, indexed by round.
pub fn median_by_round(runs: &[LoopRun], value: impl Fn(&TraceRow) -> Option<f64>) -> BTreeMap<u32, f64> {
    let mut by_round: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for row in &run.rows {
            if let Some(x) = value(row) {
                by_round.entry(row.round).or_default().push(x);
            }
        }
    }
    by_round.into_iter().map(|(r, v)| (r, median(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            world: WorldConfig {
                n_users: 40,
                n_items: 120,
                latent_dim: 4,
                ..WorldConfig::default()
            },
            train: TrainConfig {
                epochs: 3,
                embed_dim: 4,
                exposure_embed_dim: 4,
                batch_size: 64,
                ..TrainConfig::default()
            },
            scoring: crate::scoring::ScoringConfig { gamma: 0.65, k: 10 },
            rounds: 3,
            slate_size: 5,
            seeds: vec![3, 9],
            gamma_grid: vec![0.0, 0.5, 1.0],
            ..ExperimentConfig::default()
        }
    }

    fn report(pos: f64, neg: f64, gamma: f64) -> MetricsReport {
        MetricsReport {
            positive_recall_at_k: pos,
            negative_recall_at_k: neg,
            unique_retrieved: 10,
            popular_dominance: 0.5,
            exposure_gini: 0.3,
            k: 10,
            gamma,
            n_eval_users: 5,
        }
    }

    fn sweep_of(means: &[(f64, f64, f64)]) -> SweepResult {
        let rows = means
            .iter()
            .map(|&(g, p, n)| SweepRow {
                gamma: g,
                seed: 1,
                model_fingerprint: "m".into(),
                report: report(p, n, g),
            })
            .collect();
        SweepResult::from_rows(rows, vec![], vec![]).unwrap()
    }

    #[test]
    fn single_gamma_grid_gives_one_report_per_seed() {
        let config = ExperimentConfig {
            gamma_grid: vec![0.0],
            ..tiny()
        };
        let sweep = run_static_sweep(&config).unwrap();
        assert_eq!(sweep.rows.len(), config.seeds.len());
        assert_eq!(sweep.opc.len(), config.seeds.len());
    }

    #[test]
    fn one_model_serves_every_gamma() {
        let config = tiny();
        let sweep = run_static_sweep(&config).unwrap();
        assert_eq!(sweep.rows.len(), config.seeds.len() * config.gamma_grid.len());
        for &seed in &config.seeds {
            let prints: HashSet<&str> = sweep
                .rows
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.model_fingerprint.as_str())
                .collect();
            assert_eq!(prints.len(), 1);
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let config = tiny();
        assert_eq!(run_static_sweep(&config).unwrap(), run_static_sweep(&config).unwrap());
    }

    #[test]
    fn seeds_are_isolated() {
        let config = tiny();
        let alone = ExperimentConfig {
            seeds: vec![9],
            ..tiny()
        };
        let both = run_static_sweep(&config).unwrap();
        let one = run_static_sweep(&alone).unwrap();
        for g in config.gamma_grid {
            assert_eq!(both.report(g, 9), one.report(g, 9));
        }
    }

    #[test]
    fn replaying_sweep_logs_reproduces_the_sweep() {
        let config = tiny();
        let (_, logs) = simulate_static_logs(&config, 3).unwrap();
        let replayed = evaluate_on_logs(&config, 3, &logs).unwrap();
        let direct = sweep_seed(&config, 3).unwrap();
        assert_eq!(replayed.rows, direct.rows);
        assert_eq!(replayed.opc, direct.opc);
    }

    #[test]
    fn single_round_logs_cannot_be_split() {
        let config = tiny();
        let (_, logs) = simulate_static_logs(&config, 3).unwrap();
        let first: Vec<_> = logs.into_iter().filter(|r| r.round == 0).collect();
        assert!(matches!(evaluate_on_logs(&config, 3, &first), Err(Error::EmptyEvaluation(_))));
    }

    #[test]
    fn out_of_range_holdout_ids_are_rejected() {
        let config = tiny();
        let (_, mut logs) = simulate_static_logs(&config, 3).unwrap();
        let last = *logs.last().unwrap();
        logs.push(ImpressionRecord { item_id: config.world.n_items, ..last });
        assert!(matches!(
            evaluate_on_logs(&config, 3, &logs),
            Err(Error::Index { kind: "item", .. })
        ));
    }

    #[test]
    fn selection_rules() {
        let sweep = sweep_of(&[(0.0, 0.298, 0.110), (0.65, 0.317, 0.099), (1.0, 0.280, 0.079)]);
        assert_eq!(grid_search_gamma(&sweep, SelectionRule::MaxPositive).unwrap().0, 0.65);
        assert_eq!(
            grid_search_gamma(&sweep, SelectionRule::Scalarized { lambda: 0.0 }).unwrap().0,
            grid_search_gamma(&sweep, SelectionRule::MaxPositive).unwrap().0
        );
        assert_eq!(
            grid_search_gamma(&sweep, SelectionRule::ConstrainedPositive { beta: 0.09 }).unwrap().0,
            1.0
        );
        assert_eq!(grid_search_gamma(&sweep, SelectionRule::Scalarized { lambda: 5.0 }).unwrap().0, 1.0);
        let err = grid_search_gamma(&sweep, SelectionRule::ConstrainedPositive { beta: 0.05 }).unwrap_err();
        assert!(matches!(err, Error::NoFeasibleGamma(ref m) if m.contains("0.05")), "{err}");
    }

    #[test]
    fn selection_ties_go_to_smaller_gamma() {
        let sweep = sweep_of(&[(0.0, 0.2, 0.1), (0.5, 0.3, 0.1), (1.0, 0.3, 0.1)]);
        for rule in [
            SelectionRule::MaxPositive,
            SelectionRule::Scalarized { lambda: 1.0 },
            SelectionRule::ConstrainedPositive { beta: 1.0 },
        ] {
            assert_eq!(grid_search_gamma(&sweep, rule).unwrap().0, 0.5);
        }
    }

    #[test]
    fn singleton_sweep_selects_its_gamma() {
        let sweep = sweep_of(&[(0.4, 0.2, 0.1)]);
        for rule in [
            SelectionRule::MaxPositive,
            SelectionRule::Scalarized { lambda: 3.0 },
            SelectionRule::ConstrainedPositive { beta: 0.5 },
        ] {
            assert_eq!(grid_search_gamma(&sweep, rule).unwrap().0, 0.4);
        }
    }

    #[test]
    fn aggregates_use_sample_sd() {
        let rows = [(1u64, 0.2), (2, 0.4)]
            .iter()
            .map(|&(seed, p)| SweepRow {
                gamma: 0.0,
                seed,
                model_fingerprint: "m".into(),
                report: report(p, 0.1, 0.0),
            })
            .collect();
        let sweep = SweepResult::from_rows(rows, vec![], vec![]).unwrap();
        let a = &sweep.aggregates[0];
        assert!((a.mean.positive_recall_at_k - 0.3).abs() < 1e-15);
        assert!((a.sd.positive_recall_at_k - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.sd.negative_recall_at_k, 0.0);
    }

    #[test]
    fn gaps_are_rejected() {
        let rows = vec![
            SweepRow {
                gamma: 0.0,
                seed: 1,
                model_fingerprint: "m".into(),
                report: report(0.1, 0.1, 0.0),
            },
            SweepRow {
                gamma: 0.5,
                seed: 2,
                model_fingerprint: "m".into(),
                report: report(0.1, 0.1, 0.5),
            },
        ];
        assert!(matches!(SweepResult::from_rows(rows, vec![], vec![]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_round_loop_is_bootstrap_only() {
        let config = ExperimentConfig { rounds: 1, ..tiny() };
        let run = run_closed_loop_seed(&config, 3, 0.0).unwrap();
        assert_eq!(run.rows.len(), 1);
        assert!(run.rows[0].report.is_none());
        assert!(run.logs.iter().all(|r| r.round == 0));
    }

    #[test]
    fn loop_trace_has_one_row_per_round() {
        let config = tiny();
        let run = run_closed_loop_seed(&config, 3, 0.5).unwrap();
        assert_eq!(run.rows.len(), config.rounds);
        assert!(run.rows[1..].iter().all(|r| r.report.is_some()));
        assert_eq!(run.logs.len(), config.rounds * config.world.n_users * config.slate_size);
        let again = run_closed_loop_seed(&config, 3, 0.5).unwrap();
        assert_eq!(run.rows, again.rows);
    }

    #[test]
    fn loop_final_round_matches_replay() {
        let config = tiny();
        let run = run_closed_loop_seed(&config, 3, 0.5).unwrap();
        let replay = evaluate_on_logs(&config, 3, &run.logs).unwrap();
        let last = run.rows.last().unwrap().report.as_ref().unwrap();
        let row = replay.rows.iter().find(|r| r.gamma == 0.5).unwrap();
        assert_eq!(&row.report, last);
    }

    #[test]
    fn loop_rejects_negative_gamma() {
        assert!(matches!(
            run_closed_loop_seed(&tiny(), 3, -0.1),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn loop_divergence_reports_round() {
        let config = ExperimentConfig {
            train: TrainConfig {
                learning_rate: 1e6,
                ..tiny().train
            },
            ..tiny()
        };
        match run_closed_loop_seed(&config, 3, 0.0) {
            Err(Error::InRound { round: 0, source }) => assert!(matches!(*source, Error::Diverged { .. })),
            other => panic!("expected divergence in round 0, got {other:?}"),
        }
    }

    #[test]
    fn median_fixtures() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
