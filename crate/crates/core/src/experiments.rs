//! Configuration, experiment runs, sweeps and CSV output.
//!
//! A config is plain `key = value` text; `#` starts a comment. Unset keys
//! take the default chip parameters, except `k`, which must be given.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::analytic::{model_curve, power_of_two_grid, AnalyticParams, ModelPoint};
use crate::chip::{AppRecord, Chip, ChipConfig, ChipStats, SimError};
use crate::interconnect::TransferTiming;
use crate::kernel::SimTime;
use crate::taskmgr::{GlobalScope, JoinPolicy};
use crate::traces::{
    gen_independent, gen_interference_schedule, seeded_rng, ArrivalDist, BenchmarkKind,
    BenchmarkSpec, LengthDist,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("simulation aborted: {0}")]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn cfg_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub experiment: String,
    pub benchmark: BenchmarkKind,
    pub m: u32,
    pub k: Option<u32>,
    pub n: u32,
    pub global_bus_width: u32,
    pub local_bus_width: u32,
    pub tx_delay: u64,
    pub rx_delay: u64,
    pub c_s: u64,
    /// Per-message cost of the analytic model; not used by the simulator.
    pub c_b: f64,
    pub max_child_len: u64,
    pub sim_length: u64,
    pub delta_n_th: u32,
    pub seed: u64,
    pub repetitions: u32,
    pub lambda_mean: f64,
    pub duty: f64,
    pub len_lo_frac: f64,
    pub arrival: ArrivalDist,
    pub global_scope: GlobalScope,
    pub join_policy: JoinPolicy,
    pub rooted_territory: bool,
    pub base_cost: u64,
    /// GMN receiving the independent benchmark's stimulus.
    pub target_gmn: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            experiment: "run".into(),
            benchmark: BenchmarkKind::Interference,
            m: 256,
            k: None,
            n: 100,
            global_bus_width: 32,
            local_bus_width: 32,
            tx_delay: 4,
            rx_delay: 4,
            c_s: 8,
            c_b: 8.0,
            max_child_len: 16000,
            sim_length: 10_000_000,
            delta_n_th: 4,
            seed: 1,
            repetitions: 1,
            lambda_mean: 7999.0,
            duty: 0.9,
            len_lo_frac: 0.95,
            arrival: ArrivalDist::Poisson,
            global_scope: GlobalScope::Territory,
            join_policy: JoinPolicy::Lend,
            rooted_territory: false,
            base_cost: 1,
            target_gmn: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "experiment",
    "benchmark",
    "m",
    "k",
    "n",
    "global_bus_width",
    "local_bus_width",
    "tx_delay",
    "rx_delay",
    "c_s",
    "c_b",
    "max_child_len",
    "sim_length",
    "delta_n_th",
    "seed",
    "repetitions",
    "lambda_mean",
    "duty",
    "len_lo_frac",
    "arrival",
    "global_scope",
    "join_policy",
    "rooted_territory",
    "base_cost",
    "target_gmn",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ExperimentError> {
    // allow 1e7-style integers
    if let Ok(x) = v.parse::<T>() {
        return Ok(x);
    }
    if let Ok(f) = v.parse::<f64>() {
        if f.fract() == 0.0 && f >= 0.0 {
            if let Ok(x) = format!("{f:.0}").parse::<T>() {
                return Ok(x);
            }
        }
    }
    Err(cfg_err(format!("{key}: cannot parse {v:?}")))
}

impl SimConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let v = value.trim();
        match key.trim() {
            "experiment" => self.experiment = v.to_string(),
            "benchmark" => {
                self.benchmark = match v {
                    "independent" => BenchmarkKind::Independent,
                    "interference" => BenchmarkKind::Interference,
                    _ => return Err(cfg_err(format!("benchmark: unknown kind {v:?}"))),
                }
            }
            "m" => self.m = parse_num(key, v)?,
            "k" => self.k = Some(parse_num(key, v)?),
            "n" => self.n = parse_num(key, v)?,
            "global_bus_width" => self.global_bus_width = parse_num(key, v)?,
            "local_bus_width" => self.local_bus_width = parse_num(key, v)?,
            "tx_delay" => self.tx_delay = parse_num(key, v)?,
            "rx_delay" => self.rx_delay = parse_num(key, v)?,
            "c_s" => self.c_s = parse_num(key, v)?,
            "c_b" => self.c_b = parse_num(key, v)?,
            "max_child_len" => self.max_child_len = parse_num(key, v)?,
            "sim_length" => self.sim_length = parse_num(key, v)?,
            "delta_n_th" => self.delta_n_th = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "repetitions" => self.repetitions = parse_num(key, v)?,
            "lambda_mean" => self.lambda_mean = parse_num(key, v)?,
            "duty" => self.duty = parse_num(key, v)?,
            "len_lo_frac" => self.len_lo_frac = parse_num(key, v)?,
            "arrival" => {
                self.arrival = match v {
                    "exponential" => ArrivalDist::Exponential,
                    "poisson" => ArrivalDist::Poisson,
                    _ => return Err(cfg_err(format!("arrival: unknown distribution {v:?}"))),
                }
            }
            "global_scope" => {
                self.global_scope = match v {
                    "territory" => GlobalScope::Territory,
                    "chip" => GlobalScope::Chip,
                    _ => return Err(cfg_err(format!("global_scope: unknown scope {v:?}"))),
                }
            }
            "join_policy" => {
                self.join_policy = match v {
                    "hold" => JoinPolicy::Hold,
                    "yield" => JoinPolicy::Yield,
                    "lend" => JoinPolicy::Lend,
                    _ => return Err(cfg_err(format!("join_policy: unknown policy {v:?}"))),
                }
            }
            "rooted_territory" => self.rooted_territory = parse_num(key, v)?,
            "base_cost" => self.base_cost = parse_num(key, v)?,
            "target_gmn" => self.target_gmn = parse_num(key, v)?,
            other => return Err(cfg_err(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", i + 1)))?;
            self.set(key, value)
                .map_err(|e| cfg_err(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Parse a config file body, then apply `overrides` (flags win).
    pub fn load(text: &str, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let mut cfg = SimConfig::default();
        cfg.apply_text(text)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn k(&self) -> Result<u32, ExperimentError> {
        self.k.ok_or_else(|| cfg_err("k is required"))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let k = self.k()?;
        if self.m == 0 || k == 0 || self.n == 0 {
            return Err(cfg_err("m, k and n must be positive"));
        }
        if k > self.m || !self.m.is_multiple_of(k) {
            return Err(cfg_err(format!("k={k} must divide m={}", self.m)));
        }
        if self.global_bus_width == 0 || self.local_bus_width == 0 {
            return Err(cfg_err("bus widths must be positive"));
        }
        if self.delta_n_th == 0 || self.sim_length == 0 || self.repetitions == 0 {
            return Err(cfg_err("delta_n_th, sim_length and repetitions must be positive"));
        }
        if self.benchmark == BenchmarkKind::Interference
            && !(self.lambda_mean > 0.0 && self.duty > 0.0 && self.duty <= 1.0)
        {
            return Err(cfg_err("interference needs lambda_mean > 0 and 0 < duty <= 1"));
        }
        if !(0.0..=1.0).contains(&self.len_lo_frac) {
            return Err(cfg_err("len_lo_frac must lie in [0, 1]"));
        }
        if self.target_gmn >= k {
            return Err(cfg_err(format!("target_gmn {} out of range", self.target_gmn)));
        }
        Ok(())
    }

    pub fn chip_config(&self) -> Result<ChipConfig, ExperimentError> {
        self.validate()?;
        Ok(ChipConfig {
            m: self.m,
            k: self.k()?,
            global_timing: TransferTiming {
                tx_delay: self.tx_delay,
                rx_delay: self.rx_delay,
                width: self.global_bus_width,
            },
            local_timing: TransferTiming {
                tx_delay: self.tx_delay,
                rx_delay: self.rx_delay,
                width: self.local_bus_width,
            },
            c_s: self.c_s,
            delta_n_th: self.delta_n_th,
            base_cost: self.base_cost,
            global_scope: self.global_scope,
            join_policy: self.join_policy,
            rooted_territory: self.rooted_territory,
            audit: false,
            log_messages: false,
        })
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        let len_dist = match self.benchmark {
            BenchmarkKind::Independent => LengthDist::Fixed,
            BenchmarkKind::Interference => LengthDist::Uniform {
                lo_frac: self.len_lo_frac,
            },
        };
        BenchmarkSpec {
            kind: self.benchmark,
            n: self.n,
            max_len: self.max_child_len,
            len_dist,
            lambda_mean: self.lambda_mean,
            arrival: self.arrival,
            duty: self.duty,
            seed: self.seed,
        }
    }

    pub fn analytic_params(&self) -> Result<AnalyticParams, ExperimentError> {
        Ok(AnalyticParams {
            m: self.m,
            n: self.n,
            k: self.k.unwrap_or(1),
            l: self.max_child_len as f64,
            c_s: self.c_s as f64,
            c_b: self.c_b,
        })
    }
}

/// Outcome of one simulation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: SimConfig,
    pub apps: Vec<AppRecord>,
    pub stats: ChipStats,
    /// Injected applications that did not complete.
    pub misses: u32,
    pub message_log: Vec<String>,
}

impl RunResult {
    pub fn apps_injected(&self) -> u32 {
        self.apps.len() as u32
    }

    pub fn apps_completed(&self) -> u32 {
        self.apps.iter().filter(|a| a.end_tick.is_some()).count() as u32
    }

    /// A run counts only if every injected application completed.
    pub fn is_valid(&self) -> bool {
        self.misses == 0 && !self.apps.is_empty()
    }

    pub fn t_r_mean(&self) -> Option<f64> {
        let t: Vec<f64> = self
            .apps
            .iter()
            .filter_map(|a| a.response_time())
            .map(|t| t as f64)
            .collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    /// Mean per-application speedup over completed applications.
    pub fn speedup(&self) -> Option<f64> {
        compute_speedup(&self.apps)
    }
}

/// S = t_seq / t_r averaged over the completed applications; `None` when
/// nothing completed.
pub fn compute_speedup(apps: &[AppRecord]) -> Option<f64> {
    let s: Vec<f64> = apps.iter().filter_map(AppRecord::speedup).collect();
    (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub audit: bool,
    pub log_messages: bool,
}

/// Build a chip with the configured benchmark injected, ready to run.
pub fn build_chip(cfg: &SimConfig, opts: RunOptions) -> Result<Chip, ExperimentError> {
    let mut chip_cfg = cfg.chip_config()?;
    chip_cfg.audit = opts.audit;
    chip_cfg.log_messages = opts.log_messages;
    let k = chip_cfg.k;
    let mut chip = Chip::new(chip_cfg)?;
    match cfg.benchmark {
        BenchmarkKind::Independent => {
            chip.inject(0, cfg.target_gmn, &gen_independent(cfg.n, cfg.max_child_len))?;
        }
        BenchmarkKind::Interference => {
            let spec = cfg.benchmark_spec();
            let mut rng = seeded_rng(cfg.seed);
            for inj in gen_interference_schedule(&spec, cfg.sim_length, k, &mut rng) {
                chip.inject(inj.tick, inj.target_gmn, &inj.bundle)?;
            }
        }
    }
    Ok(chip)
}

pub fn run_with(cfg: &SimConfig, opts: RunOptions) -> Result<(RunResult, Chip), ExperimentError> {
    let mut chip = build_chip(cfg, opts)?;
    chip.run_until(SimTime(cfg.sim_length))?;
    let apps = chip.apps().to_vec();
    let misses = apps.iter().filter(|a| a.end_tick.is_none()).count() as u32;
    let result = RunResult {
        config: cfg.clone(),
        apps,
        stats: chip.stats(),
        misses,
        message_log: chip.message_log().to_vec(),
    };
    Ok((result, chip))
}

pub fn run_experiment(cfg: &SimConfig) -> Result<RunResult, ExperimentError> {
    run_with(cfg, RunOptions::default()).map(|(r, _)| r)
}

// ---------------------------------------------------------------------------
// CSV

pub const RESULT_COLUMNS: [&str; 17] = [
    "experiment",
    "k",
    "delta_n_th",
    "c_s",
    "c_b",
    "seed",
    "n",
    "m",
    "apps_injected",
    "apps_completed",
    "t_r_mean",
    "speedup",
    "beacons_tx",
    "beacons_rx",
    "msgs_total",
    "global_bus_util",
    "local_bus_util_mean",
];

/// One CSV row, already formatted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row(pub Vec<String>);

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

impl Row {
    /// Row of a single run. Invalid runs leave the metric columns empty.
    pub fn from_result(r: &RunResult) -> Row {
        let c = &r.config;
        let valid = r.is_valid();
        let metric = |x: Option<f64>| if valid { fmt_opt(x) } else { String::new() };
        Row(vec![
            c.experiment.clone(),
            c.k.unwrap_or(0).to_string(),
            c.delta_n_th.to_string(),
            c.c_s.to_string(),
            fmt_f(c.c_b),
            c.seed.to_string(),
            c.n.to_string(),
            c.m.to_string(),
            r.apps_injected().to_string(),
            r.apps_completed().to_string(),
            metric(r.t_r_mean()),
            metric(r.speedup()),
            r.stats.beacons_tx.to_string(),
            r.stats.beacons_rx.to_string(),
            r.stats.msgs_total.to_string(),
            fmt_f(r.stats.global_bus_util),
            fmt_f(r.stats.local_bus_util_mean),
        ])
    }

    /// Mean over the valid repetitions of one cell; the seed column reads
    /// `mean`. Metric columns stay empty when no repetition is valid.
    pub fn aggregate(results: &[RunResult]) -> Row {
        let first = &results[0].config;
        let valid: Vec<&RunResult> = results.iter().filter(|r| r.is_valid()).collect();
        let mean = |f: &dyn Fn(&RunResult) -> Option<f64>| -> String {
            let v: Vec<f64> = valid.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                String::new()
            } else {
                fmt_f(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let sum_u = |f: &dyn Fn(&RunResult) -> u32| results.iter().map(f).sum::<u32>().to_string();
        Row(vec![
            first.experiment.clone(),
            first.k.unwrap_or(0).to_string(),
            first.delta_n_th.to_string(),
            first.c_s.to_string(),
            fmt_f(first.c_b),
            "mean".into(),
            first.n.to_string(),
            first.m.to_string(),
            sum_u(&|r| r.apps_injected()),
            sum_u(&|r| r.apps_completed()),
            mean(&|r| r.t_r_mean()),
            mean(&|r| r.speedup()),
            mean(&|r| Some(r.stats.beacons_tx as f64)),
            mean(&|r| Some(r.stats.beacons_rx as f64)),
            mean(&|r| Some(r.stats.msgs_total as f64)),
            mean(&|r| Some(r.stats.global_bus_util)),
            mean(&|r| Some(r.stats.local_bus_util_mean)),
        ])
    }
}

/// Write a header and rows to any writer.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: &[Row]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r.0)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(path: &std::path::Path, header: &[&str], rows: &[Row]) -> Result<(), ExperimentError> {
    let f = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(f), header, rows)
}

pub const APP_COLUMNS: [&str; 6] = [
    "app_id",
    "inject_tick",
    "complete_tick",
    "response_time",
    "n_children",
    "missed",
];

pub fn app_rows(r: &RunResult) -> Vec<Row> {
    r.apps
        .iter()
        .map(|a| {
            Row(vec![
                a.id.to_string(),
                a.inject_tick.to_string(),
                a.end_tick.map(|t| t.to_string()).unwrap_or_default(),
                a.response_time().map(|t| t.to_string()).unwrap_or_default(),
                a.n_children.to_string(),
                (a.end_tick.is_none() as u8).to_string(),
            ])
        })
        .collect()
}

pub const NODE_COLUMNS: [&str; 6] = ["node", "tasks", "busy_ticks", "syscalls", "messages", "swaps"];

pub fn node_rows(chip: &Chip) -> Vec<Row> {
    let cfg = chip.config();
    let mut rows = Vec::new();
    for g in 0..cfg.k {
        let node = chip.gmn(g);
        let c = node.tm.counters();
        rows.push(Row(vec![
            format!("gmn{g}"),
            (c.children_spawned + c.helpers_hosted).to_string(),
            node.busy_ticks.to_string(),
            String::new(),
            c.messages.to_string(),
            String::new(),
        ]));
    }
    for l in 0..cfg.m {
        let c = chip.lc(l).counters();
        rows.push(Row(vec![
            format!("lc{l}"),
            c.tasks_finished.to_string(),
            c.busy_ticks.to_string(),
            c.syscalls.to_string(),
            String::new(),
            c.swaps.to_string(),
        ]));
    }
    rows
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for Axis {
    type Err = ExperimentError;

    /// `key=v1,v2,...`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, vals) = s
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("axis {s:?}: expected key=v1,v2,...")))?;
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(cfg_err(format!("axis: unknown key {key:?}")));
        }
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(cfg_err(format!("axis {key}: no values")));
        }
        Ok(Axis { key, values })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key, self.values.join(","))
    }
}

/// Seed of repetition `rep` in cell `cell`.
pub fn derive_seed(base: u64, cell: usize, rep: u32) -> u64 {
    base ^ cell as u64 ^ ((rep as u64) << 32)
}

/// Cartesian product of the axes applied to `base`, in row-major order
/// (last axis fastest).
pub fn sweep_cells(base: &SimConfig, axes: &[Axis]) -> Result<Vec<SimConfig>, ExperimentError> {
    let mut cells = vec![base.clone()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for c in &cells {
            for v in &axis.values {
                let mut c2 = c.clone();
                c2.set(&axis.key, v)?;
                next.push(c2);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

#[derive(Debug)]
pub struct SweepOutput {
    pub rows: Vec<Row>,
    pub results: Vec<Vec<RunResult>>,
}

impl SweepOutput {
    /// Every cell lost at least one run to missed applications.
    pub fn all_suppressed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|c| c.iter().all(|r| !r.is_valid()))
    }
}

/// Run every cell `base.repetitions` times, in parallel, and assemble rows in
/// cell order: one row per repetition, plus a mean row when repeated.
pub fn sweep(base: &SimConfig, axes: &[Axis]) -> Result<SweepOutput, ExperimentError> {
    let cells = sweep_cells(base, axes)?;
    let reps = base.repetitions;
    let jobs: Vec<(usize, SimConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            (0..reps).map(move |r| {
                let mut c = c.clone();
                c.seed = derive_seed(base.seed, i, r);
                (i, c)
            })
        })
        .collect();
    let outcomes: Vec<Result<RunResult, ExperimentError>> =
        jobs.par_iter().map(|(_, c)| run_experiment(c)).collect();

    let mut results: Vec<Vec<RunResult>> = vec![Vec::new(); cells.len()];
    for ((cell, _), out) in jobs.iter().zip(outcomes) {
        results[*cell].push(out?);
    }
    let mut rows = Vec::new();
    for cell in &results {
        rows.extend(cell.iter().map(Row::from_result));
        if reps > 1 {
            rows.push(Row::aggregate(cell));
        }
    }
    Ok(SweepOutput { rows, results })
}

// ---------------------------------------------------------------------------
// Model and comparison

pub const MODEL_COLUMNS: [&str; 6] = ["k", "c_s", "c_b", "omega_cmp", "omega_msg", "speedup_model"];

pub fn model_rows(points: &[ModelPoint]) -> Vec<Row> {
    points
        .iter()
        .map(|p| {
            Row(vec![
                p.k.to_string(),
                fmt_f(p.c_s),
                fmt_f(p.c_b),
                fmt_f(p.omega_cmp),
                fmt_f(p.omega_msg),
                fmt_f(p.speedup_model),
            ])
        })
        .collect()
}

/// Analytic curve over the given k values (power-of-two divisors of m by
/// default).
pub fn model(cfg: &SimConfig, ks: Option<&[u32]>) -> Result<Vec<ModelPoint>, ExperimentError> {
    let base = cfg.analytic_params()?;
    let grid = ks.map(<[u32]>::to_vec).unwrap_or_else(|| power_of_two_grid(cfg.m));
    if let Some(bad) = grid.iter().find(|k| **k == 0 || !cfg.m.is_multiple_of(**k)) {
        return Err(cfg_err(format!("k={bad} must divide m={}", cfg.m)));
    }
    Ok(model_curve(&base, &grid))
}

pub const COMPARE_COLUMNS: [&str; 7] = [
    "k",
    "c_s",
    "c_b",
    "speedup_model",
    "speedup_sim",
    "t_r_sim",
    "rel_diff",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparePoint {
    pub k: u32,
    pub model: f64,
    pub sim: Option<f64>,
    pub t_r: Option<f64>,
}

impl ComparePoint {
    pub fn rel_diff(&self) -> Option<f64> {
        self.sim.map(|s| (s - self.model).abs() / self.model)
    }
}

/// Independent-task benchmark simulated at every k next to the model.
pub fn compare(cfg: &SimConfig, ks: Option<&[u32]>) -> Result<Vec<ComparePoint>, ExperimentError> {
    let points = model(cfg, ks)?;
    let jobs: Vec<SimConfig> = points
        .iter()
        .map(|p| {
            let mut c = cfg.clone();
            c.benchmark = BenchmarkKind::Independent;
            c.k = Some(p.k);
            c.target_gmn = 0;
            c
        })
        .collect();
    let sims: Vec<Result<RunResult, ExperimentError>> = jobs.par_iter().map(run_experiment).collect();
    points
        .iter()
        .zip(sims)
        .map(|(p, r)| {
            let r = r?;
            let valid = r.is_valid();
            Ok(ComparePoint {
                k: p.k,
                model: p.speedup_model,
                sim: if valid { r.speedup() } else { None },
                t_r: if valid { r.t_r_mean() } else { None },
            })
        })
        .collect()
}

pub fn compare_rows(cfg: &SimConfig, points: &[ComparePoint]) -> Vec<Row> {
    points
        .iter()
        .map(|p| {
            Row(vec![
                p.k.to_string(),
                cfg.c_s.to_string(),
                fmt_f(cfg.c_b),
                fmt_f(p.model),
                fmt_opt(p.sim),
                fmt_opt(p.t_r),
                fmt_opt(p.rel_diff()),
            ])
        })
        .collect()
}
