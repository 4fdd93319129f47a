//! Experiment runner: configuration files, commands and CSV reports.
//!
//! Every command writes into one output directory. `results.json` holds the
//! numbers behind the CSV files, so [`Command::Report`] can regenerate them
//! without recomputation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Variant;
use crate::scenario::{Aabb, Point3, Scenario, SystemConfig};
use crate::trainer::{
    derive_seed, evaluate, make_dataset, train_observed, Checkpoint, EpochRecord, EvalSummary, Split, TrainConfig,
    TrainError,
};

pub const HISTORY_HEADER: &str = "epoch,mean_loss,mean_sum_rate,spacing_penalty,sinr_penalty";
pub const SWEEP_POWER_HEADER: &str = "p_max_w,variant,mean_sum_rate,sinr_satisfaction";
pub const SWEEP_GAMMA_HEADER: &str = "gamma0,mean_sum_rate,mean_ps,sinr_satisfaction";

pub const RESULTS_FILE: &str = "results.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const SWEEP_POWER_FILE: &str = "sweep_power.csv";
pub const SWEEP_GAMMA_FILE: &str = "sweep_gamma.csv";
pub const SCENARIOS_FILE: &str = "scenarios.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl ExperimentError {
    /// 1 for configuration and I/O failures, 2 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Train(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Base configuration a file starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Full,
    #[default]
    Desk,
    Tiny,
}

/// Flat configuration file. Keys are the field names of [`SystemConfig`] and
/// [`TrainConfig`]; absent keys keep the preset's value.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub wavelength: Option<f64>,
    pub carrier_hz: Option<f64>,
    pub refractive_index: Option<f64>,
    pub n_tx: Option<usize>,
    pub n_rx: Option<usize>,
    pub n_ma: Option<usize>,
    pub users: Option<usize>,
    pub scatterers: Option<usize>,
    pub waveguide_length: Option<f64>,
    pub rx_array_length: Option<f64>,
    pub ma_region: Option<f64>,
    pub d_min: Option<f64>,
    pub rician_k: Option<f64>,
    pub noise_comm: Option<f64>,
    pub noise_sens: Option<f64>,
    pub p_max: Option<f64>,
    pub gamma0: Option<f64>,
    pub nu_sinr: Option<f64>,
    pub nu_spacing: Option<f64>,
    pub rx_midpoint: Option<Point3>,
    pub user_boxes: Option<Vec<Aabb>>,
    pub target_box: Option<Aabb>,
    pub scatterer_box: Option<Aabb>,
    pub seed: Option<u64>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub data_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub shuffle_seed: Option<u64>,
    pub p_max_list: Option<Vec<f64>>,
    pub gamma_list: Option<Vec<f64>>,
}

macro_rules! overlay {
    ($src:expr, $dst:expr; $($f:ident),* $(,)?) => {
        $( if let Some(v) = &$src.$f { $dst.$f = v.clone(); } )*
    };
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    /// Preset values with every present key applied.
    pub fn resolve(&self) -> (SystemConfig, TrainConfig) {
        let (mut sys, mut tc) = match self.preset.unwrap_or_default() {
            Preset::Full => (SystemConfig::full(), TrainConfig::full()),
            Preset::Desk => (SystemConfig::desk(), TrainConfig::desk()),
            Preset::Tiny => (SystemConfig::tiny(), TrainConfig::desk()),
        };
        overlay!(self, sys;
            wavelength, carrier_hz, refractive_index, n_tx, n_rx, n_ma, users, scatterers,
            waveguide_length, rx_array_length, ma_region, d_min, rician_k, noise_comm, noise_sens,
            p_max, gamma0, nu_sinr, nu_spacing, rx_midpoint, user_boxes, target_box, scatterer_box, seed,
        );
        overlay!(self, tc;
            train_size, test_size, batch_size, epochs, learning_rate, beta1, beta2, epsilon,
            data_seed, init_seed, shuffle_seed, p_max_list, gamma_list,
        );
        (sys, tc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    SweepPower,
    SweepGamma,
    Report,
}

/// One invocation: a command, its inputs and its overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Seeds to run with. Sweeps average over all of them; other commands
    /// accept at most one. Empty keeps the configured seeds.
    pub seeds: Vec<u64>,
    pub variant: Option<Variant>,
    pub p_max_list: Option<Vec<f64>>,
    pub gamma_list: Option<Vec<f64>>,
    /// Scenario count for `gen-data` and test-set size for `eval`.
    pub count: Option<usize>,
    /// Checkpoint read by `eval`; defaults to the one in `out`.
    pub checkpoint: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(command: Command, out: impl Into<PathBuf>) -> Self {
        Self {
            command,
            config: None,
            out: out.into(),
            seeds: Vec::new(),
            variant: None,
            p_max_list: None,
            gamma_list: None,
            count: None,
            checkpoint: None,
        }
    }

    fn single_seed(&self) -> Result<Option<u64>> {
        match self.seeds.as_slice() {
            [] => Ok(None),
            [s] => Ok(Some(*s)),
            _ => Err(ExperimentError::Config("this command takes a single seed".into())),
        }
    }
}

/// Applies a seed override to both configurations.
pub fn seeded(sys: &SystemConfig, tc: &TrainConfig, seed: u64) -> (SystemConfig, TrainConfig) {
    (SystemConfig { seed, ..sys.clone() }, tc.clone().with_seed(seed))
}

/// Test-set aggregates of one trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: Variant,
    pub test_size: usize,
    pub mean_sum_rate: f64,
    pub mean_ps: f64,
    pub mean_gamma_s: f64,
    pub sinr_satisfaction: f64,
    pub spacing_satisfaction: f64,
}

impl EvalRow {
    pub fn new(variant: Variant, e: &EvalSummary) -> Self {
        Self {
            variant,
            test_size: e.records.len(),
            mean_sum_rate: e.mean_sum_rate,
            mean_ps: e.mean_p_s,
            mean_gamma_s: e.mean_gamma_s,
            sinr_satisfaction: e.sinr_satisfaction,
            spacing_satisfaction: e.spacing_satisfaction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_sum_rate: f64,
    pub spacing_penalty: f64,
    pub sinr_penalty: f64,
}

impl From<&EpochRecord> for HistoryRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            mean_loss: r.mean_loss,
            mean_sum_rate: r.mean_sum_rate,
            spacing_penalty: r.spacing_penalty,
            sinr_penalty: r.sinr_penalty,
        }
    }
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub p_max_w: f64,
    pub gamma0: f64,
    pub eval: EvalRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub p_max_w: f64,
    pub variant: Variant,
    pub mean_sum_rate: f64,
    pub sinr_satisfaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma0: f64,
    pub variant: Variant,
    pub mean_sum_rate: f64,
    pub mean_ps: f64,
    pub sinr_satisfaction: f64,
}

/// Contents of `results.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Results {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<HistoryRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_power: Option<Vec<PowerRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_gamma: Option<Vec<GammaRow>>,
    /// Per-seed points behind the sweep rows.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunRow>,
}

impl Results {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| ExperimentError::Config(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }
}

/// `%.12g`-style formatting.
pub fn format_number(x: f64) -> String {
    const DIGITS: i32 = 12;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..DIGITS).contains(&exp) {
        let fixed = format!("{:.*}", (DIGITS - 1 - exp) as usize, x);
        trim_fraction(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        out += &csv_line(&[
            r.epoch.to_string(),
            format_number(r.mean_loss),
            format_number(r.mean_sum_rate),
            format_number(r.spacing_penalty),
            format_number(r.sinr_penalty),
        ]);
    }
    out
}

pub fn sweep_power_csv(rows: &[PowerRow]) -> String {
    let mut out = format!("{SWEEP_POWER_HEADER}\n");
    for r in rows {
        out += &csv_line(&[
            format_number(r.p_max_w),
            r.variant.to_string(),
            format_number(r.mean_sum_rate),
            format_number(r.sinr_satisfaction),
        ]);
    }
    out
}

pub fn sweep_gamma_csv(rows: &[GammaRow]) -> String {
    let mut out = format!("{SWEEP_GAMMA_HEADER}\n");
    for r in rows {
        out += &csv_line(&[
            format_number(r.gamma0),
            format_number(r.mean_sum_rate),
            format_number(r.mean_ps),
            format_number(r.sinr_satisfaction),
        ]);
    }
    out
}

fn scenario_header(sys: &SystemConfig) -> String {
    let mut cols = vec!["index".to_string(), "seed".to_string()];
    let mut point = |name: String| cols.extend(["x", "y", "z"].map(|a| format!("{name}_{a}")));
    for k in 0..sys.users {
        point(format!("user{k}"));
    }
    for l in 0..sys.scatterers {
        point(format!("scatterer{l}"));
    }
    point("target".into());
    cols.join(",")
}

/// Scenario file: one row per scenario of the training stream of `seed`.
pub fn scenarios_csv(sys: &SystemConfig, seed: u64, n: usize) -> String {
    let mut out = scenario_header(sys);
    out.push('\n');
    for (i, s) in make_dataset(sys, seed, n, Split::Train).iter().enumerate() {
        let mut fields = vec![i.to_string(), derive_seed(seed, Split::Train, i as u64).to_string()];
        fields.extend(scenario_points(s).flat_map(|p| p.map(format_number)));
        out += &csv_line(&fields);
    }
    out
}

fn scenario_points(s: &Scenario) -> impl Iterator<Item = &Point3> {
    s.user_origins.iter().chain(&s.scatterers).chain(std::iter::once(&s.target))
}

/// Writes the CSV file of every section present in `results`.
pub fn write_report(results: &Results, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
        files.push(path);
        Ok(())
    };
    if let Some(h) = &results.history {
        emit(HISTORY_FILE, history_csv(h))?;
    }
    if let Some(p) = &results.sweep_power {
        emit(SWEEP_POWER_FILE, sweep_power_csv(p))?;
    }
    if let Some(g) = &results.sweep_gamma {
        emit(SWEEP_GAMMA_FILE, sweep_gamma_csv(g))?;
    }
    Ok(files)
}

/// A trained network with its history and test-set scores.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub eval: EvalSummary,
}

/// Trains `variant` and evaluates it on the test stream of the data seed.
pub fn train_and_evaluate(
    sys: &SystemConfig,
    tc: &TrainConfig,
    variant: Variant,
    on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainedRun, TrainError> {
    let (checkpoint, history) = train_observed(sys, tc, variant, on_epoch)?;
    let test = make_dataset(sys, tc.data_seed, tc.test_size, Split::Test);
    let eval = evaluate(&checkpoint, &test)?;
    Ok(TrainedRun { checkpoint, history, eval })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Seed averages per (P_max, variant), in first-appearance order.
pub fn power_rows(runs: &[(Variant, RunRow)]) -> Vec<PowerRow> {
    let mut keys: Vec<(u64, Variant)> = Vec::new();
    for (v, r) in runs {
        if !keys.contains(&(r.p_max_w.to_bits(), *v)) {
            keys.push((r.p_max_w.to_bits(), *v));
        }
    }
    keys.into_iter()
        .map(|(p, v)| {
            let sel: Vec<&RunRow> = runs.iter().filter(|(w, r)| *w == v && r.p_max_w.to_bits() == p).map(|(_, r)| r).collect();
            PowerRow {
                p_max_w: f64::from_bits(p),
                variant: v,
                mean_sum_rate: mean(sel.iter().map(|r| r.eval.mean_sum_rate)),
                sinr_satisfaction: mean(sel.iter().map(|r| r.eval.sinr_satisfaction)),
            }
        })
        .collect()
}

/// Seed averages per γ₀, in first-appearance order.
pub fn gamma_rows(runs: &[(Variant, RunRow)]) -> Vec<GammaRow> {
    let mut keys: Vec<(u64, Variant)> = Vec::new();
    for (v, r) in runs {
        if !keys.contains(&(r.gamma0.to_bits(), *v)) {
            keys.push((r.gamma0.to_bits(), *v));
        }
    }
    keys.into_iter()
        .map(|(g, v)| {
            let sel: Vec<&RunRow> = runs.iter().filter(|(w, r)| *w == v && r.gamma0.to_bits() == g).map(|(_, r)| r).collect();
            GammaRow {
                gamma0: f64::from_bits(g),
                variant: v,
                mean_sum_rate: mean(sel.iter().map(|r| r.eval.mean_sum_rate)),
                mean_ps: mean(sel.iter().map(|r| r.eval.mean_ps)),
                sinr_satisfaction: mean(sel.iter().map(|r| r.eval.sinr_satisfaction)),
            }
        })
        .collect()
}

struct Context<'a> {
    spec: &'a RunSpec,
    sys: SystemConfig,
    tc: TrainConfig,
    log: &'a mut dyn FnMut(&str),
}

impl Context<'_> {
    fn seeds(&self) -> Vec<Option<u64>> {
        if self.spec.seeds.is_empty() {
            vec![None]
        } else {
            self.spec.seeds.iter().map(|s| Some(*s)).collect()
        }
    }

    fn configs(&self, seed: Option<u64>) -> (SystemConfig, TrainConfig) {
        match seed {
            Some(s) => seeded(&self.sys, &self.tc, s),
            None => (self.sys.clone(), self.tc.clone()),
        }
    }

    fn point(&mut self, sys: &SystemConfig, tc: &TrainConfig, variant: Variant) -> Result<(Variant, RunRow)> {
        let label = format!("{variant} seed={} p_max={} gamma0={}", tc.data_seed, sys.p_max, sys.gamma0);
        let log = &mut *self.log;
        let every = (tc.epochs / 10).max(1);
        let run = train_and_evaluate(sys, tc, variant, |r| {
            if r.epoch % every == 0 {
                log(&format!("{label} epoch {} loss {} sum_rate {}", r.epoch, format_number(r.mean_loss), format_number(r.mean_sum_rate)));
            }
        })?;
        let eval = EvalRow::new(variant, &run.eval);
        (self.log)(&format!("{label} test sum_rate {} sinr_ok {}", format_number(eval.mean_sum_rate), format_number(eval.sinr_satisfaction)));
        Ok((variant, RunRow { seed: tc.data_seed, p_max_w: sys.p_max, gamma0: sys.gamma0, eval }))
    }
}

fn validate(sys: &SystemConfig, tc: &TrainConfig) -> Result<()> {
    sys.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
    tc.validate().map_err(|e| ExperimentError::Config(e.to_string()))
}

/// Executes `spec` and returns the files it wrote.
pub fn run(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    run_logged(spec, &mut |_| {})
}

/// [`run`] with progress lines sent to `log`.
pub fn run_logged(spec: &RunSpec, log: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    let file = match &spec.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let (sys, mut tc) = file.resolve();
    if let Some(p) = &spec.p_max_list {
        tc.p_max_list = p.clone();
    }
    if let Some(g) = &spec.gamma_list {
        tc.gamma_list = g.clone();
    }
    validate(&sys, &tc)?;
    fs::create_dir_all(&spec.out).map_err(io_err(&spec.out))?;
    let results_path = spec.out.join(RESULTS_FILE);
    let mut ctx = Context { spec, sys, tc, log };

    match spec.command {
        Command::GenData => {
            let seed = spec.single_seed()?.unwrap_or(ctx.sys.seed);
            let n = spec.count.unwrap_or(ctx.tc.train_size);
            if n == 0 {
                return Err(ExperimentError::Config("count must be positive".into()));
            }
            let path = spec.out.join(SCENARIOS_FILE);
            fs::write(&path, scenarios_csv(&ctx.sys, seed, n)).map_err(io_err(&path))?;
            Ok(vec![path])
        }
        Command::Train => {
            let (sys, tc) = ctx.configs(spec.single_seed()?);
            let variant = spec.variant.unwrap_or(Variant::Proposed);
            let log = &mut *ctx.log;
            let every = (tc.epochs / 10).max(1);
            let run = train_and_evaluate(&sys, &tc, variant, |r| {
                if r.epoch % every == 0 {
                    log(&format!("epoch {} loss {} sum_rate {}", r.epoch, format_number(r.mean_loss), format_number(r.mean_sum_rate)));
                }
            })?;
            let ckpt_path = spec.out.join(CHECKPOINT_FILE);
            run.checkpoint.save(&ckpt_path).map_err(|e| match e {
                TrainError::Io(source) => ExperimentError::Io { path: ckpt_path.clone(), source },
                other => other.into(),
            })?;
            let mut results = Results::load_or_default(&results_path)?;
            results.history = Some(run.history.iter().map(HistoryRow::from).collect());
            results.evaluation = Some(EvalRow::new(variant, &run.eval));
            results.save(&results_path)?;
            let mut files = vec![ckpt_path, results_path];
            files.extend(write_report(&results, &spec.out)?);
            Ok(files)
        }
        Command::Eval => {
            let ckpt_path = spec.checkpoint.clone().unwrap_or_else(|| spec.out.join(CHECKPOINT_FILE));
            let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| match e {
                TrainError::Io(source) => ExperimentError::Io { path: ckpt_path.clone(), source },
                TrainError::Checkpoint(m) => ExperimentError::Config(format!("{}: {m}", ckpt_path.display())),
                other => other.into(),
            })?;
            let seed = spec.single_seed()?.unwrap_or(ckpt.train.data_seed);
            let n = spec.count.unwrap_or(ckpt.train.test_size);
            if n == 0 {
                return Err(ExperimentError::Config("count must be positive".into()));
            }
            let test = make_dataset(&ckpt.system, seed, n, Split::Test);
            let row = EvalRow::new(ckpt.variant, &evaluate(&ckpt, &test)?);
            (ctx.log)(&format!(
                "{} test sum_rate {} mean_ps {} sinr_ok {}",
                row.variant,
                format_number(row.mean_sum_rate),
                format_number(row.mean_ps),
                format_number(row.sinr_satisfaction)
            ));
            let mut results = Results::load_or_default(&results_path)?;
            results.evaluation = Some(row);
            results.save(&results_path)?;
            Ok(vec![results_path])
        }
        Command::SweepPower => {
            let variants = match spec.variant {
                Some(v) => vec![v],
                None => vec![Variant::Proposed, Variant::FixAnt],
            };
            let mut runs = Vec::new();
            for p in ctx.tc.p_max_list.clone() {
                for &v in &variants {
                    for seed in ctx.seeds() {
                        let (mut sys, tc) = ctx.configs(seed);
                        sys.p_max = p;
                        runs.push(ctx.point(&sys, &tc, v)?);
                    }
                }
            }
            let mut results = Results::load_or_default(&results_path)?;
            results.sweep_power = Some(power_rows(&runs));
            merge_runs(&mut results, runs);
            results.save(&results_path)?;
            let mut files = vec![results_path];
            files.extend(write_report(&results, &spec.out)?);
            Ok(files)
        }
        Command::SweepGamma => {
            let variant = spec.variant.unwrap_or(Variant::Proposed);
            let mut runs = Vec::new();
            for g in ctx.tc.gamma_list.clone() {
                for seed in ctx.seeds() {
                    let (mut sys, tc) = ctx.configs(seed);
                    sys.gamma0 = g;
                    runs.push(ctx.point(&sys, &tc, variant)?);
                }
            }
            let mut results = Results::load_or_default(&results_path)?;
            results.sweep_gamma = Some(gamma_rows(&runs));
            merge_runs(&mut results, runs);
            results.save(&results_path)?;
            let mut files = vec![results_path];
            files.extend(write_report(&results, &spec.out)?);
            Ok(files)
        }
        Command::Report => {
            let results = Results::load(&results_path)?;
            write_report(&results, &spec.out)
        }
    }
}

/// Adds `runs` to `results.runs`, replacing points with the same key.
fn merge_runs(results: &mut Results, runs: Vec<(Variant, RunRow)>) {
    for (_, r) in runs {
        let same = |o: &RunRow| {
            o.eval.variant == r.eval.variant
                && o.seed == r.seed
                && o.p_max_w.to_bits() == r.p_max_w.to_bits()
                && o.gamma0.to_bits() == r.gamma0.to_bits()
        };
        match results.runs.iter_mut().find(|o| same(o)) {
            Some(o) => *o = r,
            None => results.runs.push(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format_matches_printf_g12() {
        let cases = [
            (1.0, "1"),
            (0.5, "0.5"),
            (-2.25, "-2.25"),
            (1.0 / 3.0, "0.333333333333"),
            (2.0 / 3.0 * 1e5, "66666.6666667"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (1e-4, "0.0001"),
            (1.5e-5, "1.5e-05"),
            (-3.0e-120, "-3e-120"),
            (0.0, "0"),
            (9.9999999999999e11, "1e+12"),
            (f64::NAN, "nan"),
            (f64::NEG_INFINITY, "-inf"),
        ];
        for (x, s) in cases {
            assert_eq!(format_number(x), s, "{x:e}");
        }
    }

    #[test]
    fn config_overlays_preset_and_rejects_unknown_keys() {
        let f = ConfigFile::parse("preset = \"tiny\"\nepochs = 7\np_max = 0.1\ngamma_list = [0.01]\n").unwrap();
        let (sys, tc) = f.resolve();
        assert_eq!((sys.n_tx, sys.users, sys.p_max), (3, 1, 0.1));
        assert_eq!((tc.epochs, tc.gamma_list.clone()), (7, vec![0.01]));
        assert_eq!(ConfigFile::default().resolve(), (SystemConfig::desk(), TrainConfig::desk()));
        assert!(ConfigFile::parse("epoch = 3").is_err());
        assert!(ConfigFile::parse("n_tx = \"four\"").is_err());
        let boxes = ConfigFile::parse("target_box = { min = [1.0, 2.0, 3.0], max = [4.0, 5.0, 6.0] }").unwrap();
        assert_eq!(boxes.resolve().0.target_box, Aabb::new([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]));
    }

    #[test]
    fn csv_headers_match_schemas() {
        assert_eq!(history_csv(&[]), "epoch,mean_loss,mean_sum_rate,spacing_penalty,sinr_penalty\n");
        assert_eq!(sweep_power_csv(&[]), "p_max_w,variant,mean_sum_rate,sinr_satisfaction\n");
        assert_eq!(sweep_gamma_csv(&[]), "gamma0,mean_sum_rate,mean_ps,sinr_satisfaction\n");
        let h = history_csv(&[HistoryRow { epoch: 1, mean_loss: -0.5, mean_sum_rate: 1.0 / 3.0, spacing_penalty: 0.0, sinr_penalty: 2.0 }]);
        assert_eq!(h.lines().nth(1), Some("1,-0.5,0.333333333333,0,2"));
    }

    fn row(v: Variant, seed: u64, p: f64, g: f64, rate: f64, ps: f64) -> (Variant, RunRow) {
        let eval = EvalRow {
            variant: v,
            test_size: 10,
            mean_sum_rate: rate,
            mean_ps: ps,
            mean_gamma_s: 0.0,
            sinr_satisfaction: 1.0,
            spacing_satisfaction: 1.0,
        };
        (v, RunRow { seed, p_max_w: p, gamma0: g, eval })
    }

    #[test]
    fn sweep_rows_average_over_seeds() {
        let runs = vec![
            row(Variant::Proposed, 0, 0.1, 0.01, 1.0, 0.0),
            row(Variant::Proposed, 1, 0.1, 0.01, 3.0, 0.0),
            row(Variant::FixAnt, 0, 0.1, 0.01, 1.0, 0.0),
            row(Variant::Proposed, 0, 1.0, 0.01, 5.0, 0.0),
        ];
        let p = power_rows(&runs);
        assert_eq!(p.len(), 3);
        assert_eq!((p[0].p_max_w, p[0].variant, p[0].mean_sum_rate), (0.1, Variant::Proposed, 2.0));
        assert_eq!((p[1].variant, p[2].p_max_w), (Variant::FixAnt, 1.0));
        let g = gamma_rows(&[row(Variant::Proposed, 0, 1.0, 0.1, 1.0, 2.0), row(Variant::Proposed, 1, 1.0, 0.1, 2.0, 4.0)]);
        assert_eq!((g.len(), g[0].mean_ps, g[0].mean_sum_rate), (1, 3.0, 1.5));
    }

    #[test]
    fn scenario_file_is_deterministic() {
        let sys = SystemConfig::desk();
        let a = scenarios_csv(&sys, 1, 10);
        assert_eq!(a, scenarios_csv(&sys, 1, 10));
        assert_eq!(a.lines().count(), 11);
        assert_eq!(a.lines().next().unwrap().split(',').count(), 2 + 3 * (2 + 2 + 1));
        assert_ne!(a, scenarios_csv(&sys, 2, 10));
    }

    #[test]
    fn results_round_trip_and_report_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let runs = vec![row(Variant::Proposed, 0, 0.1, 0.01, 1.25, 0.5), row(Variant::FixAnt, 0, 0.1, 0.01, 1.0, 0.25)];
        let results = Results {
            history: Some(vec![HistoryRow { epoch: 1, mean_loss: 0.1, mean_sum_rate: 0.2, spacing_penalty: 0.0, sinr_penalty: 0.3 }]),
            sweep_power: Some(power_rows(&runs)),
            sweep_gamma: Some(gamma_rows(&runs)),
            runs: runs.into_iter().map(|(_, r)| r).collect(),
            ..Results::default()
        };
        let path = dir.path().join(RESULTS_FILE);
        results.save(&path).unwrap();
        assert_eq!(Results::load(&path).unwrap(), results);
        let first = write_report(&results, dir.path()).unwrap();
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| fs::read(p).unwrap()).collect();
        let spec = RunSpec::new(Command::Report, dir.path());
        let second = run(&spec).unwrap();
        assert_eq!(first, second);
        assert_eq!(bytes, second.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(ExperimentError::Config("x".into()).exit_code(), 1);
        assert_eq!(ExperimentError::Train(TrainError::NonFinite { epoch: 0, batch: 0, value: f64::NAN }).exit_code(), 2);
        let dir = tempfile::tempdir().unwrap();
        let err = run(&RunSpec::new(Command::Report, dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let mut spec = RunSpec::new(Command::GenData, dir.path());
        spec.seeds = vec![1, 2];
        assert!(matches!(run(&spec), Err(ExperimentError::Config(_))));
    }
}
