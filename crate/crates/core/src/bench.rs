//! Experiment driver: SER sweeps, learning snapshots and fading estimation,
//! each a pure function of an [`ExperimentConfig`] plus CSV writers.
//!
//! Random streams per trial `t` at SNR `s` (see [`crate::rng`]):
//! frame symbols `Frame/t`, noise `Noise/cell(s, t)`, SMN weights `Init/t`,
//! classifier weights `Baseline/t`. Every receiver in a cell therefore sees
//! the same frame and noise, and all SNR points share the frame.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, DnnConfig};
use crate::em::{self, EmConfig, EmSchedule, Progress};
use crate::error::{Error, Result};
use crate::link::{self, Constellation, Frame, ReceivedSequence, SnrConvention};
use crate::net::{self, AdamConfig, Architecture, SmnModel};
use crate::physics::{self, ChannelParams, DensityTrajectory, FrequencyConvention, LossForm, Profile};
use crate::rng::{substream, Role};

/// Version written in the first column of every CSV produced here.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SHEATH_SMN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Receiver {
    Smn,
    Dnn,
    PilotInterp,
    Genie,
}

impl Receiver {
    pub fn as_str(self) -> &'static str {
        match self {
            Receiver::Smn => "smn",
            Receiver::Dnn => "dnn",
            Receiver::PilotInterp => "pilot_interp",
            Receiver::Genie => "genie",
        }
    }
}

/// Flat experiment description. Unknown keys are rejected so a typo cannot
/// silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub frame_length: usize,
    pub bits_per_symbol: u32,

    /// Carrier and collision frequencies, read per `frequency_convention`.
    pub carrier_freq: f64,
    pub collision_freq: f64,
    pub frequency_convention: FrequencyConvention,
    pub loss_form: LossForm,
    /// Densities with a unit suffix, e.g. `"1e16 cm-3"`.
    pub density_min: String,
    pub density_max: String,
    /// `|gain|` at the densest point; sets the slab thickness.
    pub min_gain: f64,
    /// Explicit slab thickness in metres; overrides `min_gain` when set.
    pub sheath_thickness: Option<f64>,

    pub profile: Profile,
    pub oscillation_freq: f64,
    pub phase_offset: f64,
    pub symbol_rate: f64,
    pub level: f64,

    pub snr_convention: SnrConvention,
    pub snr_db: Vec<f64>,
    pub pilot_intervals: Vec<usize>,
    pub trials: usize,
    pub receivers: Vec<Receiver>,
    /// Rayon worker count; 0 uses all cores. Results do not depend on it.
    pub workers: usize,

    pub pretrain_steps: usize,
    pub em_iterations: usize,
    pub mstep_steps: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,

    pub dnn_hidden: Vec<usize>,
    pub dnn_steps: usize,
    pub dnn_learning_rate: f64,
    pub dnn_init_std: f64,

    pub snapshot_interval: usize,
    pub snapshot_snr_db: f64,
    pub snapshot_pretrain_steps: Vec<usize>,
    pub snapshot_em_iterations: Vec<usize>,

    pub fading_interval: usize,
    pub fading_snr_db: Vec<f64>,

    /// Points per curve in curve dumps.
    pub curve_points: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = EmSchedule::default();
        let dnn = DnnConfig::default();
        ExperimentConfig {
            seed: 1,
            frame_length: 4096,
            bits_per_symbol: 2,
            carrier_freq: 9.0e9,
            collision_freq: 20.0e9,
            frequency_convention: FrequencyConvention::Ordinary,
            loss_form: LossForm::AsPrinted,
            density_min: "1e16 cm-3".into(),
            density_max: "6e17 cm-3".into(),
            min_gain: physics::DEFAULT_MIN_GAIN,
            sheath_thickness: None,
            profile: Profile::Sinusoid,
            oscillation_freq: 20.0e3,
            phase_offset: 0.0,
            symbol_rate: 1.0e6,
            level: 0.5,
            snr_convention: SnrConvention::EsN0,
            snr_db: (0..=10).map(|i| 2.0 * i as f64).collect(),
            pilot_intervals: vec![16, 256],
            trials: 10,
            receivers: vec![Receiver::Smn, Receiver::Dnn, Receiver::PilotInterp, Receiver::Genie],
            workers: 0,
            pretrain_steps: schedule.pretrain_steps,
            em_iterations: schedule.em_iterations,
            mstep_steps: schedule.mstep_steps,
            learning_rate: AdamConfig::default().learning_rate,
            init_std: net::DEFAULT_INIT_STD,
            encoder_hidden: Architecture::default().encoder_hidden,
            decoder_hidden: Architecture::default().decoder_hidden,
            dnn_hidden: dnn.hidden,
            dnn_steps: dnn.steps,
            dnn_learning_rate: dnn.learning_rate,
            dnn_init_std: dnn.init_std,
            snapshot_interval: 256,
            snapshot_snr_db: 20.0,
            snapshot_pretrain_steps: vec![200, schedule.pretrain_steps],
            snapshot_em_iterations: vec![1, 5],
            fading_interval: 256,
            fading_snr_db: vec![20.0, 11.0, 5.0],
            curve_points: 200,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        physics::density_trajectory(&self.trajectory(), &self.channel()?)?;
        link::build_constellation(self.bits_per_symbol)?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.trials > 4096 {
            return Err(Error::Config("at most 4096 trials per cell".into()));
        }
        for &i in self.pilot_intervals.iter().chain([&self.snapshot_interval, &self.fading_interval]) {
            if i == 0 || i > self.frame_length {
                return Err(Error::Config(format!(
                    "pilot interval {i} must lie in 1..={}",
                    self.frame_length
                )));
            }
        }
        for &s in self.snr_db.iter().chain(&self.fading_snr_db).chain([&self.snapshot_snr_db]) {
            if !s.is_finite() || s.abs() > 200.0 {
                return Err(Error::Config(format!("SNR {s} dB is out of range")));
            }
        }
        if let Some(&s) = self.snapshot_pretrain_steps.iter().find(|&&s| s == 0 || s > self.pretrain_steps) {
            return Err(Error::Config(format!(
                "snapshot pretrain step {s} must lie in 1..={}",
                self.pretrain_steps
            )));
        }
        if let Some(&s) = self.snapshot_em_iterations.iter().find(|&&s| s == 0 || s > self.em_iterations) {
            return Err(Error::Config(format!(
                "snapshot EM iteration {s} must lie in 1..={}",
                self.em_iterations
            )));
        }
        if self.curve_points < 2 {
            return Err(Error::Config("curve_points must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.dnn_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn channel(&self) -> Result<ChannelParams> {
        let mut params = ChannelParams {
            carrier_angular_freq: self.frequency_convention.to_angular(self.carrier_freq),
            collision_angular_freq: self.frequency_convention.to_angular(self.collision_freq),
            sheath_thickness: 1.0,
            density_min: physics::parse_density(&self.density_min)?,
            density_max: physics::parse_density(&self.density_max)?,
            loss_form: self.loss_form,
        };
        params.validate()?;
        params.sheath_thickness = match self.sheath_thickness {
            Some(z) => z,
            None => physics::calibrate_thickness(&params, self.min_gain)?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn trajectory(&self) -> DensityTrajectory {
        DensityTrajectory {
            profile: self.profile,
            oscillation_freq: self.oscillation_freq,
            phase_offset: self.phase_offset,
            length: self.frame_length,
            symbol_rate: self.symbol_rate,
            level: self.level,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            schedule: EmSchedule {
                pretrain_steps: self.pretrain_steps,
                em_iterations: self.em_iterations,
                mstep_steps: self.mstep_steps,
            },
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            ..EmConfig::default()
        }
    }

    pub fn dnn_config(&self) -> DnnConfig {
        DnnConfig {
            hidden: self.dnn_hidden.clone(),
            steps: self.dnn_steps,
            learning_rate: self.dnn_learning_rate,
            init_std: self.dnn_init_std,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
        }
    }

    /// Explicit `out_dir`, else the environment variable, else `./out`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    fn es_n0_db(&self, snr_db: f64) -> f64 {
        self.snr_convention.to_es_n0_db(snr_db, self.bits_per_symbol)
    }
}

/// Noise stream index for trial `trial` at `snr_db`, keyed by the SNR value in
/// centi-dB so that editing the SNR list does not reshuffle other points.
fn noise_index(snr_db: f64, trial: usize) -> u32 {
    let key = ((snr_db * 100.0).round() as i64).rem_euclid(1 << 20) as u32;
    (key << 12) | trial as u32
}

/// One simulated frame.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub constellation: Constellation,
    pub frame: Frame,
    pub received: ReceivedSequence,
}

/// Builds the frame and channel output for `(interval, snr, trial)`.
pub fn simulate(config: &ExperimentConfig, interval: usize, snr_db: f64, trial: usize) -> Result<Scenario> {
    let constellation = link::build_constellation(config.bits_per_symbol)?;
    let channel = config.channel()?;
    let gains = physics::gain_trajectory(&config.trajectory(), &channel)?;
    let frame = link::build_frame(
        config.frame_length,
        interval,
        constellation.order(),
        &mut substream(config.seed, Role::Frame, trial as u32),
    )?;
    let variance = link::snr_to_noise_variance(config.es_n0_db(snr_db), constellation.average_energy());
    let received = link::transmit(
        &frame,
        &constellation,
        &gains,
        variance,
        &mut substream(config.seed, Role::Noise, noise_index(snr_db, trial)),
    )?;
    Ok(Scenario {
        constellation,
        frame,
        received,
    })
}

/// SMN fit plus the soundness figures gathered along the way.
#[derive(Debug, Clone)]
pub struct SmnRun {
    pub outcome: em::FitOutcome,
    pub decisions: Vec<usize>,
    /// Smallest change of the lower bound across any E-step.
    pub min_estep_gain: Option<f64>,
    /// Largest `|row sum - 1|` over every posterior produced.
    pub max_row_sum_error: f64,
}

pub fn run_smn(config: &ExperimentConfig, scenario: &Scenario, trial: usize) -> Result<SmnRun> {
    let model = net::init_model(
        &scenario.constellation,
        config.architecture(),
        config.init_std,
        &mut substream(config.seed, Role::Init, trial as u32),
    )?;
    let mut max_row_sum_error: f64 = 0.0;
    let outcome = em::fit_observed(
        model,
        &scenario.received,
        &scenario.frame,
        &config.em_config(),
        &mut |p| {
            if let Progress::EStep { posterior, .. } | Progress::MStep { posterior, .. } = p {
                max_row_sum_error = max_row_sum_error.max(posterior.max_row_sum_error());
            }
        },
    )?;
    max_row_sum_error = max_row_sum_error.max(outcome.posterior.max_row_sum_error());
    let decisions = em::demodulate(&outcome.posterior);
    Ok(SmnRun {
        min_estep_gain: outcome.trace.min_estep_gain(),
        max_row_sum_error,
        decisions,
        outcome,
    })
}

/// Decisions of one receiver on one scenario.
pub fn decide(
    receiver: Receiver,
    config: &ExperimentConfig,
    scenario: &Scenario,
    trial: usize,
) -> Result<Vec<usize>> {
    match receiver {
        Receiver::Smn => Ok(run_smn(config, scenario, trial)?.decisions),
        Receiver::Dnn => Ok(baselines::supervised_dnn(
            &scenario.received,
            &scenario.frame,
            &scenario.constellation,
            &config.dnn_config(),
            &mut substream(config.seed, Role::Baseline, trial as u32),
        )?
        .decisions),
        Receiver::PilotInterp => {
            Ok(baselines::pilot_interp_ml(&scenario.received, &scenario.frame, &scenario.constellation)?.decisions)
        }
        Receiver::Genie => Ok(baselines::genie_ml(&scenario.received, &scenario.constellation)?.decisions),
    }
}

/// Error count over payload positions only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorCount {
    pub errors: usize,
    pub symbols: usize,
}

impl ErrorCount {
    pub fn ser(&self) -> f64 {
        if self.symbols == 0 {
            0.0
        } else {
            self.errors as f64 / self.symbols as f64
        }
    }
}

pub fn compute_ser(decisions: &[usize], truth: &[usize], payload_positions: &[usize]) -> Result<ErrorCount> {
    if decisions.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} decisions for {} symbols",
            decisions.len(),
            truth.len()
        )));
    }
    if let Some(&p) = payload_positions.iter().find(|&&p| p >= truth.len()) {
        return Err(Error::Contract(format!("payload position {p} outside the frame")));
    }
    let errors = payload_positions.iter().filter(|&&p| decisions[p] != truth[p]).count();
    Ok(ErrorCount {
        errors,
        symbols: payload_positions.len(),
    })
}

/// One row of the SER table.
#[derive(Debug, Clone, PartialEq)]
pub struct SerRecord {
    pub receiver: Receiver,
    pub snr_db: f64,
    pub pilot_interval: usize,
    /// Frames that completed.
    pub trials: usize,
    /// Payload symbols over completed frames.
    pub symbols: usize,
    pub errors: usize,
    /// `errors / symbols`.
    pub ser: f64,
    pub bandwidth_utilization: f64,
    pub failed_trials: usize,
    /// First failure message, empty when none.
    pub error: String,
}

/// Per-trial SMN soundness figures from a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SmnDiagnostics {
    pub snr_db: f64,
    pub pilot_interval: usize,
    pub trial: usize,
    pub min_estep_gain: Option<f64>,
    pub max_row_sum_error: f64,
    pub max_mstep_increase: Option<f64>,
    pub mean_max_posterior: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub records: Vec<SerRecord>,
    pub diagnostics: Vec<SmnDiagnostics>,
}

type TrialResult = (Vec<(Receiver, Result<ErrorCount>)>, Option<SmnDiagnostics>);

fn run_trial(config: &ExperimentConfig, interval: usize, snr_db: f64, trial: usize) -> TrialResult {
    let scenario = match simulate(config, interval, snr_db, trial) {
        Ok(s) => s,
        Err(e) => {
            let msg = e.to_string();
            let rows = config
                .receivers
                .iter()
                .map(|&r| (r, Err(Error::Config(msg.clone()))))
                .collect();
            return (rows, None);
        }
    };
    let truth = scenario.frame.symbols();
    let payload = scenario.frame.payload_positions();
    let mut diagnostics = None;
    let rows = config
        .receivers
        .iter()
        .map(|&r| {
            let result = if r == Receiver::Smn {
                run_smn(config, &scenario, trial).and_then(|run| {
                    diagnostics = Some(SmnDiagnostics {
                        snr_db,
                        pilot_interval: interval,
                        trial,
                        min_estep_gain: run.min_estep_gain,
                        max_row_sum_error: run.max_row_sum_error,
                        max_mstep_increase: run.outcome.trace.max_mstep_increase(),
                        mean_max_posterior: run.outcome.posterior.mean_max_posterior(payload),
                    });
                    compute_ser(&run.decisions, truth, payload)
                })
            } else {
                decide(r, config, &scenario, trial).and_then(|d| compute_ser(&d, truth, payload))
            };
            (r, result)
        })
        .collect();
    (rows, diagnostics)
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(job))
}

/// Runs every `(interval, snr, trial)` cell and aggregates per
/// `(receiver, snr, interval)`. A failing trial is counted and reported in
/// its record; the sweep carries on.
pub fn run_ser_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for &interval in &config.pilot_intervals {
        for &snr in &config.snr_db {
            for trial in 0..config.trials {
                cells.push((interval, snr, trial));
            }
        }
    }
    let results: Vec<TrialResult> = with_pool(config.workers, || {
        cells
            .par_iter()
            .map(|&(interval, snr, trial)| run_trial(config, interval, snr, trial))
            .collect()
    })?;

    let mut report = SweepReport::default();
    for &interval in &config.pilot_intervals {
        for &snr in &config.snr_db {
            for &receiver in &config.receivers {
                report.records.push(SerRecord {
                    receiver,
                    snr_db: snr,
                    pilot_interval: interval,
                    trials: 0,
                    symbols: 0,
                    errors: 0,
                    ser: 0.0,
                    bandwidth_utilization: link::bandwidth_utilization(interval),
                    failed_trials: 0,
                    error: String::new(),
                });
            }
        }
    }
    let per_interval = config.snr_db.len() * config.receivers.len();
    for (c, ((rows, diag), &(_, _, _))) in results.into_iter().zip(&cells).enumerate() {
        let group = c / config.trials;
        let (i_idx, s_idx) = (group / config.snr_db.len(), group % config.snr_db.len());
        let base = i_idx * per_interval + s_idx * config.receivers.len();
        for (r_idx, (_, result)) in rows.into_iter().enumerate() {
            let rec = &mut report.records[base + r_idx];
            match result {
                Ok(count) => {
                    rec.trials += 1;
                    rec.symbols += count.symbols;
                    rec.errors += count.errors;
                }
                Err(e) => {
                    rec.failed_trials += 1;
                    if rec.error.is_empty() {
                        rec.error = e.to_string();
                    }
                }
            }
        }
        report.diagnostics.extend(diag);
    }
    for rec in &mut report.records {
        rec.ser = if rec.symbols == 0 {
            f64::NAN
        } else {
            rec.errors as f64 / rec.symbols as f64
        };
    }
    Ok(report)
}

/// `version,receiver,snr_db,pilot_interval,trials,symbols,errors,ser,bandwidth_utilization,failed_trials,error`
pub fn write_ser_csv<W: Write>(writer: W, records: &[SerRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "version",
        "receiver",
        "snr_db",
        "pilot_interval",
        "trials",
        "symbols",
        "errors",
        "ser",
        "bandwidth_utilization",
        "failed_trials",
        "error",
    ])?;
    for r in records {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            r.receiver.as_str().to_string(),
            r.snr_db.to_string(),
            r.pilot_interval.to_string(),
            r.trials.to_string(),
            r.symbols.to_string(),
            r.errors.to_string(),
            r.ser.to_string(),
            r.bandwidth_utilization.to_string(),
            r.failed_trials.to_string(),
            r.error.clone(),
        ])?;
    }
    flush(w, "<ser csv>")
}

/// `version,snr_db,pilot_interval,trial,min_estep_gain,max_row_sum_error,max_mstep_increase,mean_max_posterior`
pub fn write_diagnostics_csv<W: Write>(writer: W, diagnostics: &[SmnDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "version",
        "snr_db",
        "pilot_interval",
        "trial",
        "min_estep_gain",
        "max_row_sum_error",
        "max_mstep_increase",
        "mean_max_posterior",
    ])?;
    for d in diagnostics {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            d.snr_db.to_string(),
            d.pilot_interval.to_string(),
            d.trial.to_string(),
            d.min_estep_gain.map(|g| g.to_string()).unwrap_or_default(),
            d.max_row_sum_error.to_string(),
            d.max_mstep_increase.map(|g| g.to_string()).unwrap_or_default(),
            d.mean_max_posterior.to_string(),
        ])?;
    }
    flush(w, "<diagnostics csv>")
}

/// One panel of the learning-process figure.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// `raw`, `pretrain`, `em` or `final`.
    pub stage: &'static str,
    /// Pretraining step or EM iteration; 0 for raw data.
    pub step: usize,
    pub decisions: Option<Vec<usize>>,
    pub curves: Option<Vec<Vec<[f64; 2]>>>,
    /// Over payload positions, when a posterior exists.
    pub mean_max_posterior: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SnapshotReport {
    pub scenario: Scenario,
    pub snapshots: Vec<Snapshot>,
    pub final_posterior: em::PosteriorMatrix,
    pub trace: em::ElboTrace,
    /// Largest `|row sum - 1|` over every posterior produced.
    pub max_row_sum_error: f64,
}

/// Hard decisions by smallest projection distance, pilots forced to their labels.
fn nearest_curve(model: &SmnModel, scenario: &Scenario) -> Vec<usize> {
    let k = model.order();
    let d = model.distances(&scenario.received.samples);
    (0..scenario.received.len())
        .map(|i| {
            if scenario.frame.is_pilot(i) {
                return scenario.frame.symbols()[i];
            }
            let row = &d[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn curves_for(
    model: &SmnModel,
    scenario: &Scenario,
    decisions: &[usize],
    points: usize,
) -> Result<Vec<Vec<[f64; 2]>>> {
    let grid = em::lambda_grid(model, &scenario.received, &scenario.frame, decisions, points)?;
    Ok(em::extract_fading_curve(model, &grid))
}

/// Raw data, two pretraining checkpoints, two EM checkpoints and the final
/// decisions, at `snapshot_interval` and `snapshot_snr_db` on trial 0.
pub fn run_learning_snapshots(config: &ExperimentConfig) -> Result<SnapshotReport> {
    config.validate()?;
    let scenario = simulate(config, config.snapshot_interval, config.snapshot_snr_db, 0)?;
    let model = net::init_model(
        &scenario.constellation,
        config.architecture(),
        config.init_std,
        &mut substream(config.seed, Role::Init, 0),
    )?;
    let mut snapshots = vec![Snapshot {
        stage: "raw",
        step: 0,
        decisions: None,
        curves: None,
        mean_max_posterior: None,
    }];
    let payload = scenario.frame.payload_positions().to_vec();
    let mut failure: Option<Error> = None;
    let mut max_row_sum_error: f64 = 0.0;
    let outcome = em::fit_observed(
        model,
        &scenario.received,
        &scenario.frame,
        &config.em_config(),
        &mut |p| {
            if let Progress::EStep { posterior, .. } | Progress::MStep { posterior, .. } = p {
                max_row_sum_error = max_row_sum_error.max(posterior.max_row_sum_error());
            }
            let snap = match p {
                Progress::PretrainStep { step, model } if config.snapshot_pretrain_steps.contains(&step) => {
                    let decisions = nearest_curve(model, &scenario);
                    curves_for(model, &scenario, &decisions, config.curve_points).map(|c| Snapshot {
                        stage: "pretrain",
                        step,
                        decisions: Some(decisions),
                        curves: Some(c),
                        mean_max_posterior: None,
                    })
                }
                Progress::MStep { iteration, model, .. } if config.snapshot_em_iterations.contains(&iteration) => {
                    em::e_step(model, &scenario.received, &scenario.frame, em::SIGMA_MIN).and_then(|(w, _)| {
                        let decisions = em::demodulate(&w);
                        curves_for(model, &scenario, &decisions, config.curve_points).map(|c| Snapshot {
                            stage: "em",
                            step: iteration,
                            mean_max_posterior: Some(w.mean_max_posterior(&payload)),
                            decisions: Some(decisions),
                            curves: Some(c),
                        })
                    })
                }
                _ => return,
            };
            match snap {
                Ok(s) => snapshots.push(s),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let decisions = em::demodulate(&outcome.posterior);
    let curves = curves_for(&outcome.model, &scenario, &decisions, config.curve_points)?;
    snapshots.push(Snapshot {
        stage: "final",
        step: config.em_iterations,
        mean_max_posterior: Some(outcome.posterior.mean_max_posterior(&payload)),
        decisions: Some(decisions),
        curves: Some(curves),
    });
    Ok(SnapshotReport {
        scenario,
        snapshots,
        max_row_sum_error: max_row_sum_error.max(outcome.posterior.max_row_sum_error()),
        final_posterior: outcome.posterior,
        trace: outcome.trace,
    })
}

/// `version,index,I,Q,pilot_flag,true_symbol,decision` (decision empty for raw data).
pub fn write_snapshot_samples<W: Write>(writer: W, scenario: &Scenario, snapshot: &Snapshot) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["version", "index", "I", "Q", "pilot_flag", "true_symbol", "decision"])?;
    for (i, y) in scenario.received.samples.iter().enumerate() {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            i.to_string(),
            y.re.to_string(),
            y.im.to_string(),
            (scenario.frame.is_pilot(i) as u8).to_string(),
            scenario.frame.symbols()[i].to_string(),
            snapshot
                .decisions
                .as_ref()
                .map(|d| d[i].to_string())
                .unwrap_or_default(),
        ])?;
    }
    flush(w, "<snapshot csv>")
}

/// `version,label,point,I,Q`
pub fn write_curves_csv<W: Write>(writer: W, curves: &[Vec<[f64; 2]>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["version", "label", "point", "I", "Q"])?;
    for (k, curve) in curves.iter().enumerate() {
        for (j, p) in curve.iter().enumerate() {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                k.to_string(),
                j.to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])?;
        }
    }
    flush(w, "<curves csv>")
}

/// Fading estimate at one SNR.
#[derive(Debug, Clone)]
pub struct FadingResult {
    pub snr_db: f64,
    pub true_gains: Vec<Complex64>,
    pub estimates: Vec<Complex64>,
    /// `sqrt(mean |s_hat - s|^2)` over all samples.
    pub rmse: f64,
    pub ser: f64,
    pub curves: Vec<Vec<[f64; 2]>>,
    pub min_estep_gain: Option<f64>,
    pub max_row_sum_error: f64,
    pub max_mstep_increase: Option<f64>,
}

/// Fits the SMN at each of `fading_snr_db` (trial 0, `fading_interval`) and
/// compares the per-sample gain estimate with the true gains.
pub fn run_fading_estimation(config: &ExperimentConfig) -> Result<Vec<FadingResult>> {
    config.validate()?;
    let jobs: Vec<Result<FadingResult>> = with_pool(config.workers, || {
        config
            .fading_snr_db
            .par_iter()
            .map(|&snr| {
                let scenario = simulate(config, config.fading_interval, snr, 0)?;
                let run = run_smn(config, &scenario, 0)?;
                let model = &run.outcome.model;
                let estimates =
                    em::estimate_fading(model, &scenario.received, &run.decisions, &scenario.constellation)?;
                let truth = &scenario.received.true_gains;
                let mse = estimates.iter().zip(truth).map(|(e, t)| (e - t).norm_sqr()).sum::<f64>()
                    / truth.len() as f64;
                let ser = compute_ser(&run.decisions, scenario.frame.symbols(), scenario.frame.payload_positions())?
                    .ser();
                let curves = curves_for(model, &scenario, &run.decisions, config.curve_points)?;
                Ok(FadingResult {
                    snr_db: snr,
                    true_gains: truth.clone(),
                    estimates,
                    rmse: mse.sqrt(),
                    ser,
                    curves,
                    min_estep_gain: run.min_estep_gain,
                    max_row_sum_error: run.max_row_sum_error,
                    max_mstep_increase: run.outcome.trace.max_mstep_increase(),
                })
            })
            .collect()
    })?;
    jobs.into_iter().collect()
}

/// `version,snr_db,index,true_I,true_Q,est_I,est_Q,abs_error`
pub fn write_fading_samples<W: Write>(writer: W, results: &[FadingResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["version", "snr_db", "index", "true_I", "true_Q", "est_I", "est_Q", "abs_error"])?;
    for r in results {
        for (i, (t, e)) in r.true_gains.iter().zip(&r.estimates).enumerate() {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                r.snr_db.to_string(),
                i.to_string(),
                t.re.to_string(),
                t.im.to_string(),
                e.re.to_string(),
                e.im.to_string(),
                (e - t).norm().to_string(),
            ])?;
        }
    }
    flush(w, "<fading csv>")
}

/// `version,snr_db,rmse,ser`
pub fn write_fading_summary<W: Write>(writer: W, results: &[FadingResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["version", "snr_db", "rmse", "ser"])?;
    for r in results {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            r.snr_db.to_string(),
            r.rmse.to_string(),
            r.ser.to_string(),
        ])?;
    }
    flush(w, "<fading summary csv>")
}

fn flush<W: Write>(mut w: csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| Error::io(what, e))
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    let path = dir.join(name);
    fs::File::create(&path).map_err(|e| Error::io(&path, e))
}

fn prepare_dir(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut f = create(dir, "config.toml")?;
    f.write_all(config.to_toml()?.as_bytes())
        .map_err(|e| Error::io(dir.join("config.toml"), e))
}

/// Runs the sweep and writes `ser.csv`, `smn_diagnostics.csv` and
/// `config.toml` into `dir`. Returns the written file names.
pub fn write_ser_sweep(config: &ExperimentConfig, dir: &Path) -> Result<(SweepReport, Vec<PathBuf>)> {
    let report = run_ser_sweep(config)?;
    prepare_dir(dir, config)?;
    write_ser_csv(create(dir, "ser.csv")?, &report.records)?;
    write_diagnostics_csv(create(dir, "smn_diagnostics.csv")?, &report.diagnostics)?;
    let files = ["config.toml", "ser.csv", "smn_diagnostics.csv"].map(|f| dir.join(f)).to_vec();
    Ok((report, files))
}

/// Writes `snapshot_<n>_<stage>.csv` (+ `_curves.csv` when curves exist),
/// `posterior.csv`, `elbo_trace.csv` and `config.toml`.
pub fn write_learning_snapshots(config: &ExperimentConfig, dir: &Path) -> Result<(SnapshotReport, Vec<PathBuf>)> {
    let report = run_learning_snapshots(config)?;
    prepare_dir(dir, config)?;
    let mut files = vec![dir.join("config.toml")];
    for (n, snap) in report.snapshots.iter().enumerate() {
        let name = format!("snapshot_{n}_{}.csv", snap.stage);
        write_snapshot_samples(create(dir, &name)?, &report.scenario, snap)?;
        files.push(dir.join(&name));
        if let Some(curves) = &snap.curves {
            let name = format!("snapshot_{n}_{}_curves.csv", snap.stage);
            write_curves_csv(create(dir, &name)?, curves)?;
            files.push(dir.join(&name));
        }
    }
    report.final_posterior.write_csv(create(dir, "posterior.csv")?)?;
    report.trace.write_csv(create(dir, "elbo_trace.csv")?)?;
    files.push(dir.join("posterior.csv"));
    files.push(dir.join("elbo_trace.csv"));
    Ok((report, files))
}

/// Writes `fading_samples.csv`, `fading_summary.csv`,
/// `fading_curves_<snr>.csv` and `config.toml`.
pub fn write_fading_estimation(config: &ExperimentConfig, dir: &Path) -> Result<(Vec<FadingResult>, Vec<PathBuf>)> {
    let results = run_fading_estimation(config)?;
    prepare_dir(dir, config)?;
    write_fading_samples(create(dir, "fading_samples.csv")?, &results)?;
    write_fading_summary(create(dir, "fading_summary.csv")?, &results)?;
    let mut files = ["config.toml", "fading_samples.csv", "fading_summary.csv"]
        .map(|f| dir.join(f))
        .to_vec();
    for r in &results {
        let name = format!("fading_curves_{}.csv", r.snr_db);
        write_curves_csv(create(dir, &name)?, &r.curves)?;
        files.push(dir.join(name));
    }
    Ok((results, files))
}

/// Outcome of one self-test check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick invariant suite: physics consistency, gradient check, receiver
/// calibration and EM soundness on a small frame.
pub fn selftest(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();

    let physics = physics::consistency_check(&ChannelParams::reference(), 1000);
    checks.push(match physics {
        Ok(worst) => Check {
            name: "physics consistency",
            passed: worst < 1e-10,
            detail: format!("worst relative error {worst:.3e}"),
        },
        Err(e) => failed("physics consistency", e),
    });

    checks.push(match gradient_check(seed) {
        Ok(worst) => Check {
            name: "gradient check",
            passed: worst < 1e-4,
            detail: format!("worst relative error {worst:.3e}"),
        },
        Err(e) => failed("gradient check", e),
    });

    checks.push(match genie_calibration(seed, 4.0, 20000) {
        Ok((ser, theory, se)) => Check {
            name: "genie vs theory",
            passed: (ser - theory).abs() <= 3.0 * se,
            detail: format!("SER {ser:.4} theory {theory:.4} (3 s.e. {:.4})", 3.0 * se),
        },
        Err(e) => failed("genie vs theory", e),
    });

    let cfg = ExperimentConfig {
        seed,
        frame_length: 512,
        snr_db: vec![14.0],
        pilot_intervals: vec![32],
        trials: 1,
        receivers: vec![Receiver::Smn],
        pretrain_steps: 300,
        em_iterations: 3,
        mstep_steps: 20,
        min_gain: 0.3,
        ..ExperimentConfig::default()
    };
    checks.push(
        match simulate(&cfg, 32, 14.0, 0).and_then(|s| run_smn(&cfg, &s, 0)) {
            Ok(run) => {
                let gain = run.min_estep_gain.unwrap_or(0.0);
                Check {
                    name: "EM soundness",
                    passed: gain >= -1e-9 && run.max_row_sum_error <= 1e-9,
                    detail: format!(
                        "min E-step change {gain:.3e}, max row-sum error {:.1e}",
                        run.max_row_sum_error
                    ),
                }
            }
            Err(e) => failed("EM soundness", e),
        },
    );
    checks
}

fn failed(name: &'static str, e: Error) -> Check {
    Check {
        name,
        passed: false,
        detail: e.to_string(),
    }
}

/// Largest relative gap between analytic and central-difference gradients
/// on a random QPSK model and batch.
pub fn gradient_check(seed: u64) -> Result<f64> {
    use rand::Rng;
    let c = link::build_constellation(2)?;
    let mut rng = substream(seed, Role::Init, 0xFFFF);
    let model = net::init_model(&c, Architecture::default(), 0.5, &mut rng)?;
    let n = 64;
    let samples: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let w = em::PosteriorMatrix::from_rows(&rows)?;
    let grad = net::gradients(&model, &samples, &w)?;
    let p0 = model.params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..p0.len() {
        let mut p = p0.clone();
        p[j] = p0[j] + h;
        let mut plus = model.clone();
        plus.set_params(&p)?;
        p[j] = p0[j] - h;
        let mut minus = model.clone();
        minus.set_params(&p)?;
        let fd = (net::weighted_loss(&plus, &samples, &w)? - net::weighted_loss(&minus, &samples, &w)?) / (2.0 * h);
        let scale = fd.abs().max(grad[j].abs()).max(1e-6);
        worst = worst.max((fd - grad[j]).abs() / scale);
    }
    Ok(worst)
}

/// Genie-receiver SER on a unity static QPSK channel, the closed-form value
/// and the binomial standard error at that value.
pub fn genie_calibration(seed: u64, es_n0_db: f64, symbols: usize) -> Result<(f64, f64, f64)> {
    let c = link::build_constellation(2)?;
    let frame = link::build_frame(symbols, symbols, 4, &mut substream(seed, Role::Frame, 0xFFF))?;
    let variance = link::snr_to_noise_variance(es_n0_db, c.average_energy());
    let gains = vec![Complex64::new(1.0, 0.0); symbols];
    let rx = link::transmit(
        &frame,
        &c,
        &gains,
        variance,
        &mut substream(seed, Role::Noise, noise_index(es_n0_db, 0xFFF)),
    )?;
    let d = baselines::genie_ml(&rx, &c)?.decisions;
    let count = compute_ser(&d, frame.symbols(), frame.payload_positions())?;
    let theory = baselines::qpsk_theory_ser(es_n0_db);
    let se = (theory * (1.0 - theory) / count.symbols as f64).sqrt();
    Ok((count.ser(), theory, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ser_counts_payload_only() {
        let truth = vec![0, 1, 2, 3, 0, 1];
        let mut d = truth.clone();
        d[0] = 3; // pilot, ignored
        d[2] = 0;
        let c = compute_ser(&d, &truth, &[1, 2, 3, 5]).unwrap();
        assert_eq!((c.errors, c.symbols), (1, 4));
        assert_eq!(c.ser(), 0.25);
        assert!(matches!(compute_ser(&d[..5], &truth, &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn ser_extremes() {
        let truth: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let positions: Vec<usize> = (0..100).collect();
        assert_eq!(compute_ser(&truth, &truth, &positions).unwrap().ser(), 0.0);
        let wrong: Vec<usize> = truth.iter().map(|t| (t + 1) % 4).collect();
        assert_eq!(compute_ser(&wrong, &truth, &positions).unwrap().ser(), 1.0);
    }

    #[test]
    fn default_config_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn config_rejects_unknown_and_bad_values() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml("trials = 0").is_err());
        assert!(ExperimentConfig::from_toml("pilot_intervals = [8192]").is_err());
        assert!(ExperimentConfig::from_toml("density_min = \"1e16\"").is_err());
        let c = ExperimentConfig::from_toml("seed = 9\nsnr_db = [3.0]").unwrap();
        assert_eq!((c.seed, c.snr_db.clone(), c.frame_length), (9, vec![3.0], 4096));
    }

    #[test]
    fn noise_indices_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for snr in [0.0, 2.0, 11.0, 14.0, 20.0, -3.5] {
            for t in 0..10 {
                assert!(seen.insert(noise_index(snr, t)));
            }
        }
    }
}
