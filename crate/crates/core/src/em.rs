//! Semi-supervised EM training of the symmetric manifold network.
//!
//! 1. Pretrain on pilots only, with their known labels as one-hot weights.
//! 2. Alternate:
//!    - E-step: `W_ik = softmax_k(-||y_i - proj_k(y_i)||^2 / sigma^2)`
//!      under a uniform prior, pilot rows clamped to their labels;
//!    - M-step: reset Adam, take a fixed number of full-batch steps on the
//!      weighted projection error over every sample, then set `sigma^2` to
//!      that weighted error.
//!
//! The lower bound recorded after each phase is
//! `L = sum_i sum_k W_ik [ln(1/K) + ln p(y_i | k) - ln W_ik]` with
//! `ln p(y|k) = -ln(pi sigma^2) - d_ik / sigma^2`. For payload rows the
//! E-step sets `W` to the exact posterior, so `L` cannot drop across it.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{Constellation, Frame, ReceivedSequence};
use crate::net::{self, AdamConfig, AdamState, SmnModel};

/// Row-stochastic `m x K` soft-decision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    rows: usize,
    order: usize,
    data: Vec<f64>,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl PosteriorMatrix {
    pub fn zeros(rows: usize, order: usize) -> Self {
        PosteriorMatrix {
            rows,
            order,
            data: vec![0.0; rows * order],
        }
    }

    pub fn uniform(rows: usize, order: usize) -> Self {
        PosteriorMatrix {
            rows,
            order,
            data: vec![1.0 / order as f64; rows * order],
        }
    }

    pub fn one_hot(labels: &[usize], order: usize) -> Result<Self> {
        let mut w = Self::zeros(labels.len(), order);
        for (i, &l) in labels.iter().enumerate() {
            if l >= order {
                return Err(Error::Contract(format!("label {l} outside 0..{order}")));
            }
            w.data[i * order + l] = 1.0;
        }
        Ok(w)
    }

    /// Validating constructor: every row must be a probability vector.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let order = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * order);
        for r in rows {
            if r.len() != order {
                return Err(Error::Contract("ragged posterior rows".into()));
            }
            data.extend_from_slice(r);
        }
        let w = PosteriorMatrix {
            rows: rows.len(),
            order,
            data,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.order + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.order..(i + 1) * self.order]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.order..(i + 1) * self.order]
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("posterior entry {v} outside [0, 1]")));
        }
        let err = self.max_row_sum_error();
        if err > ROW_SUM_TOL {
            return Err(Error::Contract(format!("posterior row sum off by {err:e}")));
        }
        Ok(())
    }

    /// Index of the largest entry per row, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for k in 1..self.order {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean over `positions` of the largest posterior entry.
    pub fn mean_max_posterior(&self, positions: &[usize]) -> f64 {
        if positions.is_empty() {
            return f64::NAN;
        }
        positions
            .iter()
            .map(|&i| self.row(i).iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / positions.len() as f64
    }

    /// Writes `index,p0,p1,...` with a header row.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["index".to_string()];
        header.extend((0..self.order).map(|k| format!("p{k}")));
        w.write_record(&header)?;
        for i in 0..self.rows {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<posterior csv>", e))?;
        Ok(())
    }
}

/// Step counts for the three training phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmSchedule {
    pub pretrain_steps: usize,
    pub em_iterations: usize,
    pub mstep_steps: usize,
}

impl Default for EmSchedule {
    fn default() -> Self {
        EmSchedule {
            pretrain_steps: 2000,
            em_iterations: 10,
            mstep_steps: 100,
        }
    }
}

/// Floor for the noise variance estimate.
pub const SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub schedule: EmSchedule,
    pub adam: AdamConfig,
    pub sigma_min: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            schedule: EmSchedule::default(),
            adam: AdamConfig::default(),
            sigma_min: SIGMA_MIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Pretrain,
    EStep,
    MStep,
}

impl PhaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::Pretrain => "pretrain",
            PhaseTag::EStep => "e_step",
            PhaseTag::MStep => "m_step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: PhaseTag,
    /// EM iteration (0 for pretraining).
    pub iteration: usize,
    pub lower_bound: f64,
    pub noise_variance: f64,
    /// Weighted projection error under the current `W`.
    pub objective: f64,
    /// The noise variance hit the floor in this phase.
    pub clamped: bool,
}

/// Lower bound after each training phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElboTrace {
    pub records: Vec<TraceRecord>,
}

impl ElboTrace {
    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if !record.lower_bound.is_finite() {
            return Err(Error::NonFinite(format!(
                "lower bound {} after {} (iteration {})",
                record.lower_bound,
                record.phase.as_str(),
                record.iteration
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Smallest change of the bound across an E-step (positive means it rose).
    pub fn min_estep_gain(&self) -> Option<f64> {
        self.records
            .windows(2)
            .filter(|w| w[1].phase == PhaseTag::EStep)
            .map(|w| w[1].lower_bound - w[0].lower_bound)
            .reduce(f64::min)
    }

    /// Largest rise of the weighted residual across an M-step, comparing the
    /// objective under the same weights before and after the step.
    pub fn max_mstep_increase(&self) -> Option<f64> {
        self.records
            .windows(2)
            .filter(|w| w[0].phase == PhaseTag::EStep && w[1].phase == PhaseTag::MStep)
            .map(|w| w[1].objective - w[0].objective)
            .reduce(f64::max)
    }

    pub fn clamp_count(&self) -> usize {
        self.records.iter().filter(|r| r.clamped).count()
    }

    /// `phase,iteration,lower_bound,noise_variance,objective,clamped`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["phase", "iteration", "lower_bound", "noise_variance", "objective", "clamped"])?;
        for r in &self.records {
            w.write_record([
                r.phase.as_str().to_string(),
                r.iteration.to_string(),
                r.lower_bound.to_string(),
                r.noise_variance.to_string(),
                r.objective.to_string(),
                (r.clamped as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }
}

/// Notification handed to a [`fit_observed`] observer.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    /// After pretraining step `step` (1-based).
    PretrainStep { step: usize, model: &'a SmnModel },
    /// After the E-step of EM iteration `iteration` (1-based).
    EStep { iteration: usize, model: &'a SmnModel, posterior: &'a PosteriorMatrix },
    /// After the M-step of EM iteration `iteration` (1-based).
    MStep { iteration: usize, model: &'a SmnModel, posterior: &'a PosteriorMatrix },
}

fn pilot_labels(frame: &Frame) -> Vec<usize> {
    frame.pilot_positions().iter().map(|&p| frame.symbols()[p]).collect()
}

fn check_inputs(model: &SmnModel, received: &ReceivedSequence, frame: &Frame) -> Result<()> {
    if received.len() != frame.len() {
        return Err(Error::Contract(format!(
            "received {} samples for a frame of {}",
            received.len(),
            frame.len()
        )));
    }
    if frame.order() != model.order() {
        return Err(Error::Contract(format!(
            "frame alphabet {} but model has {} branches",
            frame.order(),
            model.order()
        )));
    }
    Ok(())
}

fn clamp_sigma(value: f64, floor: f64) -> (f64, bool) {
    if value < floor {
        (floor, true)
    } else {
        (value, false)
    }
}

/// Trains on pilots only for `steps` Adam steps, then sets the noise
/// variance to the pilot residual. Returns whether the floor was hit.
pub fn pretrain(
    model: &mut SmnModel,
    received: &ReceivedSequence,
    frame: &Frame,
    config: &EmConfig,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<bool> {
    check_inputs(model, received, frame)?;
    let missing: Vec<usize> = frame
        .pilots_per_symbol()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(k, _)| k)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "symbols {missing:?} have no pilots; their curves cannot be identified"
        )));
    }
    let samples: Vec<Complex64> = frame.pilot_positions().iter().map(|&p| received.samples[p]).collect();
    let weights = PosteriorMatrix::one_hot(&pilot_labels(frame), model.order())?;
    let mut state = AdamState::new(config.adam, model.num_params());
    for step in 1..=config.schedule.pretrain_steps {
        let (_, grad) = net::loss_and_gradients(model, &samples, &weights)?;
        net::adam_step(model, &grad, &mut state)?;
        observer(Progress::PretrainStep { step, model });
    }
    let residual = net::weighted_loss(model, &samples, &weights)?;
    let (sigma, clamped) = clamp_sigma(residual, config.sigma_min);
    model.noise_variance = sigma;
    Ok(clamped)
}

/// Posterior over curves for every sample, pilots clamped to their labels.
/// Returns the matrix and whether the noise variance had to be floored.
pub fn e_step(
    model: &SmnModel,
    received: &ReceivedSequence,
    frame: &Frame,
    sigma_min: f64,
) -> Result<(PosteriorMatrix, bool)> {
    check_inputs(model, received, frame)?;
    let (sigma, clamped) = clamp_sigma(model.noise_variance, sigma_min);
    let k_count = model.order();
    let d = model.distances(&received.samples);
    let mut w = PosteriorMatrix::zeros(received.len(), k_count);
    for i in 0..received.len() {
        let row = &d[i * k_count..(i + 1) * k_count];
        let out = w.row_mut(i);
        let best = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for (o, &dist) in out.iter_mut().zip(row) {
            *o = (-(dist - best) / sigma).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    for &p in frame.pilot_positions() {
        let label = frame.symbols()[p];
        let row = w.row_mut(p);
        row.fill(0.0);
        row[label] = 1.0;
    }
    if let Some(v) = w.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("posterior entry {v}")));
    }
    Ok((w, clamped))
}

/// Resets `state`, runs the M-step's Adam steps on every sample and
/// re-estimates the noise variance. Returns `(objective, clamped)`.
pub fn m_step(
    model: &mut SmnModel,
    received: &ReceivedSequence,
    weights: &PosteriorMatrix,
    config: &EmConfig,
    state: &mut AdamState,
) -> Result<(f64, bool)> {
    *state = net::reset_optimizer(state);
    for step in 0..config.schedule.mstep_steps {
        let (loss, grad) = net::loss_and_gradients(model, &received.samples, weights).map_err(|e| {
            Error::NonFinite(format!("M-step step {step}: {e}"))
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("M-step loss {loss} at step {step}")));
        }
        net::adam_step(model, &grad, state)?;
    }
    let objective = net::weighted_loss(model, &received.samples, weights)?;
    if !objective.is_finite() {
        return Err(Error::NonFinite(format!("M-step objective {objective}")));
    }
    let (sigma, clamped) = clamp_sigma(objective, config.sigma_min);
    model.noise_variance = sigma;
    Ok((objective, clamped))
}

/// Evidence lower bound for the current model and weights.
pub fn lower_bound(model: &SmnModel, received: &ReceivedSequence, weights: &PosteriorMatrix) -> Result<f64> {
    let k_count = model.order();
    if weights.rows() != received.len() || weights.order() != k_count {
        return Err(Error::Contract("weights do not match the received sequence".into()));
    }
    let sigma = model.noise_variance;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Domain(format!("noise variance must be positive, got {sigma}")));
    }
    let d = model.distances(&received.samples);
    let log_prior = -(k_count as f64).ln();
    let log_norm = -(std::f64::consts::PI * sigma).ln();
    let total: f64 = d
        .iter()
        .zip(weights.as_slice())
        .map(|(&dist, &w)| {
            if w > 0.0 {
                w * (log_prior + log_norm - dist / sigma - w.ln())
            } else {
                0.0
            }
        })
        .sum();
    Ok(total)
}

/// Initial weights: pilots one-hot, payload at the uniform prior.
pub fn initial_weights(frame: &Frame) -> PosteriorMatrix {
    let mut w = PosteriorMatrix::uniform(frame.len(), frame.order());
    for &p in frame.pilot_positions() {
        let row = w.row_mut(p);
        row.fill(0.0);
        row[frame.symbols()[p]] = 1.0;
    }
    w
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: SmnModel,
    pub posterior: PosteriorMatrix,
    pub trace: ElboTrace,
}

pub fn fit(
    model: SmnModel,
    received: &ReceivedSequence,
    frame: &Frame,
    config: &EmConfig,
) -> Result<FitOutcome> {
    fit_observed(model, received, frame, config, &mut |_| {})
}

/// Pretraining followed by `em_iterations` rounds of E-step and M-step.
pub fn fit_observed(
    mut model: SmnModel,
    received: &ReceivedSequence,
    frame: &Frame,
    config: &EmConfig,
    observer: &mut dyn FnMut(Progress<'_>),
) -> Result<FitOutcome> {
    let mut trace = ElboTrace::default();
    let clamped = pretrain(&mut model, received, frame, config, observer)?;
    let mut weights = initial_weights(frame);
    trace.push(TraceRecord {
        phase: PhaseTag::Pretrain,
        iteration: 0,
        lower_bound: lower_bound(&model, received, &weights)?,
        noise_variance: model.noise_variance,
        objective: net::weighted_loss(&model, &received.samples, &weights)?,
        clamped,
    })?;

    let mut state = AdamState::new(config.adam, model.num_params());
    for iteration in 1..=config.schedule.em_iterations {
        let (w, clamped) = e_step(&model, received, frame, config.sigma_min)?;
        weights = w;
        trace.push(TraceRecord {
            phase: PhaseTag::EStep,
            iteration,
            lower_bound: lower_bound(&model, received, &weights)?,
            noise_variance: model.noise_variance,
            objective: net::weighted_loss(&model, &received.samples, &weights)?,
            clamped,
        })?;
        observer(Progress::EStep { iteration, model: &model, posterior: &weights });

        let (objective, clamped) = m_step(&mut model, received, &weights, config, &mut state)?;
        trace.push(TraceRecord {
            phase: PhaseTag::MStep,
            iteration,
            lower_bound: lower_bound(&model, received, &weights)?,
            noise_variance: model.noise_variance,
            objective,
            clamped,
        })?;
        observer(Progress::MStep { iteration, model: &model, posterior: &weights });
    }

    // Without any EM iteration the decisions come from the pretrained curves.
    let posterior = if config.schedule.em_iterations == 0 {
        e_step(&model, received, frame, config.sigma_min)?.0
    } else {
        weights
    };
    Ok(FitOutcome { model, posterior, trace })
}

/// Hard decisions: per-row argmax, lowest label on ties.
pub fn demodulate(posterior: &PosteriorMatrix) -> Vec<usize> {
    posterior.argmax()
}

/// `n` evenly spaced curve coordinates spanning the encoder outputs of the
/// payload samples under their decided branch.
pub fn lambda_grid(
    model: &SmnModel,
    received: &ReceivedSequence,
    frame: &Frame,
    decisions: &[usize],
    n: usize,
) -> Result<Vec<f64>> {
    let payload = frame.payload_positions();
    if payload.is_empty() {
        return Err(Error::Contract("frame has no payload".into()));
    }
    if n == 0 {
        return Err(Error::Contract("grid needs at least one point".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in payload {
        let y = received.samples[i];
        let l = model.encode([y.re, y.im], decisions[i]);
        lo = lo.min(l);
        hi = hi.max(l);
    }
    if n == 1 {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    Ok((0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect())
}

/// Curves `T_k cart(decoder(lambda))` sampled on `grid`, one polyline per label.
pub fn extract_fading_curve(model: &SmnModel, grid: &[f64]) -> Vec<Vec<[f64; 2]>> {
    (0..model.order())
        .map(|k| grid.iter().map(|&l| model.curve_point(l, k)).collect())
        .collect()
}

/// Per-sample fading estimate `project(y_i, k_i) / x_{k_i}` under the
/// decided labels.
pub fn estimate_fading(
    model: &SmnModel,
    received: &ReceivedSequence,
    decisions: &[usize],
    constellation: &Constellation,
) -> Result<Vec<Complex64>> {
    if decisions.len() != received.len() {
        return Err(Error::Contract("decision count differs from sample count".into()));
    }
    Ok(received
        .samples
        .iter()
        .zip(decisions)
        .map(|(y, &k)| {
            let p = model.project([y.re, y.im], k);
            Complex64::new(p[0], p[1]) / constellation.point(k)
        })
        .collect())
}
