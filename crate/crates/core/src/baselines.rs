//! Reference receivers: genie-aided ML, pilot interpolation, a pilot-trained
//! dense classifier, and the closed-form QPSK error rate.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{Constellation, Frame, ReceivedSequence};
use crate::net::{Activation, AdamConfig, AdamState, Mlp, Trace};

/// Decisions for every sample of a frame (pilots included, so indices line
/// up with the frame); SER bookkeeping skips the pilot positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub name: String,
    pub decisions: Vec<usize>,
    pub channel_estimate: Option<Vec<Complex64>>,
}

/// Nearest point under the true per-sample gain.
pub fn genie_ml(received: &ReceivedSequence, constellation: &Constellation) -> Result<BaselineResult> {
    if received.true_gains.len() != received.len() {
        return Err(Error::Contract("true gains are not available for every sample".into()));
    }
    let decisions = received
        .samples
        .iter()
        .zip(&received.true_gains)
        .map(|(&y, &g)| constellation.nearest(y, g))
        .collect();
    Ok(BaselineResult {
        name: "genie".into(),
        decisions,
        channel_estimate: Some(received.true_gains.clone()),
    })
}

/// Gain estimated as `y/x` at each pilot, interpolated linearly in I and Q
/// between pilots and held constant beyond the first and last pilot.
pub fn pilot_interp_ml(
    received: &ReceivedSequence,
    frame: &Frame,
    constellation: &Constellation,
) -> Result<BaselineResult> {
    check_lengths(received, frame)?;
    let pilots = frame.pilot_positions();
    if pilots.len() < 2 {
        return Err(Error::Config(format!(
            "pilot interpolation needs at least 2 pilots, frame has {}",
            pilots.len()
        )));
    }
    let anchors: Vec<(usize, Complex64)> = pilots
        .iter()
        .map(|&p| (p, received.samples[p] / constellation.point(frame.symbols()[p])))
        .collect();

    let mut estimate = Vec::with_capacity(frame.len());
    let mut seg = 0;
    for i in 0..frame.len() {
        while seg + 2 < anchors.len() && anchors[seg + 1].0 <= i {
            seg += 1;
        }
        let (p0, h0) = anchors[seg];
        let (p1, h1) = anchors[seg + 1];
        let h = if i <= p0 {
            h0
        } else if i >= p1 {
            h1
        } else {
            let t = (i - p0) as f64 / (p1 - p0) as f64;
            h0 + (h1 - h0) * t
        };
        estimate.push(h);
    }
    let decisions = received
        .samples
        .iter()
        .zip(&estimate)
        .map(|(&y, &h)| constellation.nearest(y, h))
        .collect();
    Ok(BaselineResult {
        name: "pilot_interp".into(),
        decisions,
        channel_estimate: Some(estimate),
    })
}

/// Training settings for [`supervised_dnn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnnConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub init_std: f64,
}

impl Default for DnnConfig {
    fn default() -> Self {
        DnnConfig {
            hidden: vec![16, 16],
            steps: 2000,
            learning_rate: 1e-2,
            init_std: 0.5,
        }
    }
}

/// Dense softmax classifier trained with full-batch Adam on the pilot
/// `(y, label)` pairs, then applied to every sample.
pub fn supervised_dnn<R: Rng + ?Sized>(
    received: &ReceivedSequence,
    frame: &Frame,
    constellation: &Constellation,
    config: &DnnConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    check_lengths(received, frame)?;
    let pilots = frame.pilot_positions();
    if pilots.is_empty() {
        return Err(Error::Config("supervised classifier needs pilots".into()));
    }
    if config.hidden.is_empty() || config.hidden.contains(&0) {
        return Err(Error::Config("classifier hidden widths must be non-empty and positive".into()));
    }
    let k = constellation.order();
    let mut widths = vec![2];
    widths.extend_from_slice(&config.hidden);
    widths.push(k);
    let mut net = Mlp::gaussian(&widths, Activation::Tanh, Activation::Linear, config.init_std, rng);

    let inputs: Vec<[f64; 2]> = pilots
        .iter()
        .map(|&p| [received.samples[p].re, received.samples[p].im])
        .collect();
    let labels: Vec<usize> = pilots.iter().map(|&p| frame.symbols()[p]).collect();
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, net.num_params());
    let mut params = net.params();
    let mut grad = vec![0.0; params.len()];
    let mut trace = Trace::default();
    let scale = 1.0 / inputs.len() as f64;
    for _ in 0..config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &label) in inputs.iter().zip(&labels) {
            let mut probs = softmax(net.forward(x, &mut trace));
            probs[label] -= 1.0;
            probs.iter_mut().for_each(|p| *p *= scale);
            net.backward(&mut trace, &probs, &mut grad);
        }
        state.step(&mut params, &grad)?;
        net.set_params(&params)?;
    }

    let decisions = received
        .samples
        .iter()
        .map(|y| argmax(net.forward(&[y.re, y.im], &mut trace)))
        .collect();
    Ok(BaselineResult {
        name: "dnn".into(),
        decisions,
        channel_estimate: None,
    })
}

/// QPSK symbol error probability `2Q(sqrt(g)) - Q(sqrt(g))^2` at linear
/// Es/N0 `g`.
pub fn qpsk_theory_ser(es_n0_db: f64) -> f64 {
    let gamma = 10f64.powf(es_n0_db / 10.0);
    let q = 0.5 * libm::erfc((gamma / 2.0).sqrt());
    2.0 * q - q * q
}

fn check_lengths(received: &ReceivedSequence, frame: &Frame) -> Result<()> {
    if received.len() != frame.len() {
        return Err(Error::Contract(format!(
            "received {} samples for a frame of {}",
            received.len(),
            frame.len()
        )));
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}
