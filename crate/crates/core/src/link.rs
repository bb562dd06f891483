//! M-ary IQ modulation, pilot framing and the fading + AWGN channel.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-average-energy symbol alphabet; `points[k]` is the symbol with label `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
}

fn gray(n: usize) -> usize {
    n ^ (n >> 1)
}

/// Builds the Gray-labelled constellation for `bits_per_symbol` bits.
///
/// 1: BPSK, 2: QPSK (bit 0 selects the sign of I, bit 1 the sign of Q),
/// 3: 8-PSK, 4: square 16-QAM.
pub fn build_constellation(bits_per_symbol: u32) -> Result<Constellation> {
    let points = match bits_per_symbol {
        1 => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        2 => (0..4)
            .map(|k| {
                let re = if k & 1 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
                let im = if k & 2 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
                Complex64::new(re, im)
            })
            .collect(),
        3 => {
            let mut pts = vec![Complex64::new(0.0, 0.0); 8];
            for pos in 0..8 {
                pts[gray(pos)] = Complex64::from_polar(1.0, 2.0 * PI * pos as f64 / 8.0);
            }
            pts
        }
        4 => {
            // Per-axis Gray code over levels -3, -1, 1, 3; mean energy 10.
            let levels = [-3.0, -1.0, 1.0, 3.0];
            let scale = 1.0 / 10f64.sqrt();
            let mut pts = vec![Complex64::new(0.0, 0.0); 16];
            for i_pos in 0..4 {
                for q_pos in 0..4 {
                    let label = gray(i_pos) | (gray(q_pos) << 2);
                    pts[label] = Complex64::new(levels[i_pos] * scale, levels[q_pos] * scale);
                }
            }
            pts
        }
        other => {
            return Err(Error::Config(format!(
                "unsupported bits per symbol {other} (expected 1..=4)"
            )))
        }
    };
    Ok(Constellation { points })
}

impl Constellation {
    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, label: usize) -> Complex64 {
        self.points[label]
    }

    pub fn average_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    /// Label of the point nearest to `y` after scaling the alphabet by `gain`.
    /// Ties go to the lowest label.
    pub fn nearest(&self, y: Complex64, gain: Complex64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (k, p) in self.points.iter().enumerate() {
            let d = (y - gain * p).norm_sqr();
            if d < best_dist {
                best = k;
                best_dist = d;
            }
        }
        best
    }
}

/// A transmitted block: payload symbols with pilots at every `pilot_interval`-th slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    symbols: Vec<usize>,
    order: usize,
    pilot_interval: usize,
    pilot_positions: Vec<usize>,
    payload_positions: Vec<usize>,
}

/// Builds a frame of length `m` for an alphabet of size `order`.
///
/// Pilots sit at `0, interval, 2*interval, ...` and cycle through the labels
/// `0, 1, ..., order-1, 0, ...`; payload labels are uniform draws from `rng`.
pub fn build_frame<R: Rng + ?Sized>(
    m: usize,
    interval: usize,
    order: usize,
    rng: &mut R,
) -> Result<Frame> {
    if interval == 0 {
        return Err(Error::Config("pilot interval must be >= 1".into()));
    }
    if interval > m {
        return Err(Error::Config(format!(
            "pilot interval {interval} exceeds frame length {m}"
        )));
    }
    if order == 0 {
        return Err(Error::Config("constellation order must be >= 1".into()));
    }
    let mut symbols = Vec::with_capacity(m);
    let mut pilot_positions = Vec::new();
    let mut payload_positions = Vec::new();
    for i in 0..m {
        if i % interval == 0 {
            symbols.push(pilot_positions.len() % order);
            pilot_positions.push(i);
        } else {
            symbols.push(rng.random_range(0..order));
            payload_positions.push(i);
        }
    }
    Ok(Frame {
        symbols,
        order,
        pilot_interval: interval,
        pilot_positions,
        payload_positions,
    })
}

impl Frame {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn pilot_interval(&self) -> usize {
        self.pilot_interval
    }

    pub fn pilot_positions(&self) -> &[usize] {
        &self.pilot_positions
    }

    pub fn payload_positions(&self) -> &[usize] {
        &self.payload_positions
    }

    pub fn is_pilot(&self, index: usize) -> bool {
        index.is_multiple_of(self.pilot_interval)
    }

    /// Fraction of slots carrying payload, `1 - 1/interval`.
    pub fn bandwidth_utilization(&self) -> f64 {
        bandwidth_utilization(self.pilot_interval)
    }

    /// Number of pilots carrying each label.
    pub fn pilots_per_symbol(&self) -> Vec<usize> {
        let mut counts = vec![0; self.order];
        for &p in &self.pilot_positions {
            counts[self.symbols[p]] += 1;
        }
        counts
    }
}

pub fn bandwidth_utilization(interval: usize) -> f64 {
    1.0 - 1.0 / interval as f64
}

/// Total complex noise variance for a given Es/N0 in dB.
pub fn snr_to_noise_variance(snr_db: f64, symbol_energy: f64) -> f64 {
    symbol_energy / 10f64.powf(snr_db / 10.0)
}

/// Whether a configured SNR is read as Es/N0 or Eb/N0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnrConvention {
    #[default]
    EsN0,
    EbN0,
}

impl SnrConvention {
    /// Converts a configured SNR to Es/N0 in dB.
    pub fn to_es_n0_db(self, snr_db: f64, bits_per_symbol: u32) -> f64 {
        match self {
            SnrConvention::EsN0 => snr_db,
            SnrConvention::EbN0 => snr_db + 10.0 * (bits_per_symbol as f64).log10(),
        }
    }
}

/// Channel output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedSequence {
    pub samples: Vec<Complex64>,
    /// Ground truth, evaluation only.
    pub true_gains: Vec<Complex64>,
    pub noise_variance: f64,
}

impl ReceivedSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `y_i = s_i * x_i + n_i` with circular Gaussian `n_i` of total variance
/// `noise_variance` (half per quadrature).
pub fn transmit<R: Rng + ?Sized>(
    frame: &Frame,
    constellation: &Constellation,
    gains: &[Complex64],
    noise_variance: f64,
    rng: &mut R,
) -> Result<ReceivedSequence> {
    if gains.len() != frame.len() {
        return Err(Error::Contract(format!(
            "{} gains for a frame of {} symbols",
            gains.len(),
            frame.len()
        )));
    }
    if frame.order() != constellation.order() {
        return Err(Error::Contract(format!(
            "frame alphabet {} does not match constellation order {}",
            frame.order(),
            constellation.order()
        )));
    }
    if !noise_variance.is_finite() || noise_variance < 0.0 {
        return Err(Error::Contract(format!("invalid noise variance {noise_variance}")));
    }
    let sigma = (noise_variance / 2.0).sqrt();
    let samples = frame
        .symbols()
        .iter()
        .zip(gains)
        .map(|(&sym, &g)| {
            let i: f64 = StandardNormal.sample(rng);
            let q: f64 = StandardNormal.sample(rng);
            g * constellation.point(sym) + Complex64::new(sigma * i, sigma * q)
        })
        .collect();
    Ok(ReceivedSequence {
        samples,
        true_gains: gains.to_vec(),
        noise_variance,
    })
}

/// One row of the link debug CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRow {
    pub index: usize,
    pub pilot_flag: u8,
    pub true_symbol: usize,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    pub gain_i: f64,
    pub gain_q: f64,
}

/// Writes `index,pilot_flag,true_symbol,I,Q,gain_I,gain_Q`.
pub fn write_link_csv<W: Write>(writer: W, frame: &Frame, received: &ReceivedSequence) -> Result<()> {
    if frame.len() != received.len() {
        return Err(Error::Contract("frame and received sequence differ in length".into()));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["index", "pilot_flag", "true_symbol", "I", "Q", "gain_I", "gain_Q"])?;
    for (index, (&sym, (y, g))) in frame
        .symbols()
        .iter()
        .zip(received.samples.iter().zip(&received.true_gains))
        .enumerate()
    {
        w.serialize(LinkRow {
            index,
            pilot_flag: frame.is_pilot(index) as u8,
            true_symbol: sym,
            i: y.re,
            q: y.im,
            gain_i: g.re,
            gain_q: g.im,
        })?;
    }
    w.flush().map_err(|e| Error::io("<link csv>", e))?;
    Ok(())
}

pub fn read_link_csv<R: Read>(reader: R) -> Result<Vec<LinkRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let record = record?;
        if n == 0 {
            if record.get(0) != Some("index") {
                return Err(Error::Parse("link csv is missing its header row".into()));
            }
            continue;
        }
        rows.push(record.deserialize(None)?);
    }
    Ok(rows)
}
