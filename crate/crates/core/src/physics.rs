//! Plasma-sheath propagation: electron density to complex channel gain.
//!
//! The sheath is modelled as a uniform cold collisional plasma slab of
//! thickness `z`. Electron density sets the plasma frequency, which sets the
//! complex relative permittivity, which sets the complex propagation constant
//! `k = beta - j*alpha`. A wave crossing the slab is scaled by
//! `exp(-alpha*z) * exp(-j*beta*z)`.
//!
//! Everything here is SI. Densities are per cubic metre; frequencies are
//! angular (rad/s). Use [`parse_density`] and [`FrequencyConvention`] to
//! accept other units at the configuration boundary.

use std::f64::consts::{PI, SQRT_2};
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CODATA 2018 exact/recommended values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Elementary charge (C).
    pub electron_charge: f64,
    /// Vacuum permittivity (F/m).
    pub vacuum_permittivity: f64,
    /// Electron rest mass (kg).
    pub electron_mass: f64,
    /// Speed of light in vacuum (m/s).
    pub light_speed: f64,
}

pub const CODATA: PhysicalConstants = PhysicalConstants {
    electron_charge: 1.602_176_634e-19,
    vacuum_permittivity: 8.854_187_812_8e-12,
    electron_mass: 9.109_383_701_5e-31,
    light_speed: 299_792_458.0,
};

/// Which imaginary-part numerator to use in the permittivity.
///
/// `AsPrinted` uses `nu^2/omega`, `Drude` uses the textbook `nu/omega`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    #[default]
    AsPrinted,
    Drude,
}

/// How configured carrier/collision frequencies are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyConvention {
    /// Hz; multiplied by 2*pi.
    #[default]
    Ordinary,
    /// Already rad/s.
    Angular,
}

impl FrequencyConvention {
    pub fn to_angular(self, value: f64) -> f64 {
        match self {
            FrequencyConvention::Ordinary => 2.0 * PI * value,
            FrequencyConvention::Angular => value,
        }
    }
}

impl FromStr for LossForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(LossForm::AsPrinted),
            "drude" => Ok(LossForm::Drude),
            other => Err(Error::Config(format!("unknown loss form '{other}'"))),
        }
    }
}

/// Carrier, collision frequency, slab thickness and the density span the
/// channel is allowed to visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// rad/s
    pub carrier_angular_freq: f64,
    /// rad/s
    pub collision_angular_freq: f64,
    /// m
    pub sheath_thickness: f64,
    /// m^-3
    pub density_min: f64,
    /// m^-3
    pub density_max: f64,
    pub loss_form: LossForm,
}

/// Default target for `|gain|` at the densest point of the range.
pub const DEFAULT_MIN_GAIN: f64 = 0.05;

impl ChannelParams {
    /// Builds a parameter set and checks its invariants.
    pub fn new(
        carrier_angular_freq: f64,
        collision_angular_freq: f64,
        sheath_thickness: f64,
        density_min: f64,
        density_max: f64,
        loss_form: LossForm,
    ) -> Result<Self> {
        let params = ChannelParams {
            carrier_angular_freq,
            collision_angular_freq,
            sheath_thickness,
            density_min,
            density_max,
            loss_form,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.carrier_angular_freq,
            self.collision_angular_freq,
            self.sheath_thickness,
            self.density_min,
            self.density_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("channel parameters must be finite".into()));
        }
        if self.carrier_angular_freq <= 0.0 {
            return Err(Error::Config("carrier frequency must be positive".into()));
        }
        if self.collision_angular_freq < 0.0 {
            return Err(Error::Config("collision frequency must be non-negative".into()));
        }
        if self.sheath_thickness <= 0.0 {
            return Err(Error::Config("sheath thickness must be positive".into()));
        }
        if !(self.density_min > 0.0 && self.density_min <= self.density_max) {
            return Err(Error::Config(format!(
                "density range must satisfy 0 < min <= max, got [{:e}, {:e}]",
                self.density_min, self.density_max
            )));
        }
        Ok(())
    }

    /// 9 GHz carrier, 20 GHz collision frequency (both ordinary, converted to
    /// rad/s), density 1e16..6e17 cm^-3, thickness calibrated so the deepest
    /// fade is [`DEFAULT_MIN_GAIN`].
    pub fn reference() -> Self {
        Self::reference_with(FrequencyConvention::Ordinary, LossForm::AsPrinted, DEFAULT_MIN_GAIN)
            .expect("reference parameters are valid")
    }

    pub fn reference_with(
        convention: FrequencyConvention,
        loss_form: LossForm,
        min_gain: f64,
    ) -> Result<Self> {
        let mut params = ChannelParams {
            carrier_angular_freq: convention.to_angular(9.0e9),
            collision_angular_freq: convention.to_angular(20.0e9),
            sheath_thickness: 1.0,
            density_min: 1.0e16 * CM3_TO_M3,
            density_max: 6.0e17 * CM3_TO_M3,
            loss_form,
        };
        params.sheath_thickness = calibrate_thickness(&params, min_gain)?;
        params.validate()?;
        Ok(params)
    }

    /// `omega^2 + nu^2`, the denominator shared by both permittivity terms.
    fn drive_term(&self) -> f64 {
        self.carrier_angular_freq * self.carrier_angular_freq
            + self.collision_angular_freq * self.collision_angular_freq
    }

    /// Coefficient multiplying `omega_p^2/(omega^2+nu^2)` in `-Im(eps_r)`.
    fn loss_factor(&self) -> f64 {
        let (w, nu) = (self.carrier_angular_freq, self.collision_angular_freq);
        match self.loss_form {
            LossForm::AsPrinted => nu * nu / w,
            LossForm::Drude => nu / w,
        }
    }
}

/// One per cm^3 expressed per m^3.
pub const CM3_TO_M3: f64 = 1.0e6;

/// Parses a density with an explicit unit suffix: `"1e16 cm-3"` or
/// `"1e22 m-3"` (whitespace optional, `^` allowed: `cm^-3`).
pub fn parse_density(text: &str) -> Result<f64> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace() && *c != '^').collect();
    let (number, scale) = if let Some(n) = compact.strip_suffix("cm-3") {
        (n, CM3_TO_M3)
    } else if let Some(n) = compact.strip_suffix("m-3") {
        (n, 1.0)
    } else {
        return Err(Error::Config(format!(
            "density '{text}' needs a unit suffix (cm-3 or m-3)"
        )));
    };
    let value: f64 = number
        .parse()
        .map_err(|_| Error::Config(format!("bad density value '{text}'")))?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Config(format!("density '{text}' must be finite and >= 0")));
    }
    Ok(value * scale)
}

fn check_density(n_e: f64) -> Result<()> {
    if n_e.is_nan() || n_e < 0.0 {
        return Err(Error::Domain(format!("electron density must be >= 0, got {n_e}")));
    }
    Ok(())
}

/// Plasma angular frequency `sqrt(n_e e^2 / (eps0 m_e))` in rad/s.
pub fn plasma_frequency(n_e: f64) -> Result<f64> {
    check_density(n_e)?;
    Ok(plasma_frequency_sq(n_e).sqrt())
}

fn plasma_frequency_sq(n_e: f64) -> f64 {
    let c = CODATA;
    n_e * c.electron_charge * c.electron_charge / (c.vacuum_permittivity * c.electron_mass)
}

/// Complex relative permittivity of the sheath. The imaginary part is
/// non-positive (lossy medium under the `exp(-jkz)` convention).
pub fn dielectric_coefficient(n_e: f64, params: &ChannelParams) -> Result<Complex64> {
    check_density(n_e)?;
    let x = plasma_frequency_sq(n_e) / params.drive_term();
    Ok(Complex64::new(1.0 - x, -params.loss_factor() * x))
}

/// Attenuation `alpha` (Np/m) and phase `beta` (rad/m) coefficients from the
/// real-valued closed form, arranged to avoid cancellation when one of the two
/// radicands is tiny.
pub fn attenuation_phase_coefficients(n_e: f64, params: &ChannelParams) -> Result<(f64, f64)> {
    check_density(n_e)?;
    let x = plasma_frequency_sq(n_e) / params.drive_term();
    let real = 1.0 - x;
    let loss = params.loss_factor() * x;
    let modulus = real.hypot(loss);

    // alpha^2 ~ (modulus - real), beta^2 ~ (modulus + real); their product is loss^2.
    let (alpha_rad, beta_rad) = if real >= 0.0 {
        let b = modulus + real;
        (if b > 0.0 { loss * loss / b } else { 0.0 }, b)
    } else {
        let a = modulus - real;
        (a, loss * loss / a)
    };
    let scale = params.carrier_angular_freq / (SQRT_2 * CODATA.light_speed);
    Ok((scale * alpha_rad.sqrt(), scale * beta_rad.sqrt()))
}

/// Complex gain `exp(-alpha z) exp(-j beta z)` across the slab.
pub fn channel_gain(n_e: f64, params: &ChannelParams) -> Result<Complex64> {
    let (alpha, beta) = attenuation_phase_coefficients(n_e, params)?;
    let z = params.sheath_thickness;
    Ok(Complex64::from_polar((-alpha * z).exp(), -beta * z))
}

/// Thickness for which `|gain|` at `density_max` equals `min_gain`.
///
/// `|gain| = exp(-alpha z)` is strictly decreasing in `z`, so the root is
/// `-ln(min_gain)/alpha_max`.
pub fn calibrate_thickness(params: &ChannelParams, min_gain: f64) -> Result<f64> {
    if !(min_gain > 0.0 && min_gain < 1.0) {
        return Err(Error::Config(format!("min_gain must lie in (0, 1), got {min_gain}")));
    }
    let (alpha_max, _) = attenuation_phase_coefficients(params.density_max, params)?;
    if alpha_max <= 0.0 {
        return Err(Error::Config(
            "lossless channel cannot be calibrated to a fade depth".into(),
        ));
    }
    Ok(-min_gain.ln() / alpha_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Sinusoid,
    LinearSweep,
    Constant,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Profile::Sinusoid),
            "linear_sweep" => Ok(Profile::LinearSweep),
            "constant" => Ok(Profile::Constant),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }
}

/// Electron-density time series, one value per symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityTrajectory {
    pub profile: Profile,
    /// Hz, sinusoid only.
    pub oscillation_freq: f64,
    /// rad, sinusoid only.
    pub phase_offset: f64,
    pub length: usize,
    /// symbols/s
    pub symbol_rate: f64,
    /// Position inside the density range for the constant profile: 0 is
    /// `density_min`, 1 is `density_max`.
    pub level: f64,
}

impl DensityTrajectory {
    pub fn sinusoid(length: usize, oscillation_freq: f64, symbol_rate: f64) -> Self {
        DensityTrajectory {
            profile: Profile::Sinusoid,
            oscillation_freq,
            phase_offset: 0.0,
            length,
            symbol_rate,
            level: 0.0,
        }
    }

    pub fn constant(length: usize, level: f64) -> Self {
        DensityTrajectory {
            profile: Profile::Constant,
            oscillation_freq: 0.0,
            phase_offset: 0.0,
            length,
            symbol_rate: 1.0,
            level,
        }
    }

    pub fn linear_sweep(length: usize) -> Self {
        DensityTrajectory {
            profile: Profile::LinearSweep,
            oscillation_freq: 0.0,
            phase_offset: 0.0,
            length,
            symbol_rate: 1.0,
            level: 0.0,
        }
    }
}

/// Samples the density trajectory. The sinusoid oscillates about the
/// arithmetic midpoint of the range and touches both ends once per period.
pub fn density_trajectory(traj: &DensityTrajectory, params: &ChannelParams) -> Result<Vec<f64>> {
    if traj.length == 0 {
        return Err(Error::Config("trajectory length must be >= 1".into()));
    }
    let (lo, hi) = (params.density_min, params.density_max);
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let m = traj.length;
    let values: Vec<f64> = match traj.profile {
        Profile::Constant => {
            if !(0.0..=1.0).contains(&traj.level) {
                return Err(Error::Config(format!(
                    "constant level must lie in [0, 1], got {}",
                    traj.level
                )));
            }
            vec![lo + traj.level * (hi - lo); m]
        }
        Profile::LinearSweep => (0..m)
            .map(|i| {
                if m == 1 || i == 0 {
                    lo
                } else if i == m - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (m - 1) as f64
                }
            })
            .collect(),
        Profile::Sinusoid => {
            if traj.oscillation_freq.is_nan() || traj.oscillation_freq <= 0.0 {
                return Err(Error::Config(
                    "sinusoid profile needs a positive oscillation frequency".into(),
                ));
            }
            if traj.symbol_rate.is_nan() || traj.symbol_rate <= 0.0 {
                return Err(Error::Config("symbol rate must be positive".into()));
            }
            let step = 2.0 * PI * traj.oscillation_freq / traj.symbol_rate;
            (0..m)
                .map(|i| (mid + half * (step * i as f64 + traj.phase_offset).sin()).clamp(lo, hi))
                .collect()
        }
    };
    Ok(values)
}

/// Gains along a trajectory.
pub fn gain_trajectory(traj: &DensityTrajectory, params: &ChannelParams) -> Result<Vec<Complex64>> {
    density_trajectory(traj, params)?
        .into_iter()
        .map(|n| channel_gain(n, params))
        .collect()
}

/// Worst relative disagreement between `beta - j alpha` and
/// `(omega/c) sqrt(eps_r)` over `points` log-uniform densities in the range.
pub fn consistency_check(params: &ChannelParams, points: usize) -> Result<f64> {
    let (lo, hi) = (params.density_min.ln(), params.density_max.ln());
    let mut worst: f64 = 0.0;
    for i in 0..points {
        let t = if points > 1 { i as f64 / (points - 1) as f64 } else { 0.0 };
        let n_e = (lo + t * (hi - lo)).exp();
        let (alpha, beta) = attenuation_phase_coefficients(n_e, params)?;
        let k = params.carrier_angular_freq / CODATA.light_speed
            * dielectric_coefficient(n_e, params)?.sqrt();
        let rel = (Complex64::new(beta, -alpha) - k).norm() / k.norm();
        worst = worst.max(rel);
    }
    Ok(worst)
}
