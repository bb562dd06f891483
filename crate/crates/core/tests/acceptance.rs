//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with
//! `cargo test -p sheath-smn --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sheath_smn::bench::{self, ExperimentConfig, Receiver, SmnDiagnostics};
use sheath_smn::em::PosteriorMatrix;
use sheath_smn::link::{self, build_constellation, build_frame, transmit};
use sheath_smn::net::{self, Architecture};
use sheath_smn::physics::{self, ChannelParams};
use sheath_smn::rng::{substream, Role};
use sheath_smn::{baselines, Result};

const SEED: u64 = 1;
/// Fade depth used for the receiver studies; the default depth leaves even
/// the genie receiver near 0.38 SER at 14 dB.
const MIN_GAIN: f64 = 0.3;

const PHYSICS_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const ELBO_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-9;
const CALIBRATION_SYMBOLS: usize = 100_000;
const SMN_VS_DNN_256: f64 = 2.0;
const SMN_VS_DNN_16: f64 = 1.5;
const MAX_POSTERIOR_MIN: f64 = 0.95;
/// Calibrated once on the pinned seed (0.092 measured) and frozen.
const RMSE_20DB_MAX: f64 = 0.12;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, passed: bool, detail: String) {
        let line = format!("{} {id} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((passed, line));
    }

    fn info(&self, text: String) {
        println!("     {text}");
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn acceptance_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: SEED,
        min_gain: MIN_GAIN,
        ..ExperimentConfig::default()
    }
}

/// Relative permittivity written out directly from the plasma formulas.
fn eps_oracle(n_e: f64, p: &ChannelParams) -> Complex64 {
    let (e, eps0, me) = (1.602176634e-19, 8.8541878128e-12, 9.1093837015e-31);
    let wp2 = n_e * e * e / (eps0 * me);
    let (w, nu) = (p.carrier_angular_freq, p.collision_angular_freq);
    let x = wp2 / (w * w + nu * nu);
    Complex64::new(1.0 - x, -(nu * nu / w) * x)
}

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let p = ChannelParams::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (lo, hi) = (p.density_min.ln(), p.density_max.ln());
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(lo..hi).exp();
        let (alpha, beta) = physics::attenuation_phase_coefficients(n, &p).unwrap();
        let k = p.carrier_angular_freq / 299_792_458.0 * eps_oracle(n, &p).sqrt();
        worst = worst.max((Complex64::new(beta, -alpha) - k).norm() / k.norm());
    }
    let elapsed = start.elapsed();
    report.record(
        1,
        "physics consistency",
        worst < PHYSICS_TOL && within(elapsed, Duration::from_secs(1)),
        format!("worst relative error {worst:.2e} over 1000 log-uniform densities (< {PHYSICS_TOL:e}), {elapsed:.2?}"),
    );
}

fn criterion_2(report: &mut Report) {
    let start = Instant::now();
    // 16QAM gives 290 parameters to sample 100 from.
    let c = build_constellation(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let model = net::init_model(&c, Architecture::default(), 0.5, &mut rng).unwrap();
    let n = 128;
    let samples: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..16).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let w = PosteriorMatrix::from_rows(&rows).unwrap();
    let grad = net::gradients(&model, &samples, &w).unwrap();
    let p0 = model.params();
    let mut indices: Vec<usize> = (0..p0.len()).collect();
    for i in 0..100 {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let loss_at = |params: &[f64]| {
        let mut m = model.clone();
        m.set_params(params).unwrap();
        net::weighted_loss(&m, &samples, &w).unwrap()
    };
    let mut worst: f64 = 0.0;
    for &j in &indices[..100] {
        let mut p = p0.clone();
        p[j] = p0[j] + FD_STEP;
        let up = loss_at(&p);
        p[j] = p0[j] - FD_STEP;
        let down = loss_at(&p);
        let fd = (up - down) / (2.0 * FD_STEP);
        worst = worst.max((fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(GRAD_FLOOR));
    }
    let elapsed = start.elapsed();
    report.record(
        2,
        "gradient check",
        worst < GRAD_TOL && within(elapsed, Duration::from_secs(10)),
        format!("worst relative error {worst:.2e} over 100 of {} parameters (< {GRAD_TOL:e}), {elapsed:.2?}", p0.len()),
    );
}

fn q_function(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

fn criterion_4(report: &mut Report) {
    let start = Instant::now();
    let c = build_constellation(2).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, snr) in [0.0, 4.0, 8.0].into_iter().enumerate() {
        let frame = build_frame(CALIBRATION_SYMBOLS, CALIBRATION_SYMBOLS, 4, &mut substream(SEED, Role::Frame, 100 + i as u32)).unwrap();
        let gains = vec![Complex64::new(1.0, 0.0); CALIBRATION_SYMBOLS];
        let var = link::snr_to_noise_variance(snr, 1.0);
        let rx = transmit(&frame, &c, &gains, var, &mut substream(SEED, Role::Noise, 100 + i as u32)).unwrap();
        let d = baselines::genie_ml(&rx, &c).unwrap().decisions;
        let count = bench::compute_ser(&d, frame.symbols(), frame.payload_positions()).unwrap();
        let q = q_function(10f64.powf(snr / 10.0).sqrt());
        let theory = 2.0 * q - q * q;
        let lib_theory = baselines::qpsk_theory_ser(snr);
        let se = (theory * (1.0 - theory) / count.symbols as f64).sqrt();
        let z = (count.ser() - theory) / se;
        ok &= z.abs() <= 3.0 && (lib_theory - theory).abs() < 1e-9 * theory;
        parts.push(format!("{snr} dB: {:.4} vs {theory:.4} ({z:+.2} s.e.)", count.ser()));
    }
    let elapsed = start.elapsed();
    report.record(
        4,
        "ML calibration",
        ok && within(elapsed, Duration::from_secs(30)),
        format!("{}, {elapsed:.2?}", parts.join("; ")),
    );
}

fn ser_of(records: &[bench::SerRecord], receiver: Receiver, interval: usize) -> f64 {
    records
        .iter()
        .find(|r| r.receiver == receiver && r.pilot_interval == interval)
        .map(|r| r.ser)
        .unwrap_or(f64::NAN)
}

fn criterion_5(report: &mut Report, dir: &Path) -> Result<Vec<SmnDiagnostics>> {
    let start = Instant::now();
    let config = ExperimentConfig {
        snr_db: vec![14.0],
        pilot_intervals: vec![16, 256],
        ..acceptance_config()
    };
    let (sweep, _) = bench::write_ser_sweep(&config, dir)?;
    let elapsed = start.elapsed();
    let r = &sweep.records;
    let smn256 = ser_of(r, Receiver::Smn, 256);
    let dnn256 = ser_of(r, Receiver::Dnn, 256);
    let dnn16 = ser_of(r, Receiver::Dnn, 16);
    for rec in r {
        report.info(format!(
            "{:<12} interval {:>3}: SER {:.4} ({} errors / {} symbols)",
            rec.receiver.as_str(),
            rec.pilot_interval,
            rec.ser,
            rec.errors,
            rec.symbols
        ));
    }
    let in_time = within(elapsed, Duration::from_secs(600));
    report.record(
        5,
        "(a) SMN@256 vs DNN@256",
        smn256 * SMN_VS_DNN_256 <= dnn256 && in_time,
        format!("SMN {smn256:.4}, DNN {dnn256:.4}, need SMN <= DNN/{SMN_VS_DNN_256}, {elapsed:.1?}"),
    );
    report.record(
        5,
        "(b) SMN@256 vs DNN@16",
        smn256 <= SMN_VS_DNN_16 * dnn16 && in_time,
        format!("SMN {smn256:.4}, DNN {dnn16:.4}, need SMN <= {SMN_VS_DNN_16} x DNN, {elapsed:.1?}"),
    );

    // Same frames, pretraining only: separates the pilot fit from the EM rounds.
    let pretrained = bench::run_ser_sweep(&ExperimentConfig {
        em_iterations: 0,
        snapshot_em_iterations: vec![],
        pilot_intervals: vec![256],
        receivers: vec![Receiver::Smn],
        ..config
    })?;
    report.info(format!(
        "SMN@256 after pretraining only (no EM rounds): SER {:.4}",
        pretrained.records[0].ser
    ));
    Ok(sweep.diagnostics)
}

fn run_snapshots_and_fading(dir: &Path) -> Result<(bench::SnapshotReport, Vec<bench::FadingResult>)> {
    let config = acceptance_config();
    let (snap, _) = bench::write_learning_snapshots(&config, dir)?;
    let (fading, _) = bench::write_fading_estimation(&config, dir)?;
    Ok((snap, fading))
}

fn criterion_6(report: &mut Report, snap: &bench::SnapshotReport) {
    let pilots = snap.scenario.frame.pilot_positions().len();
    let fin = snap.snapshots.last().unwrap();
    let mmp = fin.mean_max_posterior.unwrap_or(f64::NAN);
    report.record(
        6,
        "snapshot decisions",
        pilots == 16 && snap.snapshots.len() == 6 && mmp > MAX_POSTERIOR_MIN,
        format!(
            "{pilots} pilots, {} panels, final mean max-posterior {mmp:.4} (> {MAX_POSTERIOR_MIN})",
            snap.snapshots.len()
        ),
    );
}

fn criterion_7(report: &mut Report, fading: &[bench::FadingResult]) {
    let by_snr: BTreeMap<i64, f64> = fading.iter().map(|f| (f.snr_db.round() as i64, f.rmse)).collect();
    let (r20, r11, r5) = (by_snr[&20], by_snr[&11], by_snr[&5]);
    report.record(
        7,
        "fading estimation",
        r20 <= r11 && r11 <= r5 && r20 < RMSE_20DB_MAX,
        format!("RMSE 20 dB {r20:.4}, 11 dB {r11:.4}, 5 dB {r5:.4}; need nondecreasing and 20 dB < {RMSE_20DB_MAX}"),
    );
}

fn criterion_3(
    report: &mut Report,
    sweep: &[SmnDiagnostics],
    snap: &bench::SnapshotReport,
    fading: &[bench::FadingResult],
) {
    let mut gains = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for d in sweep {
        gains.push(d.min_estep_gain);
        rows.push(d.max_row_sum_error);
    }
    gains.push(snap.trace.min_estep_gain());
    rows.push(snap.max_row_sum_error);
    for f in fading {
        gains.push(f.min_estep_gain);
        rows.push(f.max_row_sum_error);
    }
    let mut rises: Vec<Option<f64>> = sweep.iter().map(|d| d.max_mstep_increase).collect();
    rises.push(snap.trace.max_mstep_increase());
    rises.extend(fading.iter().map(|f| f.max_mstep_increase));
    let worst_rise = rises.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    report.info(format!("largest change of the weighted residual across an M-step: {worst_rise:.3e}"));
    let runs = gains.len();
    let missing = gains.iter().filter(|g| g.is_none()).count();
    let min_gain = gains.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let max_row = rows.iter().cloned().fold(0.0, f64::max);
    report.record(
        3,
        "EM soundness",
        missing == 0 && min_gain >= -ELBO_TOL && max_row <= ROW_SUM_TOL,
        format!("{runs} fits: smallest E-step change of the bound {min_gain:.3e} (>= -{ELBO_TOL:e}), worst row sum error {max_row:.1e}"),
    );
}

fn files_in(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn criterion_8(report: &mut Report, first: &Path, second: &Path) -> Result<()> {
    run_snapshots_and_fading(second)?;
    let small = ExperimentConfig {
        trials: 2,
        snr_db: vec![14.0],
        pilot_intervals: vec![256],
        ..acceptance_config()
    };
    let a = first.join("sweep");
    let b = second.join("sweep");
    bench::write_ser_sweep(&small, &a)?;
    bench::write_ser_sweep(&ExperimentConfig { workers: 2, ..small }, &b)?;
    let (fa, fb) = (files_in(first), files_in(second));
    let (sa, sb) = (files_in(&a), files_in(&b));
    // The sweep repeat uses a different worker count, so its archived config differs.
    let identical = |x: &BTreeMap<String, Vec<u8>>, y: &BTreeMap<String, Vec<u8>>, skip: &str| {
        x.len() == y.len() && x.iter().all(|(k, v)| k == skip || y.get(k) == Some(v))
    };
    let same = identical(&fa, &fb, "") && identical(&sa, &sb, "config.toml");
    report.record(
        8,
        "determinism",
        same,
        format!(
            "{} snapshot/fading files and {} sweep files compared byte for byte",
            fa.len(),
            sa.len() - 1
        ),
    );
    if !same {
        report.info(format!("differing: {:?}", differing(&fa, &fb)));
    }
    Ok(())
}

fn differing(x: &BTreeMap<String, Vec<u8>>, y: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    x.iter().filter(|(k, v)| y.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

fn main() -> ExitCode {
    let mut report = Report { lines: Vec::new() };
    let work = tempfile::tempdir().expect("temp dir");
    let first = work.path().join("run1");
    let second = work.path().join("run2");

    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_4(&mut report);
    let sweep = criterion_5(&mut report, &work.path().join("ser")).expect("SER sweep");
    let (snap, fading) = run_snapshots_and_fading(&first).expect("snapshot and fading runs");
    criterion_6(&mut report, &snap);
    criterion_7(&mut report, &fading);
    criterion_3(&mut report, &sweep, &snap, &fading);
    criterion_8(&mut report, &first, &second).expect("repeat runs");

    let failed = report.lines.iter().filter(|(ok, _)| !ok).count();
    println!("acceptance: {} passed, {failed} failed", report.lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
