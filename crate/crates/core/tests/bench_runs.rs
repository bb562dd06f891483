use sheath_smn::bench::{self, ExperimentConfig, Receiver};
use sheath_smn::physics::Profile;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        frame_length: 512,
        snr_db: vec![30.0],
        pilot_intervals: vec![16],
        trials: 2,
        pretrain_steps: 300,
        em_iterations: 2,
        mstep_steps: 20,
        dnn_steps: 300,
        min_gain: 0.5,
        snapshot_interval: 32,
        snapshot_pretrain_steps: vec![50, 300],
        snapshot_em_iterations: vec![1, 2],
        fading_interval: 32,
        fading_snr_db: vec![30.0],
        curve_points: 20,
        ..ExperimentConfig::default()
    }
}

#[test]
fn static_channel_high_snr_is_error_free() {
    let cfg = ExperimentConfig {
        profile: Profile::Constant,
        level: 0.5,
        ..small()
    };
    let report = bench::run_ser_sweep(&cfg).unwrap();
    assert_eq!(report.records.len(), 4);
    for r in &report.records {
        assert_eq!(r.failed_trials, 0, "{}", r.error);
        assert_eq!(r.errors, 0, "{} made errors", r.receiver.as_str());
        assert_eq!(r.symbols, 2 * (512 - 32));
    }
}

#[test]
fn genie_lower_bounds_interpolation() {
    let cfg = ExperimentConfig {
        snr_db: vec![6.0, 12.0],
        pilot_intervals: vec![16, 64],
        receivers: vec![Receiver::Genie, Receiver::PilotInterp],
        ..small()
    };
    let report = bench::run_ser_sweep(&cfg).unwrap();
    for pair in report.records.chunks(2) {
        assert_eq!(pair[0].receiver, Receiver::Genie);
        assert!(pair[0].ser <= pair[1].ser, "{:?}", pair);
    }
}

#[test]
fn failing_cells_are_recorded_not_fatal() {
    // a single pilot per frame is too few for interpolation
    let cfg = ExperimentConfig {
        pilot_intervals: vec![512],
        receivers: vec![Receiver::Genie, Receiver::PilotInterp],
        ..small()
    };
    let report = bench::run_ser_sweep(&cfg).unwrap();
    assert_eq!(report.records[0].failed_trials, 0);
    assert_eq!(report.records[1].failed_trials, 2);
    assert!(report.records[1].error.contains("at least 2 pilots"));
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = ExperimentConfig {
        receivers: vec![Receiver::Smn, Receiver::Dnn],
        snr_db: vec![10.0],
        ..small()
    };
    let a = bench::run_ser_sweep(&ExperimentConfig { workers: 1, ..cfg.clone() }).unwrap();
    let b = bench::run_ser_sweep(&ExperimentConfig { workers: 3, ..cfg }).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn snapshots_have_six_panels() {
    let report = bench::run_learning_snapshots(&small()).unwrap();
    let stages: Vec<&str> = report.snapshots.iter().map(|s| s.stage).collect();
    assert_eq!(stages, ["raw", "pretrain", "pretrain", "em", "em", "final"]);
    assert!(report.snapshots[0].curves.is_none());
    assert!(report.snapshots[0].decisions.is_none());
    let last = report.snapshots.last().unwrap();
    assert_eq!(last.decisions.as_deref().unwrap(), sheath_smn::em::demodulate(&report.final_posterior));
    for s in &report.snapshots[1..] {
        let curves = s.curves.as_ref().unwrap();
        assert_eq!(curves.len(), 4);
        assert!(curves.iter().all(|c| c.len() == 20));
    }
}

#[test]
fn outputs_are_written_with_versioned_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        receivers: vec![Receiver::Genie],
        ..small()
    };
    let (_, files) = bench::write_ser_sweep(&cfg, dir.path()).unwrap();
    let ser = std::fs::read_to_string(&files[1]).unwrap();
    assert!(ser.starts_with("version,receiver,snr_db,pilot_interval,trials,symbols,errors,ser,"));
    let archived = ExperimentConfig::load(&files[0]).unwrap();
    assert_eq!(archived, cfg);

    let (results, files) = bench::write_fading_estimation(&cfg, dir.path()).unwrap();
    assert_eq!(results.len(), 1);
    assert!(results[0].rmse.is_finite());
    let samples = std::fs::read_to_string(&files[1]).unwrap();
    assert_eq!(samples.lines().count(), 1 + 512);
}
