use cycle_ews::experiment::{process_run, run_ensemble, ExperimentConfig};
use cycle_ews::features::{read_feature_csv, write_feature_csv};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        n_runs: 24,
        master_seed: 11,
        ..Default::default()
    }
}

#[test]
fn labels_follow_breakdown_detection() {
    let outs = run_ensemble(&small()).unwrap();
    assert_eq!(outs.len(), 24);
    for (i, o) in outs.iter().enumerate() {
        assert_eq!(o.record.run_id, i);
        let b = o.breakdown.as_ref().expect("no divergence at default settings");
        assert_eq!(o.record.features.label, b.breakdown);
        let d = o.record.d_min.unwrap();
        assert!((0.25..0.9).contains(&d));
        if b.breakdown {
            // a long segment needs the amplitude to have fallen below the fold
            assert!(b.onset_duration.unwrap() > 0.75 * 225.0);
            // truncation keeps only jumps up to the onset
            assert!(o.n_jumps <= b.onset_segment.unwrap() + 1);
        }
    }
    assert!(outs.iter().any(|o| o.record.features.label));
    assert!(outs.iter().any(|o| !o.record.features.label));
}

#[test]
fn single_runs_match_the_ensemble() {
    let cfg = small();
    let outs = run_ensemble(&cfg).unwrap();
    for i in [0, 7, 23] {
        let one = process_run(&cfg, i).unwrap();
        assert_eq!(format!("{:?}", one.record), format!("{:?}", outs[i].record));
    }
}

#[test]
fn feature_table_round_trips_through_csv() {
    let outs = run_ensemble(&small()).unwrap();
    let recs: Vec<_> = outs.into_iter().map(|o| o.record).collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    write_feature_csv(&p, &recs).unwrap();
    let back = read_feature_csv(&p).unwrap();
    assert_eq!(format!("{back:?}"), format!("{recs:?}"));
}
