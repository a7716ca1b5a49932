mod common;

use common::{bench, model_config};
use mmfuse::fusion::Strategy;
use mmfuse::model::Model;
use mmfuse::synthbench::gen_dataset;
use mmfuse::trainer::{early_exit_indicator, fit, replay_exit, ExitRule, TrainConfig};
use proptest::prelude::*;

#[test]
fn scripted_sequences_exit_where_expected() {
    // 1.2/0.9 > 1, then 1.0/(0.9*1.1) just above 1, then 0.6/(0.9*16/15) < 1.
    let decaying = [1.0, 1.2, 1.0, 0.6, 0.5];
    assert_eq!(
        replay_exit(&decaying, 0.9, 1, ExitRule::Converged).unwrap(),
        Some(4)
    );
    assert_eq!(
        replay_exit(&decaying, 0.9, 1, ExitRule::Rising).unwrap(),
        Some(2)
    );

    let spiking = [1.0, 0.5, 0.5, 2.0];
    assert_eq!(
        replay_exit(&spiking, 0.9, 1, ExitRule::Rising).unwrap(),
        Some(4)
    );
    assert_eq!(
        replay_exit(&spiking, 0.9, 1, ExitRule::Converged).unwrap(),
        Some(2)
    );
    // Warmup skips the first comparison.
    assert_eq!(
        replay_exit(&spiking, 0.9, 2, ExitRule::Converged).unwrap(),
        Some(3)
    );

    let flat = [1.0; 6];
    assert_eq!(
        replay_exit(&flat, 0.9, 1, ExitRule::Converged).unwrap(),
        None
    );
    assert_eq!(
        replay_exit(&flat, 1.0, 1, ExitRule::Converged).unwrap(),
        Some(2)
    );
}

#[test]
fn indicator_edge_cases() {
    assert!(early_exit_indicator(&[], 1.0, 0.9).is_err());
    assert!(early_exit_indicator(&[1.0], 1.0, 0.0).is_err());
    assert_eq!(early_exit_indicator(&[0.0, 0.0], 0.0, 0.9).unwrap(), 0.0);
    assert_eq!(
        early_exit_indicator(&[0.0], 1e-9, 0.9).unwrap(),
        f64::INFINITY
    );
    let i = early_exit_indicator(&[2.0, 4.0], 1.5, 0.5).unwrap();
    assert!((i - 1.0).abs() < 1e-15);
}

#[test]
fn real_run_matches_replay_of_its_own_history() {
    let spec = bench(3, 96, 32, 8);
    let data = gen_dataset(&spec).unwrap();
    let mut model = Model::<f32>::new(model_config(&spec, 3, Strategy::SelfGated, 32, 8)).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        early_exit: true,
        tau: 1.0,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &spec, &data.train, &data.test, &cfg).unwrap();
    let mut exited = 0;
    for (m, h) in &report.history.modalities {
        let replayed = replay_exit(&h.gbar, cfg.tau, cfg.exit_warmup, cfg.exit_rule).unwrap();
        assert_eq!(replayed, report.exit_epochs[m], "{m}: {:?}", h.gbar);
        assert_eq!(h.exit_epoch, report.exit_epochs[m]);
        match h.exit_epoch {
            Some(e) => {
                exited += 1;
                assert_eq!(h.gbar.len(), e, "{m} kept recording after exiting");
                assert!(!h.active);
                for rec in &report.epochs {
                    assert_eq!(
                        rec.active.contains(m),
                        rec.epoch < e,
                        "{m} epoch {}",
                        rec.epoch
                    );
                }
            }
            None => assert_eq!(h.gbar.len(), cfg.epochs),
        }
    }
    assert!(exited > 0, "no modality exited with tau = 1");
}

fn naive_exit(gbar: &[f64], tau: f64, warmup: usize, converged: bool) -> Option<usize> {
    (warmup.max(1)..gbar.len())
        .find(|&j| {
            let mean: f64 = gbar[..j].iter().sum::<f64>() / j as f64;
            (gbar[j] <= tau * mean) == converged
        })
        .map(|j| j + 1)
}

proptest! {
    #[test]
    fn replay_agrees_with_a_direct_scan(
        gbar in prop::collection::vec(0.01f64..10.0, 1..12),
        tau in 0.3f64..1.5,
        warmup in 1usize..4,
        converged in any::<bool>(),
    ) {
        let rule = if converged { ExitRule::Converged } else { ExitRule::Rising };
        prop_assert_eq!(replay_exit(&gbar, tau, warmup, rule).unwrap(), naive_exit(&gbar, tau, warmup, converged));
    }

    #[test]
    fn scaling_magnitudes_does_not_change_the_exit(
        gbar in prop::collection::vec(0.01f64..10.0, 2..10),
        scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0]),
    ) {
        let scaled: Vec<f64> = gbar.iter().map(|g| g * scale).collect();
        prop_assert_eq!(
            replay_exit(&gbar, 0.9, 1, ExitRule::Converged).unwrap(),
            replay_exit(&scaled, 0.9, 1, ExitRule::Converged).unwrap()
        );
    }
}
