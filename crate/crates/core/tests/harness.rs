use leat::harness::report::{read_results_csv, RESULTS_FILE, SUMMARY_FILE};
use leat::harness::{emit_reports, summarize, Experiment, ExperimentConfig, Scenario};
use leat::ObjectiveKind;

fn config(count: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.count = count;
    cfg
}

#[test]
fn row_count_covers_every_scenario_model_and_objective() {
    let exp = Experiment::new(config(5)).unwrap();
    let report = exp.run().unwrap();
    // white and gray evaluate the 4 attacked models, black the holdout.
    assert_eq!(report.records.len(), 5 * (4 + 4 + 1) * 2);
    assert_eq!(report.summaries.len(), 3 * 2);
    assert_eq!(report.latents.len(), 4 * 2);
    for s in &report.summaries {
        assert!(s.dsr.e_dsr <= s.dsr.per_model.iter().cloned().fold(1.0, f64::min));
        assert!((0.0..=1.0).contains(&s.dsr.avg_dsr));
    }
    let black = report
        .summaries
        .iter()
        .find(|s| s.scenario == Scenario::BlackBox)
        .unwrap();
    assert_eq!(black.models, vec!["holdout".to_string()]);
}

#[test]
fn summary_recomputes_from_results_csv() {
    let exp = Experiment::new(config(4)).unwrap();
    let report = exp.run().unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&report, exp.config(), dir.path()).unwrap();
    let records = read_results_csv(&dir.path().join(RESULTS_FILE)).unwrap();
    assert_eq!(records, report.records);
    assert_eq!(summarize(&records).unwrap(), report.summaries);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert!(summary["metadata"]["metric_aggregation"].is_string());
    assert_eq!(summary["scenarios"].as_array().unwrap().len(), 6);
}

#[test]
fn runs_are_deterministic_and_parallelism_independent() {
    let a = Experiment::new(config(6)).unwrap().run().unwrap();
    let mut serial = config(6);
    serial.workers = 1;
    let b = Experiment::new(serial).unwrap().run().unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.latents, b.latents);
}

#[test]
fn holdout_is_never_queried_during_attack() {
    let exp = Experiment::new(config(3)).unwrap();
    let holdout = exp.holdout_model().unwrap().clone();
    holdout.reset_counters();
    for kind in [ObjectiveKind::ImageAttack, ObjectiveKind::Leat] {
        exp.perturb_all(kind).unwrap();
    }
    assert_eq!((holdout.encoder_calls(), holdout.generator_calls()), (0, 0));
}

#[test]
fn image_attack_sees_only_known_attributes() {
    let exp = Experiment::new(config(2)).unwrap();
    let leat::ObjectiveSpec::ImageAttack { attributes } = exp.objective_spec(ObjectiveKind::ImageAttack) else {
        panic!("expected image attack spec");
    };
    let attack_models = exp.attack_models();
    assert_eq!(attributes.len(), attack_models.len());
    for (attrs, model) in attributes.iter().zip(&attack_models) {
        let idx = exp.models().iter().position(|m| m.name() == model.name()).unwrap();
        let set = exp.attributes(idx);
        assert_eq!(attrs.as_slice(), set.known());
        assert!(attrs.iter().all(|a| !set.unknown().contains(a)));
    }
}

#[test]
fn one_perturbation_serves_every_scenario() {
    let exp = Experiment::new(config(3)).unwrap();
    let (perts, _) = exp.perturb_all(ObjectiveKind::Leat).unwrap();
    let white = exp.evaluate(Scenario::WhiteBox, ObjectiveKind::Leat, &perts).unwrap();
    let gray = exp.evaluate(Scenario::GrayBox, ObjectiveKind::Leat, &perts).unwrap();
    assert_eq!(white.len(), gray.len());
    // Different attribute pools give different metrics for the same eta.
    assert_ne!(white, gray);
    assert!(exp.evaluate(Scenario::WhiteBox, ObjectiveKind::Leat, &perts[..2]).is_err());
}

#[test]
fn leat_eta_ignores_attribute_pools_but_image_attack_does_not() {
    let run = |attribute_seed| {
        let mut cfg = config(2);
        cfg.attribute_seed = attribute_seed;
        let exp = Experiment::new(cfg).unwrap();
        (
            exp.perturb(ObjectiveKind::Leat, 1).unwrap().eta,
            exp.perturb(ObjectiveKind::ImageAttack, 1).unwrap().eta,
        )
    };
    let (leat_a, image_a) = run(1);
    let (leat_b, image_b) = run(2);
    assert_eq!(leat_a, leat_b);
    assert_ne!(image_a, image_b);
}

#[test]
fn perturbations_respect_the_budget() {
    let exp = Experiment::new(config(4)).unwrap();
    for kind in [ObjectiveKind::ImageAttack, ObjectiveKind::Leat] {
        let (perts, _) = exp.perturb_all(kind).unwrap();
        for (x, p) in exp.images().iter().zip(&perts) {
            assert!(p.eta.max_abs() <= 0.05 + leat::attack::BUDGET_TOLERANCE);
            assert!(x.add(&p.eta).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn calibration_noise_is_below_default_thresholds() {
    let entries = Experiment::new(config(10)).unwrap().calibrate().unwrap();
    assert_eq!(entries.len(), 5);
    for e in entries {
        assert_eq!(e.null_success_rate, 0.0);
        assert!(e.l2_image.min <= e.l2_image.p50 && e.l2_image.p50 <= e.l2_image.max);
    }
}
