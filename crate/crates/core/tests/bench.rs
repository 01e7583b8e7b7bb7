mod common;

use logoprompt_core::bench::*;
use logoprompt_core::error::Error;
use logoprompt_core::image::Image;
use logoprompt_core::prompts::ContextInit;

fn small_dataset() -> SyntheticDataset {
    let spec = DatasetSpec {
        num_classes: 6,
        train_per_class: 8,
        test_per_class: 10,
        ..Default::default()
    };
    generate_dataset(&spec, 3).unwrap()
}

fn with_steps(method: Method, steps: usize) -> MethodConfig {
    let mut cfg = MethodConfig::for_method(method);
    cfg.budget.steps = steps;
    cfg.budget.batch_size = 8;
    cfg
}

fn zero_shot_accuracy(ds: &SyntheticDataset) -> f64 {
    let enc = common::pretrained();
    let images: Vec<&Image> = ds.test.iter().map(|li| &li.image).collect();
    let pred = enc.zero_shot_predict(&images, &ds.classes).unwrap();
    let hits = pred.iter().zip(&ds.test).filter(|(p, li)| **p == li.label).count();
    percent(hits, pred.len())
}

#[test]
fn missing_encoder_is_a_state_error() {
    let ds = small_dataset();
    let err = run_protocol(None, &ds, &SplitPlan::FewShot { shots: 1 }, &MethodConfig::default(), &[0]).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
    assert!(err.to_string().contains("logoprompt pretrain"));
}

#[test]
fn impossible_dataset_specs_are_config_errors() {
    for spec in [
        DatasetSpec { num_classes: 17, ..Default::default() },
        DatasetSpec { num_classes: 1, ..Default::default() },
        DatasetSpec { test_per_class: 0, ..Default::default() },
        DatasetSpec { image_size: 4, ..Default::default() },
    ] {
        assert!(matches!(generate_dataset(&spec, 0), Err(Error::Config { .. })), "{spec:?}");
    }
    let ds = small_dataset();
    let too_many_shots = SplitPlan::FewShot { shots: 16 };
    let err = run_protocol(Some(common::pretrained()), &ds, &too_many_shots, &with_steps(Method::CoopBaseline, 1), &[0]);
    assert!(err.is_err());
}

#[test]
fn zeroshot_takes_no_steps_and_changes_nothing() {
    let enc = common::pretrained();
    let ds = small_dataset();
    let before = enc.checksum();
    let plan = SplitPlan::FewShot { shots: 2 };
    let cfg = MethodConfig::for_method(Method::Zeroshot);
    let r = run_protocol(Some(enc), &ds, &plan, &cfg, &[0, 1]).unwrap();
    let fresh = cfg.resolved(&plan).learner(enc, &ds.classes, 0).unwrap().trainable_checksum();
    for row in &r.per_seed {
        assert_eq!(row.steps, 0);
        assert_eq!(row.trainable_checksum, fresh);
        assert_eq!(row.encoder_checksum, before);
    }
    assert_eq!(r.per_seed[0].accuracy, r.per_seed[1].accuracy);
    assert_eq!(enc.checksum(), before);
}

#[test]
fn untrained_template_coop_equals_zeroshot() {
    let enc = common::pretrained();
    let ds = small_dataset();
    for plan in [SplitPlan::FewShot { shots: 2 }, SplitPlan::BaseToNew { shots: 2, rule: SplitRule::EvenOdd }] {
        let zs = run_protocol(Some(enc), &ds, &plan, &MethodConfig::for_method(Method::Zeroshot), &[4]).unwrap();
        let mut coop = with_steps(Method::CoopBaseline, 0);
        coop.ctx_init = ContextInit::Template;
        let co = run_protocol(Some(enc), &ds, &plan, &coop, &[4]).unwrap();
        let (a, b) = (&zs.per_seed[0], &co.per_seed[0]);
        assert_eq!((a.accuracy, a.accuracy_base, a.accuracy_new), (b.accuracy, b.accuracy_base, b.accuracy_new));
        assert_eq!(a.trainable_checksum, b.trainable_checksum);
    }
}

#[test]
fn base_to_new_never_reads_new_class_training_images() {
    let enc = common::pretrained();
    let ds = small_dataset();
    let plan = SplitPlan::BaseToNew { shots: 4, rule: SplitRule::EvenOdd };
    let (_, new) = base_new_split(ds.num_classes(), SplitRule::EvenOdd);
    let mut poisoned = ds.clone();
    for li in poisoned.train.iter_mut().filter(|li| new.contains(&li.label)) {
        li.image = Image::filled(li.image.height(), li.image.width(), [1.0, 0.0, 1.0]);
    }
    for method in [Method::CoopBaseline, Method::Logoprompt] {
        let cfg = with_steps(method, 6);
        let a = run_protocol(Some(enc), &ds, &plan, &cfg, &[0, 1]).unwrap();
        let b = run_protocol(Some(enc), &poisoned, &plan, &cfg, &[0, 1]).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap(), "{method}");
        for row in &a.per_seed {
            let h = row.harmonic_mean.unwrap();
            assert_eq!(h, round2(harmonic_mean(row.accuracy_base.unwrap(), row.accuracy_new.unwrap())));
        }
    }
}

#[test]
fn domain_shift_trains_clean_and_tests_corrupted() {
    let enc = common::pretrained();
    let ds = small_dataset();
    let corruption = Corruption::GaussianNoise(0.2);
    let mut cfg = with_steps(Method::CoopBaseline, 10);
    // few-shot and domain-shift default to different context lengths
    cfg.m = Some(4);
    let clean = run_protocol(Some(enc), &ds, &SplitPlan::FewShot { shots: 4 }, &cfg, &[2]).unwrap();
    let shift = run_protocol(Some(enc), &ds, &SplitPlan::DomainShift { shots: 4, corruption }, &cfg, &[2]).unwrap();
    let (c, s) = (&clean.per_seed[0], &shift.per_seed[0]);
    assert_eq!(s.accuracy_source, c.accuracy);
    assert_eq!(s.trainable_checksum, c.trainable_checksum);
    assert_eq!(s.final_loss, c.final_loss);

    // the target score is the clean-trained learner on the corrupted test split
    let corrupted = corrupt(&ds, corruption).unwrap();
    let direct = run_protocol(
        Some(enc),
        &SyntheticDataset { test: corrupted.test.clone(), ..ds.clone() },
        &SplitPlan::FewShot { shots: 4 },
        &cfg,
        &[2],
    )
    .unwrap();
    assert_eq!(s.accuracy, direct.per_seed[0].accuracy);
}

#[test]
fn zero_noise_is_identity_and_noise_hurts() {
    let spec = DatasetSpec { test_per_class: 25, ..Default::default() };
    let ds = generate_dataset(&spec, 0).unwrap();
    let same = corrupt(&ds, Corruption::GaussianNoise(0.0)).unwrap();
    for (a, b) in ds.test.iter().zip(&same.test).chain(ds.train.iter().zip(&same.train)) {
        assert_eq!(a.image.data(), b.image.data());
    }
    let clean = zero_shot_accuracy(&ds);
    let noisy = zero_shot_accuracy(&corrupt(&ds, Corruption::GaussianNoise(0.1)).unwrap());
    eprintln!("zero-shot accuracy clean {clean:.2} sigma=0.1 {noisy:.2}");
    assert!(noisy < clean, "clean {clean} noisy {noisy}");
}

#[test]
fn linear_probe_separates_the_classes() {
    let ds = generate_dataset(&DatasetSpec { test_per_class: 25, ..Default::default() }, 1).unwrap();
    let acc = linear_probe_accuracy(common::pretrained(), &ds, 300, 1.0).unwrap();
    eprintln!("linear probe accuracy {acc:.2}");
    assert!(acc >= 90.0, "linear probe accuracy {acc}");
}

#[test]
fn reports_are_byte_reproducible() {
    let enc = common::pretrained();
    let ds = small_dataset();
    let plan = SplitPlan::FewShot { shots: 2 };
    let cfg = with_steps(Method::LogopromptTunableVp, 4);
    let a = run_protocol(Some(enc), &ds, &plan, &cfg, &[0]).unwrap();
    let b = run_protocol(Some(enc), &ds, &plan, &cfg, &[0]).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
