use ndarray::{Array2, Array4};
use sherrylab::adapter::AdapterError;
use sherrylab::datamodel::ToyDataset;
use sherrylab::params::ParamGroup;
use sherrylab::textbank::PromptMode;
use sherrylab::trainer::{init_teacher_student, loss_and_grads, prepare_student, InitSource, TrainError};
use sherrylab::*;

fn toy(seed: u64) -> (ToyDataset, TextBank) {
    let toy = generate_toy_dataset(&ToySpec { seed, ..Default::default() }).unwrap();
    let names: Vec<String> = toy.prototypes.iter().map(|(n, _)| n.clone()).collect();
    let m = Array2::from_shape_fn((names.len(), 16), |(i, j)| toy.prototypes[i].1[j]);
    let bank = TextBank::from_vectors("toy", &names, m.view()).unwrap();
    (toy, bank)
}

fn train_batch(toy: &ToyDataset) -> (Array4<f64>, Vec<usize>) {
    let seen = toy.manifest.seen_index();
    let samples = &toy.manifest.train_samples;
    let mut batch = Array4::zeros((samples.len(), 1, 1, 16));
    for (i, s) in samples.iter().enumerate() {
        batch.slice_mut(ndarray::s![i, .., .., ..]).assign(&s.pixels((1, 1, 16)).unwrap());
    }
    (batch, samples.iter().map(|s| seen[s.class_name.as_str()]).collect())
}

fn seen_matrix(bank: &TextBank, toy: &ToyDataset) -> Array2<f64> {
    classifier_matrix(&bank.subset(&toy.manifest.seen_classes).unwrap()).unwrap().view().to_owned()
}

fn recipe(mode: TunabilityMode, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, learning_rate: 1e-2, tunability: mode, augmentation: false, seed, ..Default::default() }
}

#[test]
fn toy_run_reduces_alignment_loss() {
    let (toy, bank) = toy(0);
    let spec = EncoderSpec::identity((1, 1, 16), 16, 8);
    let (teacher, init) = init_teacher_student(InitSource::Toy { spec: &spec, seed: 0 }).unwrap();
    // 320 training samples in batches of 64 give 5 steps per epoch.
    let cfg = recipe(TunabilityMode::BackboneAdapter, 40, 0);
    let ckpt = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    assert_eq!(ckpt.run_log.len(), 40);

    let (batch, labels) = train_batch(&toy);
    let w = seen_matrix(&bank, &toy);
    let start = prepare_student(&init, &cfg, 8, 16).unwrap();
    let before = loss_and_grads(&start, &teacher, &batch, &labels, Some(w.view()), &cfg.loss).unwrap();
    let after = loss_and_grads(&ckpt.encoder, &teacher, &batch, &labels, Some(w.view()), &cfg.loss).unwrap();
    assert!(after.align < before.align, "{} -> {}", before.align, after.align);
    assert!(ckpt.run_log.last().unwrap().l_align < ckpt.run_log[0].l_align);
    for r in &ckpt.run_log {
        assert!((r.l_total - (r.l_align + cfg.loss.lambda * r.l_distill)).abs() < 1e-9);
        assert_eq!(r.tunable_param_count, count_parameters(&ckpt.encoder).tunable);
    }
}

#[test]
fn zero_lambda_leaves_source_head_alone() {
    let (toy, bank) = toy(1);
    let spec = EncoderSpec::stage_conv((1, 1, 16), vec![8, 8], 16, 8);
    let init = build_encoder(&spec, 1).unwrap();
    let teacher = init.teacher_copy();
    let (batch, labels) = train_batch(&toy);
    let w = seen_matrix(&bank, &toy);
    let mut cfg = recipe(TunabilityMode::BackboneAdapter, 3, 1);
    cfg.loss.lambda = 0.0;

    let student = prepare_student(&init, &cfg, 8, 16).unwrap();
    let step = loss_and_grads(&student, &teacher, &batch, &labels, Some(w.view()), &cfg.loss).unwrap();
    assert_eq!(step.distill, 0.0);
    assert_eq!(step.total, step.align);
    for (name, g) in step.grads.iter() {
        if name.starts_with("source_head/") {
            assert!(g.iter().all(|v| *v == 0.0), "{name}");
        }
    }

    let source = |e: &EncoderState| -> Vec<Array2<f64>> {
        e.params.iter().filter(|p| p.group == ParamGroup::SourceHead).map(|p| p.value.clone()).collect()
    };
    cfg.tunability = TunabilityMode::HeadAdapter;
    let ckpt = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    assert_eq!(source(&ckpt.encoder), source(&init));
    assert!(ckpt.run_log.iter().all(|r| r.l_distill == 0.0));

    // Trainable but without gradient or decay, Adam never moves it.
    cfg.tunability = TunabilityMode::BackboneAdapter;
    cfg.weight_decay = 0.0;
    let ckpt = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    assert_eq!(source(&ckpt.encoder), source(&init));
}

#[test]
fn identical_config_gives_identical_run() {
    let (toy, bank) = toy(2);
    let spec = EncoderSpec::stage_conv((1, 1, 16), vec![8, 8], 16, 8);
    let init = build_encoder(&spec, 2).unwrap();
    let mut cfg = recipe(TunabilityMode::BackboneAdapter, 4, 2);
    cfg.augmentation = true;
    let a = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    let b = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    let bits = |c: &Checkpoint| -> Vec<[u64; 4]> {
        c.run_log.iter().map(|r| [r.l_align.to_bits(), r.l_distill.to_bits(), r.l_total.to_bits(), r.lr.to_bits()]).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.encoder, b.encoder);
    cfg.seed = 3;
    let c = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn teacher_is_untouched_by_training() {
    let (toy, bank) = toy(0);
    let spec = EncoderSpec::stage_conv((1, 1, 16), vec![8, 8], 16, 8);
    let (teacher, init) = init_teacher_student(InitSource::Toy { spec: &spec, seed: 4 }).unwrap();
    let snapshot = teacher.clone();
    let (batch, _) = train_batch(&toy);
    let cfg = recipe(TunabilityMode::BackboneAdapter, 1, 0);
    let student = prepare_student(&init, &cfg, 8, 16).unwrap();
    assert_eq!(teacher.forward(&batch).unwrap().source_logits, student.forward(&batch).unwrap().source_logits);
    assert!(teacher.params.iter().all(|p| !p.trainable && p.group != ParamGroup::Adapter));

    let ckpt = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    assert_eq!(teacher, snapshot);
    assert_ne!(ckpt.encoder.forward(&batch).unwrap().source_logits, teacher.forward(&batch).unwrap().source_logits);
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let (toy, bank) = toy(3);
    let spec = EncoderSpec::stage_conv((1, 1, 16), vec![8, 8], 16, 8);
    let init = build_encoder(&spec, 3).unwrap();
    let ckpt = train(&recipe(TunabilityMode::BackboneAdapter, 2, 3), &init, &toy.manifest, &bank).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.run_log, ckpt.run_log);
    assert_eq!(back.bank_ref, ckpt.bank_ref);
    let (batch, _) = train_batch(&toy);
    let (x, y) = (ckpt.encoder.forward(&batch).unwrap(), back.encoder.forward(&batch).unwrap());
    assert_eq!(x.features, y.features);
    assert_eq!(x.source_logits, y.source_logits);

    let h1 = Checkpoint::encoder_hash(dir.path()).unwrap();
    let other = tempfile::tempdir().unwrap();
    back.save(other.path()).unwrap();
    assert_eq!(h1, Checkpoint::encoder_hash(other.path()).unwrap());
}

#[test]
fn preconditions_are_enforced() {
    let (toy, bank) = toy(0);
    let spec = EncoderSpec::identity((1, 1, 16), 16, 8);
    let init = build_encoder(&spec, 0).unwrap();

    let short = bank.subset(&toy.manifest.seen_classes[1..].to_vec()).unwrap();
    match train(&recipe(TunabilityMode::Head, 1, 0), &init, &toy.manifest, &short) {
        Err(TrainError::BankMismatch(msg)) => assert!(msg.contains(&toy.manifest.seen_classes[0])),
        other => panic!("expected BankMismatch, got {other:?}"),
    }

    let mut cfg = recipe(TunabilityMode::HeadAdapter, 1, 0);
    cfg.adapter_count = Some(0);
    assert!(matches!(
        train(&cfg, &init, &toy.manifest, &bank),
        Err(TrainError::Adapter(AdapterError::ModeRequiresAdapters(TunabilityMode::HeadAdapter)))
    ));
    assert!(matches!(
        train(&TrainConfig { batch_size: 0, ..recipe(TunabilityMode::Head, 1, 0) }, &init, &toy.manifest, &bank),
        Err(TrainError::InvalidConfig(_))
    ));
}

#[test]
fn classical_mode_trains_without_text() {
    let (toy, bank) = toy(4);
    let init = build_encoder(&EncoderSpec::identity((1, 1, 16), 16, 8), 4).unwrap();
    let mut cfg = recipe(TunabilityMode::HeadAdapter, 10, 4);
    cfg.prompt_mode = PromptMode::Classical;
    let ckpt = train(&cfg, &init, &toy.manifest, &bank).unwrap();
    assert!(ckpt.encoder.params.contains("head/classifier.weight"));
    assert!(ckpt.encoder.projector().is_none());
    assert!(ckpt.run_log.last().unwrap().l_align < ckpt.run_log[0].l_align);
}
