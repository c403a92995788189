use ndarray::{Array2, Array4};
use sherrylab::datamodel::ToyDataset;
use sherrylab::plot::{
    heatmap_csv, heatmap_svg, plot_adapter_scaling, plot_heatmap, plot_tsne, scaling_csv, tsne_csv, tsne_svg, PlotError,
};
use sherrylab::retrieval::{evaluate_manifest, EvalOptions};
use sherrylab::tsne::TsneConfig;
use sherrylab::*;

fn toy_with_bank(spec: &ToySpec) -> (ToyDataset, TextBank) {
    let toy = generate_toy_dataset(spec).unwrap();
    let names: Vec<String> = toy.prototypes.iter().map(|(n, _)| n.clone()).collect();
    let m = Array2::from_shape_fn((names.len(), spec.feature_dim), |(i, j)| toy.prototypes[i].1[j]);
    let bank = TextBank::from_vectors("toy", &names, m.view()).unwrap();
    (toy, bank)
}

fn conv_spec() -> EncoderSpec {
    EncoderSpec::stage_conv((1, 1, 16), vec![16, 16, 16, 16], 16, 8)
}

fn recipe(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 100,
        batch_size: 64,
        learning_rate: 1e-2,
        weight_decay: 5e-4,
        augmentation: false,
        seed,
        ..Default::default()
    };
    cfg.loss.tau_align = 0.05;
    cfg.loss.lambda = 1.0;
    cfg
}

#[test]
fn tsne_emits_one_point_per_sample() {
    let toy = generate_toy_dataset(&ToySpec { num_unseen: 10, per_class_per_domain: 100, ..Default::default() }).unwrap();
    let student = build_encoder(&EncoderSpec::identity((1, 1, 16), 16, 8), 0).unwrap();
    let cfg = TsneConfig { iterations: 20, ..Default::default() };
    let points = plot_tsne(&student, &toy.manifest, 10, 100, &cfg).unwrap();
    assert_eq!(points.len(), 2000);
    assert_eq!(points.iter().filter(|p| p.domain == Domain::Sketch).count(), 1000);
    assert!(points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    let csv = tsne_csv(&points);
    assert_eq!(csv.lines().count(), 2001);
    assert!(tsne_svg(&points).starts_with("<svg"));

    assert!(matches!(plot_tsne(&student, &toy.manifest, 11, 10, &cfg), Err(PlotError::TooFewSamples(_))));
    assert!(matches!(plot_tsne(&student, &toy.manifest, 2, 101, &cfg), Err(PlotError::TooFewSamples(_))));
}

#[test]
fn tsne_is_seeded() {
    let toy = generate_toy_dataset(&ToySpec::default()).unwrap();
    let student = build_encoder(&EncoderSpec::identity((1, 1, 16), 16, 8), 0).unwrap();
    let cfg = TsneConfig { perplexity: 10.0, iterations: 200, ..Default::default() };
    let a = tsne_csv(&plot_tsne(&student, &toy.manifest, 4, 10, &cfg).unwrap());
    let b = tsne_csv(&plot_tsne(&student, &toy.manifest, 4, 10, &cfg).unwrap());
    assert_eq!(a, b);
    let c = tsne_csv(&plot_tsne(&student, &toy.manifest, 4, 10, &TsneConfig { seed: 1, ..cfg }).unwrap());
    assert_ne!(a, c);
}

#[test]
fn noiseless_classes_stay_together_in_two_dimensions() {
    let toy = generate_toy_dataset(&ToySpec { noise_scale: 0.0, seed: 5, ..Default::default() }).unwrap();
    let student = build_encoder(&EncoderSpec::identity((1, 1, 16), 16, 8).with_identity_head(), 0).unwrap();
    let points = plot_tsne(&student, &toy.manifest, 4, 10, &TsneConfig { perplexity: 10.0, ..Default::default() }).unwrap();
    let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
            let bucket = if p.class == q.class { &mut within } else { &mut between };
            bucket.0 += d;
            bucket.1 += 1;
        }
    }
    let (w, b) = (within.0 / within.1 as f64, between.0 / between.1 as f64);
    assert!(w < b, "within {w} between {b}");
}

#[test]
fn heatmap_matches_direct_cosines() {
    let (toy, bank) = toy_with_bank(&ToySpec { seed: 2, ..Default::default() });
    let init = build_encoder(&conv_spec(), 2).unwrap();
    let ckpt = train(&TrainConfig { epochs: 2, ..recipe(2) }, &init, &toy.manifest, &bank).unwrap();
    let h = plot_heatmap(&ckpt.encoder, &toy.manifest, &bank, 4, 5, 0).unwrap();
    assert_eq!(h.classes.len(), 4);
    assert_eq!(h.columns.len(), 4 * 2 * 5);
    assert!(h.matrix.iter().all(|r| r.len() == 40));

    for (j, id) in h.columns.iter().enumerate() {
        let sample = toy.manifest.test_samples.iter().find(|s| &s.id == id).unwrap();
        assert_eq!(sample.class_name, h.column_classes[j]);
        let px = sample.pixels((1, 1, 16)).unwrap();
        let batch = Array4::from_shape_vec((1, 1, 1, 16), px.iter().copied().collect()).unwrap();
        let f = ckpt.encoder.forward(&batch).unwrap().features;
        let f = match ckpt.encoder.projector() {
            Some(w) => f.dot(&w),
            None => f,
        };
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, class) in h.classes.iter().enumerate() {
            let t = &bank.classes.iter().find(|c| &c.name == class).unwrap().vector;
            let tn = t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let dot: f64 = t.iter().zip(f.iter()).map(|(&a, b)| a as f64 / tn * b).sum();
            assert!((h.matrix[i][j] - dot / fnorm).abs() < 1e-9, "{} vs {}", h.matrix[i][j], dot / fnorm);
        }
    }
    let csv = heatmap_csv(&h);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with(&h.classes[0]));
    assert!(heatmap_svg(&h).contains(&h.classes[3]));
}

#[test]
fn scaling_sweep_accounts_for_adapters() {
    let (toy, bank) = toy_with_bank(&ToySpec { seed: 1, ..Default::default() });
    let init = build_encoder(&conv_spec(), 1).unwrap();
    let cfg = TrainConfig { epochs: 3, ..recipe(1) };
    let opts = EvalOptions::default();
    let points = plot_adapter_scaling(&[0, 2, 4], &cfg, &init, &toy.manifest, &bank, &opts).unwrap();
    assert_eq!(points.len(), 3);
    assert_eq!(points[0].adapter_params, 0);
    assert!(points.windows(2).all(|w| w[0].adapter_ratio < w[1].adapter_ratio));
    assert!(points.windows(2).all(|w| w[0].total_params < w[1].total_params));
    assert_eq!(scaling_csv(&points).lines().count(), 4);

    let plain = TrainConfig { tunability: TunabilityMode::Backbone, adapter_count: Some(0), ..cfg.clone() };
    let ckpt = train(&plain, &init, &toy.manifest, &bank).unwrap();
    assert_eq!(points[0].map_all, evaluate_manifest(&ckpt.encoder, &toy.manifest, &opts).unwrap().map_all);

    assert!(matches!(
        plot_adapter_scaling(&[5], &cfg, &init, &toy.manifest, &bank, &opts),
        Err(PlotError::BadAdapterCount { count: 5, available: 4 })
    ));
}
