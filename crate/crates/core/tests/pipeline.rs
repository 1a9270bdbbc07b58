use qahoi::data::{
    generate_synthetic, synthetic_samples, ImagePredictions, PredictionFile, SyntheticSpec,
};
use qahoi::evaluation::{evaluate, EvalSetting};
use qahoi::postprocess::postprocess;
use qahoi::training::train_loop;
use qahoi::{Config, Model};

fn small() -> Config {
    let mut cfg = Config::desk();
    cfg.backbone.base_dim = 8;
    cfg.backbone.model_dim = 16;
    cfg.transformer.heads = 2;
    cfg.transformer.points = 1;
    cfg.transformer.queries = 8;
    cfg.transformer.ffn_dim = 32;
    cfg.train.max_steps = Some(30);
    cfg
}

#[test]
fn short_training_lowers_the_loss_and_evaluates() {
    let ds = generate_synthetic(&SyntheticSpec {
        num_images: 8,
        ..SyntheticSpec::default()
    });
    let data = synthetic_samples(&ds);
    let mut model = Model::new(&small(), 3).unwrap();
    let records = train_loop(&mut model, &data, 3, |_, _| Ok(true)).unwrap();
    assert_eq!(records.len(), 30);
    let head: f64 = records[..5].iter().map(|r| r.terms.total).sum();
    let tail: f64 = records[25..].iter().map(|r| r.terms.total).sum();
    assert!(tail < head, "{head} -> {tail}");

    let preds: Vec<_> = data
        .iter()
        .map(|s| postprocess(&model.predict(&s.image).unwrap(), &model.config.postprocess))
        .collect();
    assert!(preds.iter().all(|p| !p.is_empty()));
    let table = ds.annotations.class_table().unwrap();
    let report = evaluate(&preds, &ds.annotations.images, EvalSetting::Default, &table).unwrap();
    assert!((0.0..=1.0).contains(&report.full));

    let file = PredictionFile::new(
        ds.annotations
            .images
            .iter()
            .zip(&preds)
            .map(|(g, p)| ImagePredictions {
                id: g.image_id.clone(),
                instances: p.clone(),
            })
            .collect(),
    );
    let back = PredictionFile::from_json_str(&serde_json::to_string(&file).unwrap()).unwrap();
    assert_eq!(back, file);
}

#[test]
fn anchors_do_not_depend_on_the_image() {
    let model = Model::new(&small(), 0).unwrap();
    let ds = generate_synthetic(&SyntheticSpec::default());
    let a = model.predict(&ds.image_array(0)).unwrap();
    let b = model.predict(&ds.image_array(5)).unwrap();
    assert_eq!(a.anchors, b.anchors);
    assert_ne!(a.object_probs, b.object_probs);
}
