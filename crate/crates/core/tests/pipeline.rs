use kfdiff::denoiser::{DenoiserConfig, DenoiserModel, KeyframeCondition};
use kfdiff::diffusion::DiffusionSchedule;
use kfdiff::guidance::{sample_strategy, SampleRequest, SamplerConfig, Strategy};
use kfdiff::motion_data::{generate_corpus, CorpusSpec, KeyframeMask};
use kfdiff::training::{TrainConfig, TrainExample, Trainer};
use kfdiff::{rng, Matrix};

#[test]
fn full_size_profile_runs() {
    let cfg = DenoiserConfig::paper_scale(12, 20, 32);
    let model = DenoiserModel::<f32>::new(cfg).unwrap();
    let n = 10;
    let x_t: Matrix<f32> = rng::standard_normal(&mut rng::stream(1, 0), n, 12);
    let mask = KeyframeMask::new(n, vec![0, 7]).unwrap();
    let values = mask.keyframe_part(&rng::standard_normal(&mut rng::stream(2, 0), n, 12));
    let out = model
        .denoise(&x_t, 50, &[1, 2, 3], KeyframeCondition::Keyframes { values: &values, mask: &mask })
        .unwrap();
    assert_eq!(out.shape(), (n, 12));
    assert!(out.is_finite());
}

#[test]
fn short_training_lowers_loss_and_inpainting_keeps_keyframes() {
    let corpus = generate_corpus(&CorpusSpec {
        size: 40,
        max_frames: 24,
        ..CorpusSpec::default()
    })
    .unwrap();
    let data: Vec<TrainExample<f32>> = corpus
        .train_records()
        .map(|r| TrainExample {
            frames: corpus.stats.normalize_frames(&r.motion.frames).unwrap().cast(),
            tokens: r.prompt.tokens.clone(),
        })
        .collect();
    let sched = DiffusionSchedule::<f32>::cosine(20).unwrap();
    let model = DenoiserModel::new(DenoiserConfig {
        latent_dim: 32,
        heads: 2,
        decoder_layers: 2,
        ff_width: 64,
        ..DenoiserConfig::desk(corpus.layout.dim(), corpus.vocab.len(), 24)
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 120,
        batch: 4,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, sched.clone(), corpus.layout.clone(), cfg).unwrap();
    let mut losses = Vec::new();
    trainer.run(&data, |_, l| losses.push(l.simple)).unwrap();
    let early: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let late: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(late < early, "loss {early} -> {late}");

    let model = trainer.into_model();
    let rec = corpus.holdout_records().next().unwrap();
    let gt: Matrix<f32> = corpus.stats.normalize_frames(&rec.motion.frames).unwrap().cast();
    let n = gt.rows();
    let mask = KeyframeMask::new(n, vec![0, n / 2]).unwrap();
    let kf = mask.keyframe_part(&gt);
    let req = SampleRequest {
        tokens: &rec.prompt.tokens,
        frames: n,
        keyframes: Some((&kf, &mask)),
    };
    let cfg = SamplerConfig::default();
    let guided = sample_strategy(Strategy::DiffKfc, &model, &model, &req, &cfg, &sched).unwrap();
    assert!(guided.is_finite());
    let out = sample_strategy(Strategy::Inpaint, &model, &model, &req, &cfg, &sched).unwrap();
    for &i in mask.keyframe_indices() {
        assert_eq!(out.row(i), gt.row(i));
    }
}
