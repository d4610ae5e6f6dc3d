//! Scratch probe: synthetic far-shift behavior of baseline vs falcon.

use falcon::data::gen_synthetic_shift;
use falcon::harness::{
    accuracy, confidence_entropy_summary, logits_chunked, train_baseline, train_falcon,
    TemperedModel, TrainConfig, TrainMode,
};
use falcon::metrics::fit_temperature;
use falcon::nn::preset;
use falcon::rng::{stream_rng, STREAM_INIT};

fn main() {
    for seed in [1u64, 2, 3] {
        let (train, _) = gen_synthetic_shift(seed, 2000, 0.0).unwrap();
        let (train_head, val) = train.split_tail(400, falcon::data::Split::Val).unwrap();

        let mut cfg = TrainConfig {
            mode: TrainMode::L2Baseline,
            epochs: 30,
            batch_size: 64,
            learning_rate: 5e-3,
            dropout: 0.0,
            clip_min: -50.0,
            clip_max: 50.0,
            seed,
            early_stopping_patience: None,
            ..Default::default()
        };

        let mut base = {
            let mut rng = stream_rng(seed, STREAM_INIT);
            preset("mlp-2d", 2, &mut rng).unwrap()
        };
        train_baseline(&mut base, &train_head, None, &cfg).unwrap();

        cfg.mode = TrainMode::Falcon;
        let mut falcon_model = {
            let mut rng = stream_rng(seed, STREAM_INIT);
            preset("mlp-2d", 2, &mut rng).unwrap()
        };
        train_falcon(&mut falcon_model, &train_head, None, &cfg).unwrap();

        let t = {
            let logits = logits_chunked(&base, &val.inputs).unwrap();
            fit_temperature(&logits, &val.labels).unwrap()
        };
        println!(
            "seed {seed}: base val acc {:.3}, falcon val acc {:.3}, fitted T {:.3}",
            accuracy(&base, &val).unwrap(),
            accuracy(&falcon_model, &val).unwrap(),
            t.temperature
        );
        let tempered = TemperedModel { model: base.clone(), scaler: t };

        for dist in [0.0, 2.0, 4.0, 8.0, 16.0] {
            let (_, test) = gen_synthetic_shift(seed + 100, 2000, dist).unwrap();
            let ab = accuracy(&base, &test).unwrap();
            let af = accuracy(&falcon_model, &test).unwrap();
            let (cb, eb) = confidence_entropy_summary(&base, &test.inputs).unwrap();
            let (cf, ef) = confidence_entropy_summary(&falcon_model, &test.inputs).unwrap();
            let (ct, _) = confidence_entropy_summary(&tempered, &test.inputs).unwrap();
            println!(
                "  dist {dist:5.1}: acc b/f {ab:.3}/{af:.3}  conf b/t/f {cb:.3}/{ct:.3}/{cf:.3}  ent b/f {eb:.3}/{ef:.3}"
            );
        }
    }
}
