//! Scratch probe: criterion-1-style MNIST run (baseline vs falcon),
//! micro-averaged ECE over the rotation and y-zoom suites.

use std::time::Instant;

use falcon::data::{load_idx, Split};
use falcon::harness::{
    evaluate_under_shift, train_baseline, train_falcon, TrainConfig, TrainMode,
};
use falcon::metrics::LEVEL_GRID;
use falcon::nn::preset;
use falcon::rng::{stream_rng, STREAM_INIT};
use falcon::shift::{PerturbationConfig, PerturbationKind};

fn main() {
    let t0 = Instant::now();
    let train = load_idx(
        "data/mnist/train-images-idx3-ubyte",
        "data/mnist/train-labels-idx1-ubyte",
        Split::Train,
    )
    .unwrap();
    let test = load_idx(
        "data/mnist/t10k-images-idx3-ubyte",
        "data/mnist/t10k-labels-idx1-ubyte",
        Split::Test,
    )
    .unwrap();
    println!("loaded: {} train, {} test ({:.1?})", train.len(), test.len(), t0.elapsed());

    let seed = 12345u64;
    let kinds = [PerturbationKind::Rotation, PerturbationKind::YZoom];
    let pert_cfg = PerturbationConfig::default();

    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);

    for mode in [TrainMode::L2Baseline, TrainMode::Falcon] {
        let cfg = TrainConfig {
            mode,
            epochs,
            seed,
            learning_rate: 5e-3,
            early_stopping_patience: None,
            ..Default::default()
        };
        let mut model = {
            let mut rng = stream_rng(seed, STREAM_INIT);
            preset("mlp-small", 10, &mut rng).unwrap()
        };
        let t1 = Instant::now();
        let hist = match mode {
            TrainMode::L2Baseline => train_baseline(&mut model, &train, None, &cfg).unwrap(),
            _ => train_falcon(&mut model, &train, None, &cfg).unwrap(),
        };
        let train_time = t1.elapsed();
        let last = hist.steps.last().unwrap();
        println!(
            "{mode:?}: trained {} steps in {train_time:.1?} (last l_cce {:.4})",
            hist.steps.len(),
            last.l_cce
        );

        let t2 = Instant::now();
        let (report, _) = evaluate_under_shift(
            &model,
            &test,
            &kinds,
            &LEVEL_GRID,
            10,
            &pert_cfg,
            seed,
            "probe",
            serde_json::json!({}),
        )
        .unwrap();
        println!(
            "  test acc {:.4}, in-domain ECE {:.4} (eval {:.1?})",
            report.test_accuracy,
            report.in_domain_ece,
            t2.elapsed()
        );
        for m in &report.micro_ece {
            println!("  micro-ECE {}: {:.4}", m.perturbation, m.micro_ece);
        }
        for c in &report.cells {
            if c.level % 30 == 0 {
                println!(
                    "    {} level {:2}: acc {:.3} conf {:.3} ece {:.3} ent {:.3}",
                    c.perturbation, c.level, c.accuracy, c.mean_confidence, c.ece, c.mean_entropy
                );
            }
        }
    }
    println!("total {:.1?}", t0.elapsed());
}
