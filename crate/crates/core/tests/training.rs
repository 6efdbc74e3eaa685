use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spmll::adversarial::AdvMethod;
use spmll::config::{LossChoice, TrainConfig};
use spmll::corrgraph::CorrelationGraph;
use spmll::data::{gen_synthetic_suite, Dataset, EmbeddingRecord, Split, SynthConfig};
use spmll::eval::topk_accuracy;
use spmll::trainer::{train, train_to_files, EpochLog};
use spmll::Error;

/// Four tight clusters on orthogonal axes of an 8-d space.
fn separable(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for class in 0..4 {
        for i in 0..per_class {
            let mut e: Vec<f64> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
            e[2 * class] += 1.0;
            records.push(EmbeddingRecord {
                id: format!("{class}-{i}"),
                embedding: e,
                positive: class,
                labels: Some(vec![class]),
            });
        }
    }
    Dataset::new(records, 4, 8, Split::Train).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        hidden: 16,
        gcn_layers: 0,
        lr: 1e-2,
        batch: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_data_is_learned_in_thirty_epochs() {
    let data = separable(25, 1);
    let cfg = small_config();
    assert_eq!(cfg.epochs, 30);
    let out = train(&data, None, &cfg, |_| Ok(())).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let probs = out.model.predict_probs(&data.all_embeddings()).unwrap();
    let top1 = topk_accuracy(&probs, &data.positives(&all), 1).unwrap();
    assert!(top1 >= 0.95, "training top-1 {top1}");
    assert_eq!(out.log.len(), 30);
    assert!(out.log.last().unwrap().mean_loss < out.log[0].mean_loss);
}

#[test]
fn log_records_follow_the_schedule() {
    let data = separable(5, 2);
    let cfg = TrainConfig {
        epochs: 4,
        ..small_config()
    };
    let mut seen: Vec<EpochLog> = Vec::new();
    train(&data, None, &cfg, |r| {
        seen.push(r.clone());
        Ok(())
    })
    .unwrap();
    for (e, r) in seen.iter().enumerate() {
        assert_eq!(r.epoch, e);
        assert!((r.lr - 1e-2 * 0.9f64.powi(e as i32)).abs() < 1e-15);
        assert!(r.mean_loss.is_finite());
        assert!(r.wall_time_s >= 0.0);
    }
}

#[test]
fn zero_epochs_rejected() {
    let data = separable(2, 0);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    assert!(matches!(train(&data, None, &cfg, |_| Ok(())), Err(Error::InvalidConfig(_))));
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let suite = gen_synthetic_suite(&SynthConfig {
        train_per_class: 6,
        test_per_class: 2,
        dim: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let graph = CorrelationGraph::from_semantics(&suite.classes, 3, 0.5).unwrap();
    let cfg = TrainConfig {
        hidden: 12,
        gcn_layers: 2,
        epochs: 3,
        batch: 8,
        seed: 9,
        adv: spmll::adversarial::AdvConfig {
            method: AdvMethod::Pgd,
            random_start: true,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("model{run}.json"));
        let log = dir.path().join(format!("log{run}.jsonl"));
        train_to_files(&suite.train, Some(graph.clone()), &cfg, &ckpt, &log).unwrap();
        bytes.push(std::fs::read(&ckpt).unwrap());
        let first = std::fs::read_to_string(&log).unwrap();
        let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(header["fingerprint"], cfg.fingerprint());
        assert_eq!(first.lines().count(), 1 + cfg.epochs);
    }
    assert_eq!(bytes[0], bytes[1]);

    let other = TrainConfig { seed: 10, ..cfg };
    let ckpt = dir.path().join("other.json");
    train_to_files(&suite.train, Some(graph), &other, &ckpt, &dir.path().join("o.jsonl")).unwrap();
    assert_ne!(std::fs::read(&ckpt).unwrap(), bytes[0]);
}

#[test]
fn extreme_cosine_scale_aborts_with_diagnostics() {
    let data = separable(4, 3);
    for loss in [LossChoice::Ce, LossChoice::Bce] {
        let cfg = TrainConfig {
            cosine_scale: f64::INFINITY,
            loss,
            ..small_config()
        };
        match train(&data, None, &cfg, |_| Ok(())) {
            Err(Error::NonFiniteLoss { epoch, batch, norms }) => {
                assert_eq!((epoch, batch), (0, 0));
                assert!(norms.contains("centers"), "{norms}");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}

#[test]
fn baseline_path_trains_with_cross_entropy() {
    let data = separable(10, 4);
    let cfg = TrainConfig {
        loss: LossChoice::Ce,
        ..small_config()
    };
    let out = train(&data, None, &cfg, |_| Ok(())).unwrap();
    assert!(out.model.graph().is_none());
    assert_eq!(out.model.dims().gcn_layers, 0);
    assert!(out.log.iter().all(|r| r.mean_loss.is_finite()));
}
