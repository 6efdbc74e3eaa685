//! GCN / adversarial ablation on the synthetic ambiguous-classes suite.
//!
//! cargo run --release -p spmll --example ablation -- [count | from..to] [key=value ...]

use std::time::Instant;

use spmll::adversarial::AdvMethod;
use spmll::config::TrainConfig;
use spmll::corrgraph::CorrelationGraph;
use spmll::data::{gen_synthetic_suite, SynthConfig};
use spmll::eval::evaluate;
use spmll::trainer::train;

fn main() -> spmll::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: Vec<u64> = match args.next() {
        None => (0..5).collect(),
        Some(s) => match s.split_once("..") {
            Some((a, b)) => (a.parse().expect("seed")..b.parse().expect("seed")).collect(),
            None => (0..s.parse().expect("seed count")).collect(),
        },
    };
    let n = seeds.len() as f64;
    let mut base = TrainConfig {
        hidden: 64,
        lr: 3e-3,
        epochs: 30,
        batch: 32,
        ..TrainConfig::default()
    };
    let mut synth = SynthConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        match k {
            "noise" => synth.noise = v.parse().unwrap(),
            "overlap" => synth.overlap_radius = v.parse().unwrap(),
            "separation" => synth.separation = v.parse().unwrap(),
            "semantic_noise" => synth.semantic_noise = v.parse().unwrap(),
            "dim" => synth.dim = v.parse().unwrap(),
            _ => base.set(k, v)?,
        }
    }
    let variants: Vec<(&str, usize, AdvMethod)> = vec![
        ("baseline", 0, AdvMethod::None),
        ("gcn", 2, AdvMethod::None),
        ("pgd", 0, AdvMethod::Pgd),
        ("gcn+pgd", 2, AdvMethod::Pgd),
        ("gcn+fgsm", 2, AdvMethod::Fgsm),
        ("gcn4+pgd", 4, AdvMethod::Pgd),
    ];
    let mut map = vec![0.0; variants.len()];
    let mut top1 = vec![0.0; variants.len()];
    let started = Instant::now();
    for &seed in &seeds {
        synth.seed = seed;
        let suite = gen_synthetic_suite(&synth)?;
        let graph = CorrelationGraph::from_semantics(&suite.classes, base.knn_k, base.smooth_s)?;
        for (i, &(name, j, adv)) in variants.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.gcn_layers = j;
            cfg.adv.method = adv;
            let out = train(&suite.train, Some(graph.clone()), &cfg, |_| Ok(()))?;
            let r = evaluate(&out.model, &suite.test, &cfg.fingerprint())?;
            let m = r.map.unwrap_or(f64::NAN);
            println!("seed {seed} {name:9} map {:.2} top1 {:.2}", 100.0 * m, 100.0 * r.top1);
            map[i] += m / n;
            top1[i] += r.top1 / n;
        }
    }
    for (i, (name, _, _)) in variants.iter().enumerate() {
        println!("mean {name:9} map {:.2} top1 {:.2}", 100.0 * map[i], 100.0 * top1[i]);
    }
    eprintln!("{:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
