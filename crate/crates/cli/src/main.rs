use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn, LevelFilter};

use spmll::config::{format_groups, parse_config, parse_synth_config, TrainConfig};
use spmll::corrgraph::{load_class_semantics, load_graph, save_class_semantics, save_graph, CorrelationGraph};
use spmll::data::{dataset_stats, gen_synthetic_suite, load_jsonl, write_jsonl};
use spmll::eval::{evaluate, label_correlation, write_report};
use spmll::gradcheck::{random_suite, MAX_REL_ERROR};
use spmll::model::{export_centers, load_checkpoint, VerbClassifier};
use spmll::trainer::train_to_files;
use spmll::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "spmll", version, about = "Single-positive multi-label verb classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the smoothed correlation graph from class semantic embeddings.
    BuildGraph {
        /// Class semantics (JSON Lines).
        #[arg(long)]
        classes: PathBuf,
        /// Neighbors kept per class.
        #[arg(long, default_value_t = spmll::config::DEFAULT_KNN_K)]
        k: usize,
        /// Self weight is 1 - s.
        #[arg(long, default_value_t = spmll::config::DEFAULT_SMOOTH_S)]
        s: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic ambiguous-classes suite into a directory.
    Synth {
        /// Output directory for train.jsonl, test.jsonl and classes.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides (synth.* keys).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON Lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Evaluate a checkpoint on a labeled test file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Graph file; defaults to the path recorded in the checkpoint.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Report path; the report goes to stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients on random tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        models: usize,
    },
    /// Write original and refined class centers of a checkpoint as CSV.
    ExportCenters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label statistics and co-annotation rates of a labeled file.
    Stats {
        #[arg(long)]
        test: PathBuf,
        /// Also list class pairs whose co-annotation rate exceeds this value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// ce, bce or focal.
    #[arg(long)]
    loss: Option<String>,
    /// none, fgsm or pgd.
    #[arg(long)]
    adv: Option<String>,
    /// `off` forces zero GCN layers.
    #[arg(long, value_enum)]
    gcn: Option<Toggle>,
    #[arg(long)]
    gcn_layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Extra `key=value` overrides for any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainOpts {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = split_pairs(&self.set)?;
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("loss", self.loss.clone());
        push("adv.method", self.adv.clone());
        push("gcn_layers", self.gcn_layers.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("graph", self.graph.as_ref().map(|p| p.display().to_string()));
        if self.gcn == Some(Toggle::Off) {
            out.push(("gcn_layers".into(), "0".into()));
        }
        Ok(out)
    }
}

fn split_pairs(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect()
}

fn echo_config(cfg: &TrainConfig) {
    for (k, v) in cfg.to_pairs() {
        eprintln!("  {k}={v}");
    }
}

fn resolve_graph(cli_graph: Option<&Path>, recorded: Option<&str>, gcn_layers: usize) -> Result<Option<CorrelationGraph>> {
    if gcn_layers == 0 {
        return Ok(None);
    }
    match cli_graph.map(Path::to_path_buf).or_else(|| recorded.map(PathBuf::from)) {
        Some(p) => Ok(Some(load_graph(p)?)),
        None => Err(Error::InvalidArgument(format!(
            "the model has {gcn_layers} GCN layers but no graph was given (use --graph)"
        ))),
    }
}

fn load_model(model: &Path, graph: Option<&Path>) -> Result<VerbClassifier> {
    let ckpt = load_checkpoint(model)?;
    let graph = resolve_graph(graph, ckpt.graph_path.as_deref(), ckpt.dims.gcn_layers)?;
    ckpt.into_model(graph)
}

fn log_path_for(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

/// Fingerprint from the header of the training log next to the checkpoint.
fn training_fingerprint(model: &Path) -> String {
    let path = log_path_for(model);
    let header = std::fs::read_to_string(&path).ok().and_then(|text| {
        let first = text.lines().next()?.to_string();
        let v: serde_json::Value = serde_json::from_str(&first).ok()?;
        v.get("fingerprint")?.as_str().map(str::to_string)
    });
    header.unwrap_or_else(|| {
        warn!("no training log at {}; report fingerprint left unknown", path.display());
        "unknown".to_string()
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph { classes, k, s, out } => {
            let semantics = load_class_semantics(&classes)?;
            let graph = CorrelationGraph::from_semantics(&semantics, k, s)?;
            save_graph(&graph, &out)?;
            println!("{}", out.display());
        }
        Command::Synth { out, config, seed, set } => {
            let mut overrides = split_pairs(&set)?;
            if let Some(seed) = seed {
                overrides.push(("seed".into(), seed.to_string()));
            }
            let (cfg, _) = parse_synth_config(config.as_deref(), &overrides)?;
            eprintln!("synthetic config:");
            eprintln!("  seed={}", cfg.seed);
            eprintln!("  synth.classes={}", cfg.classes);
            eprintln!("  synth.groups={}", format_groups(&cfg.groups));
            eprintln!("  synth.train_per_class={}", cfg.train_per_class);
            eprintln!("  synth.test_per_class={}", cfg.test_per_class);
            eprintln!("  synth.separation={}", cfg.separation);
            eprintln!("  synth.overlap_radius={}", cfg.overlap_radius);
            eprintln!("  synth.noise={}", cfg.noise);
            eprintln!("  synth.semantic_noise={}", cfg.semantic_noise);
            eprintln!("  synth.dim={}", cfg.dim);
            let suite = gen_synthetic_suite(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let paths = [out.join("train.jsonl"), out.join("test.jsonl"), out.join("classes.jsonl")];
            write_jsonl(&suite.train, &paths[0])?;
            write_jsonl(&suite.test, &paths[1])?;
            save_class_semantics(&suite.classes, &paths[2])?;
            for p in &paths {
                println!("{}", p.display());
            }
        }
        Command::Train { train, out, log, opts } => {
            let (cfg, _) = parse_config(opts.config.as_deref(), &opts.overrides()?)?;
            eprintln!("effective config:");
            echo_config(&cfg);
            cfg.validate()?;
            let graph = resolve_graph(opts.graph.as_deref(), None, cfg.gcn_layers)?;
            let dataset = load_jsonl(&train, false)?;
            if let Some(g) = &graph {
                if g.num_classes() != dataset.num_classes() {
                    return Err(Error::InvalidInput(format!(
                        "graph has {} classes but the training set has {}",
                        g.num_classes(),
                        dataset.num_classes()
                    )));
                }
            }
            let log = log.unwrap_or_else(|| log_path_for(&out));
            let outcome = train_to_files(&dataset, graph, &cfg, &out, &log)?;
            if let Some(last) = outcome.log.last() {
                info!("final epoch {}: mean loss {:.6}", last.epoch, last.mean_loss);
            }
            println!("{}", out.display());
            println!("{}", log.display());
        }
        Command::Eval { model, test, graph, metrics } => {
            let clf = load_model(&model, graph.as_deref())?;
            let dataset = load_jsonl(&test, true)?;
            let report = evaluate(&clf, &dataset, &training_fingerprint(&model))?;
            if let Some(note) = &report.map_note {
                warn!("{note}");
            }
            match metrics {
                Some(path) => {
                    write_report(&report, &path)?;
                    println!("{}", path.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Gradcheck { seed, models } => {
            let report = random_suite(seed, models)?;
            println!("max relative error: {:e}", report.max_rel_error);
            println!("worst entry: {}", report.worst);
            println!("models: {}, entries: {}", report.models, report.entries);
            if !report.passed() {
                return Err(Error::NumericDegeneracy(format!(
                    "gradient check failed: {:e} >= {MAX_REL_ERROR:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::ExportCenters { model, graph, out } => {
            let clf = load_model(&model, graph.as_deref())?;
            export_centers(&clf, &out)?;
            println!("{}", out.display());
        }
        Command::Stats { test, threshold, out } => {
            let dataset = load_jsonl(&test, true)?;
            let stats = dataset_stats(&dataset)?;
            let mut value = serde_json::to_value(&stats).expect("stats serialize");
            if let Some(t) = threshold {
                let sets = dataset.label_sets().unwrap_or_default();
                let table = label_correlation(&sets, dataset.num_classes(), t)?;
                value["correlation_threshold"] = serde_json::json!(t);
                value["correlated_pairs"] = serde_json::to_value(table.above_threshold()).expect("pairs serialize");
            }
            let text = serde_json::to_string_pretty(&value).expect("stats serialize");
            match out {
                Some(path) => {
                    std::fs::write(&path, format!("{text}\n")).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    println!("{}", path.display());
                }
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
