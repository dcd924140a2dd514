mod data_arg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaloc::adaptation::{finetune, write_metrics_csv, TrainConfig, TrainStrategy};
use adaloc::bounds::{estimate_constants, slack_report, thm1_check, BoundConfig};
use adaloc::data::{evaluate, Split};
use adaloc::keying::{key_stats, localize_key, KeySpec, Strategy};
use adaloc::locking::{lock, refresh_key, unlock, LockedModel};
use adaloc::model_io::{read_key, read_model, write_atomic, write_key, write_model};
use adaloc::network::{init_network, ModelTag};
use adaloc::pipeline::{run_pipeline, seed_from_env, ExperimentManifest};
use adaloc::{Error, NetworkSpec, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use data_arg::DataArg;

#[derive(Parser)]
#[command(
    name = "adaloc",
    version,
    about = "Key-locked model adaptation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a He-initialized model.
    InitModel {
        /// Layer widths of an MLP, e.g. 784,128,128,10
        #[arg(long, value_delimiter = ',', conflicts_with = "spec")]
        widths: Option<Vec<usize>>,
        /// Network spec JSON file
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every parameter of a model on a dataset.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: DataArg,
        #[command(flatten)]
        hyper: Hyper,
        /// Zero the output layer after training.
        #[arg(long)]
        reset_head: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a key from a trained model.
    Localize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
        #[arg(long, default_value = "top")]
        strategy: Strategy,
        /// Candidate pool for pool-sample (defaults to rho)
        #[arg(long)]
        pool_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero the key coordinates of a model.
    Lock {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore a locked model with its key.
    Unlock {
        #[arg(long)]
        locked: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on a target task, fully or on the key coordinates only.
    Adapt {
        /// Unlocked base model
        #[arg(long)]
        model: PathBuf,
        /// Required for key-* strategies
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        data: DataArg,
        /// Held-out data evaluated after every epoch
        #[arg(long)]
        monitor: Option<DataArg>,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long, default_value = "full")]
        strategy: TrainStrategy,
        /// Per-epoch loss/accuracy CSV
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a model, optionally unlocking it first.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        data: DataArg,
    },
    /// Variance-bound Monte-Carlo check and distance-threshold slack.
    Bounds {
        /// trials=N[,configs=N][,seed=N]
        #[arg(long)]
        thm1_mc: Option<String>,
        /// Key-adapted model
        #[arg(long, requires_all = ["reference", "data"])]
        adapted: Option<PathBuf>,
        /// Fully fine-tuned model
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Data used to measure the input norm bound
        #[arg(long)]
        data: Option<DataArg>,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 2.0)]
        t: f64,
    },
    /// Rebuild a key from a key-only adapted model.
    RefreshKey {
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        locked: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment from a manifest.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (defaults to the manifest's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the manifest seed; ADALOC_SEED overrides both
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Hyper {
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Hyper {
    fn config(&self, strategy: TrainStrategy) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            strategy,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn parse_thm1(s: &str) -> Result<(usize, usize, u64)> {
    let (mut trials, mut configs, mut seed) = (10_000, 20, 0);
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            Error::Validation(format!("--thm1-mc: expected key=value, got `{part}`"))
        })?;
        let bad = |e: std::num::ParseIntError| Error::Validation(format!("--thm1-mc {k}={v}: {e}"));
        match k {
            "trials" => trials = v.parse().map_err(bad)?,
            "configs" => configs = v.parse().map_err(bad)?,
            "seed" => seed = v.parse().map_err(bad)?,
            _ => {
                return Err(Error::Validation(format!(
                    "--thm1-mc: unknown option `{k}`"
                )))
            }
        }
    }
    Ok((trials, configs, seed))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitModel {
            widths,
            spec,
            seed,
            out,
        } => {
            let spec = match (widths, spec) {
                (Some(w), None) => NetworkSpec::mlp(&w)?,
                (None, Some(p)) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    let s: NetworkSpec = serde_json::from_str(&text)?;
                    s.validate()?;
                    s
                }
                _ => {
                    return Err(Error::Validation(
                        "give exactly one of --widths or --spec".into(),
                    ))
                }
            };
            let store = init_network(&spec, seed)?;
            let file_hash = write_model(&out, &store)?;
            print(json!({
                "out": out,
                "params": store.len(),
                "model_hash": store.fingerprint(),
                "file_hash": file_hash,
            }));
        }
        Command::Train {
            model,
            data,
            hyper,
            reset_head,
            out,
        } => {
            let init = read_model(&model)?;
            let train = data.load(Split::Train)?;
            let result = finetune(
                &init,
                &train,
                None,
                &hyper.config(TrainStrategy::Full),
                None,
            )?;
            let accuracy = evaluate(&result.params, &train)?.accuracy;
            let mut trained = result.params.with_tag(ModelTag::Pretrained);
            if reset_head {
                let last = *trained.layout().last().expect("layer");
                trained.values_mut()[last.weight_offset..last.end()].fill(0.0);
            }
            write_model(&out, &trained)?;
            print(json!({
                "out": out,
                "train_accuracy": accuracy,
                "final_loss": result.metrics.last().map(|m| m.loss),
                "model_hash": trained.fingerprint(),
            }));
        }
        Command::Localize {
            model,
            rho,
            strategy,
            pool_fraction,
            seed,
            out,
        } => {
            let store = read_model(&model)?;
            let spec = KeySpec {
                rho,
                pool_fraction: pool_fraction.unwrap_or(rho),
                strategy,
                seed,
            };
            let key = localize_key(&store, &spec)?;
            let key_hash = write_key(&out, &key)?;
            print(json!({
                "out": out,
                "key_hash": key_hash,
                "base_model_hash": key.base_model_hash,
                "stats": key_stats(&store, &key),
            }));
        }
        Command::Lock { model, key, out } => {
            let store = read_model(&model)?;
            let key = read_key(&key)?;
            let locked = lock(&store, &key)?;
            write_model(&out, locked.params())?;
            print(json!({"out": out, "locked_model_hash": locked.fingerprint()}));
        }
        Command::Unlock { locked, key, out } => {
            let locked = LockedModel::from_params(read_model(&locked)?);
            let key = read_key(&key)?;
            let restored = unlock(&locked, &key)?;
            write_model(&out, &restored)?;
            print(json!({"out": out, "model_hash": restored.fingerprint()}));
        }
        Command::Adapt {
            model,
            key,
            data,
            monitor,
            hyper,
            strategy,
            curves,
            out,
        } => {
            let base = read_model(&model)?;
            let key = match (strategy.key_strategy(), key) {
                (None, _) => None,
                (Some(_), Some(p)) => Some(read_key(&p)?),
                (Some(_), None) => {
                    return Err(Error::Validation(format!(
                        "strategy {} needs --key",
                        strategy.name()
                    )))
                }
            };
            let train = data.load(Split::Train)?;
            let monitor = monitor.map(|m| m.load(Split::Test)).transpose()?;
            let result = finetune(
                &base,
                &train,
                monitor.as_ref(),
                &hyper.config(strategy),
                key.as_ref(),
            )?;
            if let Some(path) = &curves {
                let mut buf = Vec::new();
                write_metrics_csv(&mut buf, &[(strategy.name(), result.metrics.as_slice())])?;
                write_atomic(path, &buf)?;
            }
            write_model(&out, &result.params)?;
            let last = result.metrics.iter().rev().find(|m| m.split == Split::Test);
            print(json!({
                "out": out,
                "strategy": strategy,
                "monitor_accuracy": last.map(|m| m.accuracy),
                "model_hash": result.params.fingerprint(),
            }));
        }
        Command::Eval { model, key, data } => {
            let mut store = read_model(&model)?;
            if let Some(k) = key {
                store = unlock(&LockedModel::from_params(store), &read_key(&k)?)?;
            }
            let data = data.load(Split::Test)?;
            print(serde_json::to_value(evaluate(&store, &data)?)?);
        }
        Command::Bounds {
            thm1_mc,
            adapted,
            reference,
            data,
            epsilon,
            t,
        } => {
            if thm1_mc.is_none() && adapted.is_none() {
                return Err(Error::Validation(
                    "nothing to do: give --thm1-mc and/or --adapted/--reference/--data".into(),
                ));
            }
            let mut out = serde_json::Map::new();
            if let Some(s) = thm1_mc {
                let (trials, configs, seed) = parse_thm1(&s)?;
                let summary = thm1_check(configs, trials, seed)?;
                out.insert("bound_holds".into(), json!(summary.violations == 0));
                out.insert("thm1".into(), serde_json::to_value(summary)?);
            }
            if let (Some(a), Some(r), Some(d)) = (adapted, reference, data) {
                let tilde = read_model(&a)?;
                let hat = read_model(&r)?;
                let cfg = BoundConfig {
                    epsilon,
                    t,
                    ..BoundConfig::default()
                };
                let constants = estimate_constants(&hat, &d.load(Split::Train)?, cfg)?;
                out.insert(
                    "slack".into(),
                    serde_json::to_value(slack_report(&tilde, &hat, &constants)?)?,
                );
            }
            print(serde_json::Value::Object(out));
        }
        Command::RefreshKey {
            adapted,
            key,
            locked,
            out,
        } => {
            let adapted = read_model(&adapted)?;
            let old = read_key(&key)?;
            let locked = LockedModel::from_params(read_model(&locked)?);
            let fresh = refresh_key(&adapted, &old, &locked)?;
            let key_hash = write_key(&out, &fresh)?;
            print(
                json!({"out": out, "key_hash": key_hash, "base_model_hash": fresh.base_model_hash}),
            );
        }
        Command::Pipeline {
            manifest,
            out,
            seed,
        } => {
            let m = ExperimentManifest::load(&manifest)?;
            let seed = seed_from_env(seed.unwrap_or(m.seed))?;
            let base_dir = manifest.parent().unwrap_or(Path::new("."));
            let out = out.or_else(|| m.output_dir.as_ref().map(|d| base_dir.join(d)));
            let report = run_pipeline(&m, seed, base_dir, out.as_deref())?;
            let runs: Vec<_> = report
                .runs
                .iter()
                .map(|r| {
                    json!({
                        "label": r.label,
                        "authorized": r.authorized.accuracy,
                        "unauthorized": r.unauthorized.as_ref().map(|u| u.accuracy),
                    })
                })
                .collect();
            print(json!({
                "name": report.name,
                "seed": report.seed,
                "out": out,
                "base_model_hash": report.base_model_hash,
                "reference_accuracy": report.reference_accuracy,
                "runs": runs,
                "checks": report.checks,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
