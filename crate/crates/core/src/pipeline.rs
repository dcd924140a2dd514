//! End-to-end experiment: pretrain on a source task, cut and lock a key,
//! adapt on a target task under each strategy, and report accuracies,
//! exactness checks and bound diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{
    finetune, param_distance, profile_from_accumulated, write_metrics_csv, EpochMetrics,
    LayerProfile, TrainConfig, TrainStrategy,
};
use crate::bounds::{
    distance_threshold, estimate_constants, gradient_ordering_check, slack_report, thm1_check,
    BoundConfig, BoundReport, Thm1Summary,
};
use crate::data::{
    evaluate, gen_blobs, load_csv, load_idx, BlobsConfig, Dataset, EvalReport, Split,
};
use crate::error::{Error, Result};
use crate::hash::{derive_seed, Fingerprint};
use crate::keying::{key_stats, localize_key, selection_count, Key, KeySpec, KeyStats, Strategy};
use crate::locking::{lock, reference_model, refresh_key, unlock};
use crate::model_io::{write_atomic, write_key, write_model};
use crate::network::{init_network, ModelTag, NetworkSpec, ParameterStore};

pub const SEED_ENV: &str = "ADALOC_SEED";
/// Largest key size, as a fraction of all parameters, accepted as compact.
pub const KEY_PARAM_FRACTION_CEILING: f64 = 0.15;
/// Unusable means accuracy within this many points of chance.
pub const CHANCE_TOLERANCE_POINTS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Synthetic clusters. Centres come from `seed`, or from the run seed and
    /// `task` when `seed` is absent; `stream` picks the noise draw.
    Blobs {
        class_count: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        task: String,
        #[serde(default)]
        stream: u64,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "one")]
        radius: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        per_class: Option<usize>,
        #[serde(default)]
        skip: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        class_count: Option<usize>,
        #[serde(default)]
        per_class: Option<usize>,
        #[serde(default)]
        skip: usize,
    },
}

fn one() -> f64 {
    1.0
}

impl DatasetConfig {
    pub fn load(&self, base_dir: &Path, run_seed: u64, split: Split) -> Result<Dataset> {
        match self {
            DatasetConfig::Blobs {
                class_count,
                dim,
                per_class,
                spread,
                task,
                stream,
                seed,
                radius,
            } => {
                let cfg = BlobsConfig {
                    class_count: *class_count,
                    dim: *dim,
                    per_class: *per_class,
                    spread: *spread,
                    seed: seed.unwrap_or_else(|| derive_seed(run_seed, &format!("task/{task}"))),
                    stream: *stream,
                    radius: *radius,
                };
                gen_blobs(&cfg, split)
            }
            DatasetConfig::Idx {
                images,
                labels,
                per_class,
                skip,
            } => {
                let d = load_idx(&base_dir.join(images), &base_dir.join(labels), split)?;
                let mut d = window(d, *per_class, *skip)?;
                d.provenance = format!(
                    "idx:{},{} [per_class={per_class:?}, skip={skip}]",
                    images.display(),
                    labels.display()
                );
                Ok(d)
            }
            DatasetConfig::Csv {
                path,
                class_count,
                per_class,
                skip,
            } => {
                let d = load_csv(&base_dir.join(path), *class_count, split)?;
                let mut d = window(d, *per_class, *skip)?;
                d.provenance = format!(
                    "csv:{} [per_class={per_class:?}, skip={skip}]",
                    path.display()
                );
                Ok(d)
            }
        }
    }
}

fn window(d: Dataset, per_class: Option<usize>, skip: usize) -> Result<Dataset> {
    match per_class {
        Some(n) => d.stratified(n, skip),
        None if skip == 0 => Ok(d),
        None => Err(Error::Validation("`skip` needs `per_class`".into())),
    }
}

/// One adaptation run on the target task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub label: String,
    pub strategy: TrainStrategy,
    /// Candidate pool for `key-pool`; ignored otherwise.
    #[serde(default)]
    pub pool_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsSection {
    #[serde(flatten)]
    pub config: BoundConfig,
    /// Random variance-bound cases to check (0 skips the check).
    #[serde(default)]
    pub thm1_configs: usize,
    #[serde(default = "default_trials")]
    pub thm1_trials: usize,
    /// Test samples used for the gradient-ordering measurement.
    #[serde(default = "default_ordering_samples")]
    pub ordering_samples: usize,
}

fn default_trials() -> usize {
    10_000
}

fn default_ordering_samples() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub seed: u64,
    pub network: NetworkSpec,
    /// D*: the task the base model is trained on.
    pub source: DatasetConfig,
    /// D̂: the adaptation task.
    pub target_train: DatasetConfig,
    pub target_test: DatasetConfig,
    pub pretrain: TrainConfig,
    /// Zero the output layer before adaptation (the target task gets a fresh
    /// head).
    #[serde(default = "yes")]
    pub reset_head: bool,
    pub rho: f64,
    /// Shared hyperparameters of every adaptation run; `strategy` and `seed`
    /// are overridden per run.
    pub finetune: TrainConfig,
    pub strategies: Vec<StrategyRun>,
    pub bounds: BoundsSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: ExperimentManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        KeySpec::top(self.rho).validate()?;
        let mut labels = BTreeSet::new();
        for s in &self.strategies {
            if !labels.insert(s.label.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate strategy label `{}`",
                    s.label
                )));
            }
            if s.strategy == TrainStrategy::KeyPool && s.pool_fraction.is_none() {
                return Err(Error::Validation(format!(
                    "strategy `{}` needs a pool_fraction",
                    s.label
                )));
            }
        }
        if !self
            .strategies
            .iter()
            .any(|s| s.strategy == TrainStrategy::Full)
        {
            return Err(Error::Validation(
                "a `full` run is required as the reference".into(),
            ));
        }
        if !self
            .strategies
            .iter()
            .any(|s| s.strategy == TrainStrategy::KeyTop)
        {
            return Err(Error::Validation("a `key-top` run is required".into()));
        }
        Ok(())
    }

    /// Checks that file-backed datasets exist relative to `base_dir`.
    pub fn check_files(&self, base_dir: &Path) -> Result<()> {
        for d in [&self.source, &self.target_train, &self.target_test] {
            let paths: Vec<&PathBuf> = match d {
                DatasetConfig::Blobs { .. } => vec![],
                DatasetConfig::Idx { images, labels, .. } => vec![images, labels],
                DatasetConfig::Csv { path, .. } => vec![path],
            };
            for p in paths {
                let full = base_dir.join(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "missing data file {}",
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn key_spec(&self, run: &StrategyRun, seed: u64) -> Option<KeySpec> {
        let strategy = run.strategy.key_strategy()?;
        Some(KeySpec {
            rho: self.rho,
            pool_fraction: match strategy {
                Strategy::PoolSample => run.pool_fraction.unwrap_or(self.rho),
                _ => self.rho,
            },
            strategy,
            seed: derive_seed(seed, &format!("key/{}", run.label)),
        })
    }
}

/// Seed from `ADALOC_SEED` if set, else `fallback`.
pub fn seed_from_env(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::Validation(format!("{SEED_ENV}=`{v}`: {e}"))),
        Err(_) => Ok(fallback),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub provenance: String,
    pub count: usize,
    pub class_count: usize,
    pub max_norm: f64,
    pub hash: Fingerprint,
}

fn dataset_hash(d: &Dataset) -> Fingerprint {
    let mut bytes = Vec::with_capacity(d.inputs().len() * 8 + d.len() * 8);
    for v in d.inputs() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &l in d.labels() {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    Fingerprint::of(&bytes)
}

fn summarize(d: &Dataset) -> DatasetSummary {
    DatasetSummary {
        provenance: d.provenance.clone(),
        count: d.len(),
        class_count: d.class_count(),
        max_norm: d.max_norm(),
        hash: dataset_hash(d),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub stats: KeyStats,
    /// Selected units per layer equal `ceil(ρ·units)` in every layer.
    pub unit_fraction_exact: bool,
    pub param_fraction_ceiling: f64,
    pub within_ceiling: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub strategy: TrainStrategy,
    pub key_hash: Option<Fingerprint>,
    pub locked_model_hash: Option<Fingerprint>,
    pub refreshed_key_hash: Option<Fingerprint>,
    pub compactness: Option<Compactness>,
    /// Accuracy of the adapted model (unlocked with the refreshed key for key
    /// strategies).
    pub authorized: EvalReport,
    /// Accuracy of the locked model, for key strategies.
    pub unauthorized: Option<EvalReport>,
    /// Every non-key coordinate bit-identical after adaptation.
    pub masking_exact: Option<bool>,
    /// Unlocking with the refreshed key reproduces the adapted model exactly.
    pub unlock_matches: Option<bool>,
    /// `‖θ − θ̂‖` to the full fine-tune.
    pub distance_to_full: f64,
    pub final_model_hash: Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingSummary {
    pub samples: usize,
    pub per_layer_fraction: Vec<f64>,
    pub mean_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsOutcome {
    /// Key-top adapted model against the full fine-tune.
    pub slack: BoundReport,
    /// ε at which the threshold becomes zero for the measured constants.
    pub epsilon_for_zero_threshold: f64,
    /// Key-top model inside the practical solution set.
    pub in_practical_set: Option<bool>,
    pub thm1: Option<Thm1Summary>,
    pub ordering: OrderingSummary,
    /// Initial ℓ1 norm vs accumulated update during full fine-tuning.
    pub update_profile: Vec<LayerProfile>,
    pub mean_update_spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    pub chance_accuracy: f64,
    /// key-top authorized − full, in points
    pub key_top_gap_points: f64,
    pub unauthorized_within_chance: bool,
    pub bottom_gap_points: Option<f64>,
    pub masking_exact: bool,
    pub unlock_exact: bool,
    pub key_compact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub manifest_hash: Fingerprint,
    pub datasets: BTreeMap<String, DatasetSummary>,
    pub pretrain_source_accuracy: f64,
    pub base_model_hash: Fingerprint,
    pub reference_accuracy: f64,
    pub base_target_accuracy: f64,
    pub runs: Vec<RunReport>,
    pub bounds: BoundsOutcome,
    pub checks: Checks,
    /// SHA-256 of every file written, keyed by path relative to the output
    /// directory.
    pub artifacts: BTreeMap<String, Fingerprint>,
}

impl ExperimentReport {
    pub fn run(&self, label: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

struct Artifacts<'a> {
    dir: Option<&'a Path>,
    hashes: BTreeMap<String, Fingerprint>,
}

impl Artifacts<'_> {
    fn model(&mut self, rel: &str, store: &ParameterStore) -> Result<()> {
        if let Some(dir) = self.dir {
            let p = dir.join(rel);
            ensure_parent(&p)?;
            let h = write_model(&p, store)?;
            self.hashes.insert(rel.to_string(), h);
        }
        Ok(())
    }

    fn key(&mut self, rel: &str, key: &Key) -> Result<()> {
        if let Some(dir) = self.dir {
            let p = dir.join(rel);
            ensure_parent(&p)?;
            let h = write_key(&p, key)?;
            self.hashes.insert(rel.to_string(), h);
        }
        Ok(())
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = self.dir {
            let p = dir.join(rel);
            ensure_parent(&p)?;
            write_atomic(&p, bytes)?;
            self.hashes.insert(rel.to_string(), Fingerprint::of(bytes));
        }
        Ok(())
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Runs the experiment. `base_dir` resolves relative data paths; when
/// `out_dir` is given, models, keys, `curves.csv` and `report.json` are
/// written there.
pub fn run_pipeline(
    manifest: &ExperimentManifest,
    seed: u64,
    base_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    stage(
        "manifest",
        manifest
            .validate()
            .and_then(|_| manifest.check_files(base_dir)),
    )?;
    let manifest_hash =
        Fingerprint::of(&serde_json::to_vec(manifest).expect("manifest serializes"));
    let mut art = Artifacts {
        dir: out_dir,
        hashes: BTreeMap::new(),
    };
    if let Some(d) = out_dir {
        stage(
            "output",
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        )?;
    }

    let (source, train, test) = stage(
        "data",
        (|| {
            Ok((
                manifest.source.load(base_dir, seed, Split::Train)?,
                manifest.target_train.load(base_dir, seed, Split::Train)?,
                manifest.target_test.load(base_dir, seed, Split::Test)?,
            ))
        })(),
    )?;
    let mut datasets = BTreeMap::new();
    datasets.insert("source".to_string(), summarize(&source));
    datasets.insert("target_train".to_string(), summarize(&train));
    datasets.insert("target_test".to_string(), summarize(&test));

    // θ*: trained on the source task
    let mut curves: Vec<(String, Vec<EpochMetrics>)> = Vec::new();
    let (base, pretrain_source_accuracy) = stage(
        "pretrain",
        (|| {
            let init = init_network(&manifest.network, derive_seed(seed, "init"))?;
            let cfg = TrainConfig {
                strategy: TrainStrategy::Full,
                seed: derive_seed(seed, "pretrain"),
                ..manifest.pretrain.clone()
            };
            let out = finetune(&init, &source, None, &cfg, None)?;
            curves.push(("pretrain".into(), out.metrics));
            let acc = evaluate(&out.params, &source)?.accuracy;
            let mut base = out.params.with_tag(ModelTag::Pretrained);
            if manifest.reset_head {
                let last = *base.layout().last().expect("layer");
                base.values_mut()[last.weight_offset..last.end()].fill(0.0);
            }
            Ok((base, acc))
        })(),
    )?;
    stage("write base", art.model("models/base.adlm", &base))?;
    let base_target_accuracy = stage("evaluate base", evaluate(&base, &test))?.accuracy;
    let reference_accuracy = stage(
        "evaluate reference",
        evaluate(&reference_model(&base), &test),
    )?
    .accuracy;

    let ft_seed = derive_seed(seed, "finetune");
    let full_label = manifest
        .strategies
        .iter()
        .find(|s| s.strategy == TrainStrategy::Full)
        .expect("validated")
        .label
        .clone();
    let full_cfg = TrainConfig {
        strategy: TrainStrategy::Full,
        seed: ft_seed,
        ..manifest.finetune.clone()
    };
    let full = stage(
        "full fine-tune",
        finetune(&base, &train, Some(&test), &full_cfg, None),
    )?;
    let theta_hat = full.params.clone();

    let mut runs = Vec::new();
    let mut key_top_model = None;
    for run in &manifest.strategies {
        let name = format!("adapt {}", run.label);
        let report = if run.strategy == TrainStrategy::Full {
            curves.push((run.label.clone(), full.metrics.clone()));
            stage(
                &name,
                art.model(&format!("models/{}.adlm", run.label), &theta_hat),
            )?;
            RunReport {
                label: run.label.clone(),
                strategy: run.strategy,
                key_hash: None,
                locked_model_hash: None,
                refreshed_key_hash: None,
                compactness: None,
                authorized: stage(&name, evaluate(&theta_hat, &test))?,
                unauthorized: None,
                masking_exact: None,
                unlock_matches: None,
                distance_to_full: 0.0,
                final_model_hash: theta_hat.fingerprint(),
            }
        } else {
            let spec = manifest.key_spec(run, seed).expect("key strategy");
            let (report, adapted, metrics) = stage(
                &name,
                key_run(
                    run, &spec, &base, &train, &test, manifest, ft_seed, &theta_hat, &mut art,
                ),
            )?;
            curves.push((run.label.clone(), metrics));
            if run.strategy == TrainStrategy::KeyTop && key_top_model.is_none() {
                key_top_model = Some(adapted);
            }
            report
        };
        runs.push(report);
    }

    let theta_tilde = key_top_model.expect("validated: key-top run present");
    let bounds = stage(
        "bounds",
        bounds_outcome(
            manifest,
            seed,
            &base,
            &theta_tilde,
            &theta_hat,
            &train,
            &test,
            &full.accumulated,
        ),
    )?;

    let chance = 1.0 / test.class_count() as f64;
    let full_acc = runs
        .iter()
        .find(|r| r.label == full_label)
        .expect("full")
        .authorized
        .accuracy;
    let top = runs
        .iter()
        .find(|r| r.strategy == TrainStrategy::KeyTop)
        .expect("top");
    let bottom = runs.iter().find(|r| r.strategy == TrainStrategy::KeyBottom);
    let keyed: Vec<&RunReport> = runs
        .iter()
        .filter(|r| r.strategy != TrainStrategy::Full)
        .collect();
    let checks = Checks {
        chance_accuracy: chance,
        key_top_gap_points: 100.0 * (top.authorized.accuracy - full_acc),
        unauthorized_within_chance: keyed.iter().all(|r| {
            r.unauthorized
                .as_ref()
                .is_some_and(|u| (100.0 * (u.accuracy - chance)).abs() <= CHANCE_TOLERANCE_POINTS)
        }),
        bottom_gap_points: bottom
            .map(|b| 100.0 * (top.authorized.accuracy - b.authorized.accuracy)),
        masking_exact: keyed.iter().all(|r| r.masking_exact == Some(true)),
        unlock_exact: keyed.iter().all(|r| r.unlock_matches == Some(true)),
        key_compact: keyed.iter().all(|r| {
            r.compactness
                .as_ref()
                .is_some_and(|c| c.unit_fraction_exact && c.within_ceiling)
        }),
    };

    let mut csv = Vec::new();
    let refs: Vec<(&str, &[EpochMetrics])> = curves
        .iter()
        .map(|(l, m)| (l.as_str(), m.as_slice()))
        .collect();
    stage("curves", write_metrics_csv(&mut csv, &refs))?;
    stage("curves", art.bytes("curves.csv", &csv))?;

    let report = ExperimentReport {
        name: manifest.name.clone(),
        seed,
        manifest_hash,
        datasets,
        pretrain_source_accuracy,
        base_model_hash: base.fingerprint(),
        reference_accuracy,
        base_target_accuracy,
        runs,
        bounds,
        checks,
        artifacts: art.hashes.clone(),
    };
    if let Some(dir) = out_dir {
        let json = report.to_json()?;
        stage(
            "report",
            write_atomic(&dir.join("report.json"), json.as_bytes()),
        )?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn key_run(
    run: &StrategyRun,
    spec: &KeySpec,
    base: &ParameterStore,
    train: &Dataset,
    test: &Dataset,
    manifest: &ExperimentManifest,
    ft_seed: u64,
    theta_hat: &ParameterStore,
    art: &mut Artifacts<'_>,
) -> Result<(RunReport, ParameterStore, Vec<EpochMetrics>)> {
    let key = localize_key(base, spec)?;
    let locked = lock(base, &key)?;
    art.key(&format!("keys/{}.adak", run.label), &key)?;
    art.model(
        &format!("models/{}-locked.adlm", run.label),
        locked.params(),
    )?;

    let cfg = TrainConfig {
        strategy: run.strategy,
        seed: ft_seed,
        ..manifest.finetune.clone()
    };
    let out = finetune(base, train, Some(test), &cfg, Some(&key))?;
    let adapted = out.params;

    let in_key = key.index_set();
    let masking_exact = base
        .values()
        .iter()
        .zip(adapted.values())
        .enumerate()
        .all(|(i, (a, b))| in_key.contains(&i) || a.to_bits() == b.to_bits());
    if !masking_exact {
        return Err(Error::Validation(
            "non-key coordinates changed during key-only adaptation".into(),
        ));
    }
    let refreshed = refresh_key(&adapted, &key, &locked)?;
    art.key(&format!("keys/{}-refreshed.adak", run.label), &refreshed)?;
    let restored = unlock(&locked, &refreshed)?;
    let mut expect = adapted.clone();
    expect.set_tag(refreshed.restores);
    let unlock_matches = restored == expect;
    art.model(&format!("models/{}.adlm", run.label), &restored)?;

    let stats = key_stats(base, &key);
    let unit_fraction_exact = stats
        .selected_per_layer
        .iter()
        .zip(&stats.units_per_layer)
        .all(|(&s, &n)| s == selection_count(spec.rho, n));
    let compactness = Compactness {
        within_ceiling: stats.param_fraction <= KEY_PARAM_FRACTION_CEILING,
        param_fraction_ceiling: KEY_PARAM_FRACTION_CEILING,
        unit_fraction_exact,
        stats,
    };
    let report = RunReport {
        label: run.label.clone(),
        strategy: run.strategy,
        key_hash: Some(Fingerprint::of(key.to_json()?.as_bytes())),
        locked_model_hash: Some(locked.fingerprint()),
        refreshed_key_hash: Some(Fingerprint::of(refreshed.to_json()?.as_bytes())),
        compactness: Some(compactness),
        authorized: evaluate(&restored, test)?,
        unauthorized: Some(evaluate(locked.params(), test)?),
        masking_exact: Some(masking_exact),
        unlock_matches: Some(unlock_matches),
        distance_to_full: param_distance(&restored, theta_hat, &BTreeSet::new())?,
        final_model_hash: restored.fingerprint(),
    };
    Ok((report, restored, out.metrics))
}

#[allow(clippy::too_many_arguments)]
fn bounds_outcome(
    manifest: &ExperimentManifest,
    seed: u64,
    base: &ParameterStore,
    theta_tilde: &ParameterStore,
    theta_hat: &ParameterStore,
    train: &Dataset,
    test: &Dataset,
    full_accumulated: &[f64],
) -> Result<BoundsOutcome> {
    let constants = estimate_constants(theta_hat, train, manifest.bounds.config)?;
    let slack = slack_report(theta_tilde, theta_hat, &constants)?;
    let l = constants.depth as i32;
    let epsilon_for_zero_threshold = constants.b_sigma
        * constants.b_theta
        * constants.b_sigma.powi(l - 1)
        * constants.b_theta.powi(l)
        * constants.b_x;
    let th = distance_threshold(&constants);
    let in_practical_set = (!th.vacuous).then_some(slack.empirical_distance <= th.threshold);

    let thm1 = if manifest.bounds.thm1_configs > 0 {
        Some(thm1_check(
            manifest.bounds.thm1_configs,
            manifest.bounds.thm1_trials,
            derive_seed(seed, "thm1"),
        )?)
    } else {
        None
    };

    let layers = base.layout().len();
    let samples = manifest.bounds.ordering_samples.min(test.len());
    let mut per_layer_fraction = Vec::new();
    for layer in 1..layers {
        if base.layout()[layer - 1].units < 2 {
            continue;
        }
        let mut total = 0.0;
        for i in 0..samples {
            let (x, y) = test.sample(i * test.len() / samples.max(1));
            total += gradient_ordering_check(theta_hat, x, y, layer)?.fraction;
        }
        per_layer_fraction.push(if samples == 0 {
            1.0
        } else {
            total / samples as f64
        });
    }
    let ordering = OrderingSummary {
        samples,
        mean_fraction: crate::stats::mean(&per_layer_fraction),
        per_layer_fraction,
    };

    let update_profile = profile_from_accumulated(base, full_accumulated)?;
    let rhos: Vec<f64> = update_profile.iter().filter_map(|p| p.spearman).collect();
    Ok(BoundsOutcome {
        slack,
        epsilon_for_zero_threshold,
        in_practical_set,
        thm1,
        ordering,
        mean_update_spearman: (!rhos.is_empty()).then(|| crate::stats::mean(&rhos)),
        update_profile,
    })
}
