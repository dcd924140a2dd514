//! Full and key-only fine-tuning with mini-batch SGD.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate, Dataset, Split};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::keying::{unit_l1_norms, Key, Strategy};
use crate::network::{loss_and_gradient, ModelTag, ParameterStore};
use crate::stats::spearman;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStrategy {
    Full,
    KeyTop,
    KeyPool,
    KeyRandom,
    KeyBottom,
}

impl TrainStrategy {
    /// Key selection strategy matching this training strategy.
    pub fn key_strategy(self) -> Option<Strategy> {
        match self {
            TrainStrategy::Full => None,
            TrainStrategy::KeyTop => Some(Strategy::Top),
            TrainStrategy::KeyPool => Some(Strategy::PoolSample),
            TrainStrategy::KeyRandom => Some(Strategy::Random),
            TrainStrategy::KeyBottom => Some(Strategy::Bottom),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainStrategy::Full => "full",
            TrainStrategy::KeyTop => "key-top",
            TrainStrategy::KeyPool => "key-pool",
            TrainStrategy::KeyRandom => "key-random",
            TrainStrategy::KeyBottom => "key-bottom",
        }
    }
}

impl std::str::FromStr for TrainStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TrainStrategy::Full,
            TrainStrategy::KeyTop,
            TrainStrategy::KeyPool,
            TrainStrategy::KeyRandom,
            TrainStrategy::KeyBottom,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| Error::Validation(format!("unknown training strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: TrainStrategy,
    #[serde(default)]
    pub momentum: f64,
    /// L2 penalty coefficient, applied only to coordinates being updated.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.1,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            strategy: TrainStrategy::Full,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Validation(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Validation(
                "momentum must be in [0, 1) and weight_decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Which flat coordinates a step may change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    allowed: Vec<bool>,
}

impl UpdateMask {
    pub fn full(d: usize) -> Self {
        UpdateMask {
            allowed: vec![true; d],
        }
    }

    pub fn empty(d: usize) -> Self {
        UpdateMask {
            allowed: vec![false; d],
        }
    }

    pub fn from_indices(d: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut m = UpdateMask::empty(d);
        for i in indices {
            *m.allowed
                .get_mut(i)
                .ok_or_else(|| Error::Index(format!("mask index {i} beyond d = {d}")))? = true;
        }
        Ok(m)
    }

    pub fn from_key(d: usize, key: &Key) -> Result<Self> {
        UpdateMask::from_indices(d, key.indices())
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn allows(&self, i: usize) -> bool {
        self.allowed[i]
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// SGD state carried across steps (momentum buffer).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(eta: f64, d: usize) -> Self {
        Sgd {
            eta,
            momentum: 0.0,
            weight_decay: 0.0,
            velocity: vec![0.0; d],
        }
    }

    pub fn from_config(cfg: &TrainConfig, d: usize) -> Self {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            ..Sgd::new(cfg.eta, d)
        }
    }

    /// Applies `θ_j ← θ_j − η g_j` for `j` in the mask; other coordinates are
    /// never written.
    pub fn apply(&mut self, values: &mut [f64], grad: &[f64], mask: &UpdateMask) -> Result<()> {
        if grad.len() != values.len() || mask.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} parameters, {} gradient entries, mask over {}",
                values.len(),
                grad.len(),
                mask.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient coordinate {i} is {} (parameter value {})",
                grad[i], values[i]
            )));
        }
        for (j, v) in values.iter_mut().enumerate() {
            if !mask.allowed[j] {
                continue;
            }
            let mut g = grad[j];
            if self.weight_decay != 0.0 {
                g += self.weight_decay * *v;
            }
            if self.momentum != 0.0 {
                self.velocity[j] = self.momentum * self.velocity[j] + g;
                g = self.velocity[j];
            }
            *v -= self.eta * g;
        }
        Ok(())
    }
}

/// One plain SGD step on the mean cross-entropy of a batch. Returns the
/// batch loss before the step.
pub fn masked_sgd_step(
    params: &mut ParameterStore,
    inputs: &[f64],
    labels: &[usize],
    mask: &UpdateMask,
    eta: f64,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let (loss, grad) = loss_and_gradient(params, inputs, labels)?;
    Sgd::new(eta, params.len()).apply(params.values_mut(), &grad, mask)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: ParameterStore,
    pub metrics: Vec<EpochMetrics>,
    /// Sum over steps of `|Δθ_j|` per flat coordinate.
    pub accumulated: Vec<f64>,
}

/// Trains `params` on `train` with shuffled mini-batches. With a key-only
/// strategy, `key` restricts updates to the key's coordinates.
///
/// `monitor`, when given, is evaluated after every epoch (and at epoch 0)
/// alongside the training set.
pub fn finetune(
    params: &ParameterStore,
    train: &Dataset,
    monitor: Option<&Dataset>,
    config: &TrainConfig,
    key: Option<&Key>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let d = params.len();
    let mask = match (config.strategy, key) {
        (TrainStrategy::Full, None) => UpdateMask::full(d),
        (TrainStrategy::Full, Some(_)) => {
            return Err(Error::Contract("full fine-tuning takes no key".into()))
        }
        (_, Some(k)) => {
            k.validate_for(params)?;
            UpdateMask::from_key(d, k)?
        }
        (s, None) => {
            return Err(Error::Contract(format!(
                "strategy {} needs a key",
                s.name()
            )))
        }
    };
    let mut store = params.clone();
    let mut sgd = Sgd::from_config(config, d);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "finetune/shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut accumulated = vec![0.0; d];
    let mut metrics = Vec::new();
    let record = |epoch: usize, store: &ParameterStore, metrics: &mut Vec<EpochMetrics>| {
        for (split, data) in [(Split::Train, Some(train)), (Split::Test, monitor)] {
            if let Some(data) = data {
                let r = evaluate(store, data)?;
                metrics.push(EpochMetrics {
                    epoch,
                    split,
                    loss: r.loss,
                    accuracy: r.accuracy,
                });
            }
        }
        Ok::<(), Error>(())
    };
    record(0, &store, &mut metrics)?;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train.gather(batch);
            let (_, grad) = loss_and_gradient(&store, &x, &y)?;
            let before = store.values().to_vec();
            sgd.apply(store.values_mut(), &grad, &mask)?;
            for ((a, b), acc) in before.iter().zip(store.values()).zip(&mut accumulated) {
                *acc += (b - a).abs();
            }
        }
        record(epoch, &store, &mut metrics)?;
    }
    let tag = match config.strategy {
        TrainStrategy::Full => ModelTag::FullFinetuned,
        _ => ModelTag::KeyFinetuned,
    };
    if config.epochs > 0 {
        store.set_tag(tag);
    }
    Ok(FinetuneOutcome {
        params: store,
        metrics,
        accumulated,
    })
}

/// Writes metric rows as CSV: `run,epoch,split,loss,accuracy`.
pub fn write_metrics_csv<W: Write>(out: W, runs: &[(&str, &[EpochMetrics])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "epoch", "split", "loss", "accuracy"])?;
    for (run, rows) in runs {
        for m in rows.iter() {
            let split = match m.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            w.write_record([
                run.to_string(),
                m.epoch.to_string(),
                split.to_string(),
                m.loss.to_string(),
                m.accuracy.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `sqrt(Σ_{i ∉ exclude} (a_i − b_i)²)`.
pub fn param_distance(
    a: &ParameterStore,
    b: &ParameterStore,
    exclude: &BTreeSet<usize>,
) -> Result<f64> {
    if a.spec() != b.spec() {
        return Err(Error::Dimension(
            "parameter stores have different architectures".into(),
        ));
    }
    let sq: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(_, (x, y))| (x - y) * (x - y))
        .collect();
    Ok(crate::stats::pairwise_sum(&sq).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub l1_norms: Vec<f64>,
    pub accumulated: Vec<f64>,
    pub spearman: Option<f64>,
}

/// Per hidden unit: initial incoming ℓ1 norm vs. total |update| on its
/// incoming weights during full fine-tuning.
pub fn grad_accumulation_profile(
    params: &ParameterStore,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<LayerProfile>> {
    if config.epochs == 0 {
        return Err(Error::Contract("profile needs at least one epoch".into()));
    }
    let cfg = TrainConfig {
        strategy: TrainStrategy::Full,
        ..config.clone()
    };
    let run = finetune(params, data, None, &cfg, None)?;
    profile_from_accumulated(params, &run.accumulated)
}

pub fn profile_from_accumulated(
    params: &ParameterStore,
    accumulated: &[f64],
) -> Result<Vec<LayerProfile>> {
    let hidden = params.layout().len().saturating_sub(1);
    (0..hidden)
        .map(|layer| {
            let lay = params.layout()[layer];
            let l1_norms = unit_l1_norms(params, layer)?;
            let acc: Vec<f64> = (0..lay.units)
                .map(|u| accumulated[lay.row_range(u)].iter().sum())
                .collect();
            Ok(LayerProfile {
                layer,
                spearman: spearman(&l1_norms, &acc),
                l1_norms,
                accumulated: acc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobsConfig};
    use crate::keying::{localize_key, KeySpec};
    use crate::network::{init_network, NetworkSpec};

    fn blobs() -> Dataset {
        gen_blobs(&BlobsConfig::new(3, 4, 20, 0.1, 1), Split::Train).unwrap()
    }

    fn net() -> ParameterStore {
        init_network(&NetworkSpec::mlp(&[4, 8, 3]).unwrap(), 2).unwrap()
    }

    #[test]
    fn empty_mask_is_noop() {
        let mut p = net();
        let before = p.clone();
        let d = blobs();
        let (x, y) = d.gather(&[0, 1, 2]);
        let mask = UpdateMask::empty(p.len());
        masked_sgd_step(&mut p, &x, &y, &mask, 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_step_by_hand() {
        // L(θ) = ½‖θ‖² so ∇L = θ and one step gives (1 − η)θ
        let mut v = vec![1.0, -2.0, 4.0];
        let g = v.clone();
        Sgd::new(0.25, 3)
            .apply(&mut v, &g, &UpdateMask::full(3))
            .unwrap();
        assert_eq!(v, vec![0.75, -1.5, 3.0]);
        let mut w = vec![1.0, f64::NAN];
        let bad = [0.0, f64::INFINITY];
        assert!(matches!(
            Sgd::new(0.1, 2).apply(&mut w, &bad, &UpdateMask::full(2)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn key_mask_support() {
        let p = net();
        let key = localize_key(&p, &KeySpec::top(0.25)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            strategy: TrainStrategy::KeyTop,
            ..TrainConfig::default()
        };
        let out = finetune(&p, &blobs(), None, &cfg, Some(&key)).unwrap();
        let s = key.index_set();
        let mut changed = 0;
        for (i, (a, b)) in p.values().iter().zip(out.params.values()).enumerate() {
            if s.contains(&i) {
                changed += usize::from(a != b);
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "coordinate {i} moved");
            }
        }
        assert!(changed > 0);
        assert_eq!(out.params.tag(), ModelTag::KeyFinetuned);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let p = net();
        let d = blobs();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(finetune(&p, &d, None, &cfg, None).unwrap().params, p);
        let cfg = TrainConfig {
            epochs: 2,
            momentum: 0.5,
            ..TrainConfig::default()
        };
        let a = finetune(&p, &d, Some(&d), &cfg, None).unwrap();
        let b = finetune(&p, &d, Some(&d), &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 6);
    }

    #[test]
    fn key_strategy_requires_key() {
        let cfg = TrainConfig {
            strategy: TrainStrategy::KeyTop,
            ..TrainConfig::default()
        };
        assert!(matches!(
            finetune(&net(), &blobs(), None, &cfg, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn distances() {
        let spec = NetworkSpec::mlp(&[1, 1, 1]).unwrap();
        let a = ParameterStore::from_values(
            spec.clone(),
            vec![1.0, 2.0, 3.0, 0.0],
            ModelTag::Pretrained,
        )
        .unwrap();
        let b = ParameterStore::from_values(spec, vec![1.0, 0.0, 0.0, 0.0], ModelTag::Pretrained)
            .unwrap();
        let ex: BTreeSet<usize> = [0].into();
        assert!((param_distance(&a, &b, &ex).unwrap() - 13f64.sqrt()).abs() < 1e-15);
        assert_eq!(param_distance(&a, &a, &BTreeSet::new()).unwrap(), 0.0);
        let all: BTreeSet<usize> = (0..4).collect();
        assert_eq!(param_distance(&a, &b, &all).unwrap(), 0.0);
    }

    #[test]
    fn saturated_model_has_null_correlation() {
        // every label is 0 and the output bias makes p(0) round to exactly 1
        let spec = NetworkSpec::mlp(&[4, 3, 3]).unwrap();
        let mut p = ParameterStore::zeros(spec, ModelTag::Pretrained).unwrap();
        let b = p.layout()[1].bias_range();
        p.values_mut()[b].copy_from_slice(&[1000.0, 0.0, 0.0]);
        let d = Dataset::new(vec![0.5; 4 * 6], vec![0; 6], 4, 3, Split::Train, "const").unwrap();
        let prof = grad_accumulation_profile(&p, &d, &TrainConfig::default()).unwrap();
        assert!(prof[0].accumulated.iter().all(|&a| a == 0.0));
        assert_eq!(prof[0].spearman, None);
    }

    #[test]
    fn duplicated_units_accumulate_equally() {
        let mut p = net();
        let lay0 = p.layout()[0];
        let lay1 = p.layout()[1];
        let row0 = p.values()[lay0.row_range(0)].to_vec();
        p.values_mut()[lay0.row_range(1)].copy_from_slice(&row0);
        for r in 0..lay1.units {
            let base = lay1.weight_offset + r * lay1.fan_in;
            p.values_mut()[base + 1] = p.values()[base];
        }
        let prof = grad_accumulation_profile(
            &p,
            &blobs(),
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(prof[0].accumulated[0], prof[0].accumulated[1]);
    }
}
