//! Key localization: per-layer ℓ1 ranking of units, pool sampling, baseline
//! selections, and the `.adak` key file codec.
//!
//! A key covers, for every selected unit of a hidden layer, its incoming
//! weights, its bias, and the weights of the next layer that read its output.
//! The output layer itself is never ranked.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{derive_seed, Fingerprint};
use crate::network::{fingerprint_values, LayerLayout, ModelTag, ParameterStore};

pub const KEY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Top,
    PoolSample,
    Random,
    Bottom,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Strategy::Top),
            "pool-sample" | "pool" => Ok(Strategy::PoolSample),
            "random" => Ok(Strategy::Random),
            "bottom" => Ok(Strategy::Bottom),
            _ => Err(Error::Validation(format!("unknown key strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySpec {
    pub rho: f64,
    pub pool_fraction: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for KeySpec {
    fn default() -> Self {
        KeySpec {
            rho: 0.05,
            pool_fraction: 0.05,
            strategy: Strategy::Top,
            seed: 0,
        }
    }
}

impl KeySpec {
    pub fn top(rho: f64) -> Self {
        KeySpec {
            rho,
            pool_fraction: rho,
            ..KeySpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.rho <= self.pool_fraction
            && self.pool_fraction <= 1.0
            && self.rho.is_finite();
        if !ok {
            return Err(Error::Validation(format!(
                "need 0 < rho ({}) <= pool_fraction ({}) <= 1",
                self.rho, self.pool_fraction
            )));
        }
        Ok(())
    }
}

/// Number of units picked from a layer of `units` at fraction `fraction`.
///
/// `ceil` with a small tolerance so that e.g. `0.3 · 10` selects 3 despite
/// rounding in the product; never less than one unit.
pub fn selection_count(fraction: f64, units: usize) -> usize {
    let raw = (fraction * units as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(units)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub unit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Key {
    pub version: u32,
    /// Fingerprint of the locked model this key unlocks.
    pub base_model_hash: Fingerprint,
    pub spec: KeySpec,
    pub unit_list: Vec<UnitRef>,
    /// `(flat index, value)` pairs, strictly increasing by index.
    pub entries: Vec<(usize, f64)>,
    /// Tag given to the model reconstructed by unlocking.
    pub restores: ModelTag,
}

impl Key {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn index_set(&self) -> BTreeSet<usize> {
        self.indices().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Structural checks that need no model.
    pub fn validate(&self) -> Result<()> {
        if self.version != KEY_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported key version {}",
                self.version
            )));
        }
        if self.entries.is_empty() {
            return Err(Error::Validation("key has no entries".into()));
        }
        for w in self.entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Validation(format!(
                    "key indices not strictly increasing at {} -> {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(i, _)) = self.entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "key value at index {i} is not finite"
            )));
        }
        Ok(())
    }

    /// Checks the key against a concrete parameter layout.
    pub fn validate_for(&self, store: &ParameterStore) -> Result<()> {
        self.validate()?;
        let d = store.len();
        if let Some(&(i, _)) = self.entries.last() {
            if i >= d {
                return Err(Error::Validation(format!("key index {i} beyond d = {d}")));
            }
        }
        if !self.unit_list.is_empty() {
            let expected = unit_indices(store.layout(), &self.unit_list)?;
            if expected != self.index_set() {
                return Err(Error::Validation(format!(
                    "key entries do not match its unit list: {} expected, {} present",
                    expected.len(),
                    self.entries.len()
                )));
            }
        }
        Ok(())
    }

    /// Key over an arbitrary index set, values read from `store`. The unit
    /// list is left empty.
    pub fn from_indices(
        store: &ParameterStore,
        indices: impl IntoIterator<Item = usize>,
        spec: KeySpec,
    ) -> Result<Key> {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        build_key(store, set, Vec::new(), spec)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Key> {
        let key: Key = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        key.validate()?;
        Ok(key)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let before: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

/// Sum of |w| over each unit's incoming weights (rows for dense layers,
/// whole filters for conv layers). Biases are not counted.
pub fn unit_l1_norms(store: &ParameterStore, layer: usize) -> Result<Vec<f64>> {
    let lay = *store.layer(layer)?;
    let w = store.weights(layer)?;
    Ok(w.chunks(lay.fan_in)
        .map(|row| row.iter().map(|v| v.abs()).sum())
        .collect())
}

/// Flat indices owned by one unit: incoming weights, bias, and the
/// successor layer's weights that read this unit's output.
pub fn unit_indices_one(layout: &[LayerLayout], u: UnitRef) -> Result<Vec<usize>> {
    let lay = layout
        .get(u.layer)
        .ok_or_else(|| Error::Index(format!("layer {}", u.layer)))?;
    if u.unit >= lay.units {
        return Err(Error::Index(format!(
            "unit {} of {} in layer {}",
            u.unit, lay.units, u.layer
        )));
    }
    let next = layout.get(u.layer + 1).ok_or_else(|| {
        Error::Index(format!(
            "layer {} is the output layer and cannot be keyed",
            u.layer
        ))
    })?;
    let mut out: Vec<usize> = lay.row_range(u.unit).collect();
    out.push(lay.bias_offset + u.unit);
    // Each unit owns a contiguous block of every successor row: one column
    // for dense→dense, one feature map for conv→dense, one k×k slice for
    // conv→conv.
    let block = next.fan_in / lay.units;
    for r in 0..next.units {
        let start = next.weight_offset + r * next.fan_in + u.unit * block;
        out.extend(start..start + block);
    }
    Ok(out)
}

pub fn unit_indices(layout: &[LayerLayout], units: &[UnitRef]) -> Result<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    for &u in units {
        set.extend(unit_indices_one(layout, u)?);
    }
    Ok(set)
}

fn ranked(norms: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| {
        let c = if descending {
            norms[b].total_cmp(&norms[a])
        } else {
            norms[a].total_cmp(&norms[b])
        };
        c.then(a.cmp(&b))
    });
    order
}

/// Units picked from each hidden layer under `spec`.
pub fn select_units(store: &ParameterStore, spec: &KeySpec) -> Result<Vec<UnitRef>> {
    spec.validate()?;
    let hidden = store.layout().len().saturating_sub(1);
    if hidden == 0 {
        return Err(Error::Contract(
            "keying needs at least one hidden layer (two layers total)".into(),
        ));
    }
    let mut out = Vec::new();
    for layer in 0..hidden {
        let norms = unit_l1_norms(store, layer)?;
        let n = norms.len();
        let k = selection_count(spec.rho, n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &format!("key/{:?}/layer{layer}", spec.strategy),
        ));
        let mut picked: Vec<usize> = match spec.strategy {
            Strategy::Top => ranked(&norms, true)[..k].to_vec(),
            Strategy::Bottom => ranked(&norms, false)[..k].to_vec(),
            Strategy::Random => sample(&mut rng, n, k).into_vec(),
            Strategy::PoolSample => {
                let m = selection_count(spec.pool_fraction, n);
                if m < k {
                    return Err(Error::Contract(format!(
                        "pool of {m} units in layer {layer} is smaller than the {k} requested"
                    )));
                }
                let pool = &ranked(&norms, true)[..m];
                if m == k {
                    pool.to_vec()
                } else {
                    sample(&mut rng, m, k)
                        .into_iter()
                        .map(|i| pool[i])
                        .collect()
                }
            }
        };
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|unit| UnitRef { layer, unit }));
    }
    Ok(out)
}

/// Builds the key for `spec` from the current values of `store`.
///
/// Dispatches on `spec.strategy`; `Top` is the localization procedure proper,
/// the others are the pool relaxation and the random/bottom baselines.
pub fn localize_key(store: &ParameterStore, spec: &KeySpec) -> Result<Key> {
    let units = select_units(store, spec)?;
    let set = unit_indices(store.layout(), &units)?;
    build_key(store, set, units, *spec)
}

fn build_key(
    store: &ParameterStore,
    set: BTreeSet<usize>,
    unit_list: Vec<UnitRef>,
    spec: KeySpec,
) -> Result<Key> {
    if set.is_empty() {
        return Err(Error::Validation("key has no entries".into()));
    }
    let d = store.len();
    if let Some(&last) = set.last() {
        if last >= d {
            return Err(Error::Index(format!("key index {last} beyond d = {d}")));
        }
    }
    let values = store.values();
    let entries: Vec<(usize, f64)> = set.iter().map(|&i| (i, values[i])).collect();
    let mut locked = values.to_vec();
    for &i in &set {
        locked[i] = 0.0;
    }
    Ok(Key {
        version: KEY_FORMAT_VERSION,
        base_model_hash: fingerprint_values(store.spec(), &locked),
        spec,
        unit_list,
        entries,
        restores: store.tag(),
    })
}

/// How much of the model a key covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyStats {
    pub selected_per_layer: Vec<usize>,
    pub units_per_layer: Vec<usize>,
    pub unit_fraction_per_layer: Vec<f64>,
    pub entries: usize,
    pub param_count: usize,
    pub param_fraction: f64,
}

pub fn key_stats(store: &ParameterStore, key: &Key) -> KeyStats {
    let hidden = store.layout().len().saturating_sub(1);
    let units_per_layer: Vec<usize> = store.layout()[..hidden].iter().map(|l| l.units).collect();
    let mut selected_per_layer = vec![0; hidden];
    for u in &key.unit_list {
        if u.layer < hidden {
            selected_per_layer[u.layer] += 1;
        }
    }
    KeyStats {
        unit_fraction_per_layer: selected_per_layer
            .iter()
            .zip(&units_per_layer)
            .map(|(&s, &n)| s as f64 / n as f64)
            .collect(),
        selected_per_layer,
        units_per_layer,
        entries: key.len(),
        param_count: store.len(),
        param_fraction: key.len() as f64 / store.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_network, LayerSpec, NetworkSpec};

    fn store_with_first_layer(rows: &[[f64; 2]]) -> ParameterStore {
        let spec = NetworkSpec::mlp(&[2, rows.len(), 2]).unwrap();
        let mut s = init_network(&spec, 1).unwrap();
        let lay = s.layout()[0];
        for (u, r) in rows.iter().enumerate() {
            s.values_mut()[lay.row_range(u)].copy_from_slice(r);
        }
        s
    }

    #[test]
    fn l1_norms_by_hand() {
        let s = store_with_first_layer(&[[1.0, -2.0], [0.5, 0.5], [3.0, 3.0]]);
        assert_eq!(unit_l1_norms(&s, 0).unwrap(), vec![3.0, 1.0, 6.0]);
        let z = store_with_first_layer(&[[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(unit_l1_norms(&z, 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn conv_filter_norm() {
        let spec = NetworkSpec {
            input: crate::network::InputShape::Image {
                channels: 1,
                height: 3,
                width: 3,
            },
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 2,
                },
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 2,
                },
            ],
            class_count: 2,
        };
        let mut s = init_network(&spec, 0).unwrap();
        s.values_mut()[..4].copy_from_slice(&[1.0, -1.0, 2.0, -2.0]);
        assert_eq!(unit_l1_norms(&s, 0).unwrap(), vec![6.0]);
    }

    #[test]
    fn top_picks_largest_row_and_successor_column() {
        // 0.33 · 3 rounds up to one unit
        let s = store_with_first_layer(&[[1.0, -2.0], [0.5, 0.5], [3.0, 3.0]]);
        let key = localize_key(&s, &KeySpec::top(0.33)).unwrap();
        assert_eq!(key.unit_list, vec![UnitRef { layer: 0, unit: 2 }]);
        let lay = s.layout();
        let mut expect: Vec<usize> = lay[0].row_range(2).collect();
        expect.push(lay[0].bias_offset + 2);
        expect.push(lay[1].weight_offset + 2);
        expect.push(lay[1].weight_offset + 3 + 2);
        expect.sort();
        assert_eq!(key.indices().collect::<Vec<_>>(), expect);
        for &(i, v) in &key.entries {
            assert_eq!(v.to_bits(), s.values()[i].to_bits());
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = store_with_first_layer(&[[5.0, 0.0], [0.0, 5.0], [1.0, 0.0]]);
        let key = localize_key(&s, &KeySpec::top(0.33)).unwrap();
        assert_eq!(key.unit_list, vec![UnitRef { layer: 0, unit: 0 }]);
    }

    #[test]
    fn bottom_picks_smallest() {
        let s = store_with_first_layer(&[[1.0, -2.0], [0.5, 0.5], [3.0, 3.0]]);
        let spec = KeySpec {
            strategy: Strategy::Bottom,
            ..KeySpec::top(0.33)
        };
        let key = localize_key(&s, &spec).unwrap();
        assert_eq!(key.unit_list, vec![UnitRef { layer: 0, unit: 1 }]);
    }

    #[test]
    fn mlp_8_8_4_counts() {
        let spec = NetworkSpec::mlp(&[8, 8, 4]).unwrap();
        let s = init_network(&spec, 5).unwrap();
        let key = localize_key(&s, &KeySpec::top(0.05)).unwrap();
        assert_eq!(key.unit_list.len(), 1);
        // incoming row, bias, outgoing column
        assert_eq!(key.len(), 8 + 1 + 4);
    }

    #[test]
    fn pool_membership_and_degenerate_pool() {
        let norms = [9.0, 8.0, 7.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let spec = NetworkSpec::mlp(&[1, 10, 2]).unwrap();
        let mut s = init_network(&spec, 0).unwrap();
        s.values_mut()[..10].copy_from_slice(&norms);
        for seed in 0..20 {
            let ks = KeySpec {
                rho: 0.1,
                pool_fraction: 0.3,
                strategy: Strategy::PoolSample,
                seed,
            };
            let key = localize_key(&s, &ks).unwrap();
            assert_eq!(key.unit_list.len(), 1);
            assert!(key.unit_list[0].unit <= 2);
            assert_eq!(key, localize_key(&s, &ks).unwrap());
        }
        let degenerate = KeySpec {
            rho: 0.2,
            pool_fraction: 0.2,
            strategy: Strategy::PoolSample,
            seed: 4,
        };
        let a = localize_key(&s, &degenerate).unwrap();
        let b = localize_key(&s, &KeySpec::top(0.2)).unwrap();
        assert_eq!(a.entries, b.entries);
        assert_eq!(a.unit_list, b.unit_list);
    }

    #[test]
    fn random_is_reproducible() {
        let s = init_network(&NetworkSpec::mlp(&[6, 20, 20, 3]).unwrap(), 2).unwrap();
        let ks = KeySpec {
            strategy: Strategy::Random,
            seed: 11,
            ..KeySpec::top(0.1)
        };
        assert_eq!(
            localize_key(&s, &ks).unwrap(),
            localize_key(&s, &ks).unwrap()
        );
    }

    #[test]
    fn bottom_and_top_disjoint() {
        let s = init_network(&NetworkSpec::mlp(&[6, 20, 20, 3]).unwrap(), 2).unwrap();
        let top = select_units(&s, &KeySpec::top(0.25)).unwrap();
        let bottom = select_units(
            &s,
            &KeySpec {
                strategy: Strategy::Bottom,
                ..KeySpec::top(0.25)
            },
        )
        .unwrap();
        assert!(top.iter().all(|u| !bottom.contains(u)));
    }

    #[test]
    fn selection_count_rounding() {
        assert_eq!(selection_count(0.3, 10), 3);
        assert_eq!(selection_count(0.05, 128), 7);
        assert_eq!(selection_count(0.05, 8), 1);
        assert_eq!(selection_count(0.01, 1), 1);
        assert_eq!(selection_count(1.0, 4), 4);
    }

    #[test]
    fn codec_roundtrip_and_validation() {
        let s = init_network(&NetworkSpec::mlp(&[5, 7, 3]).unwrap(), 8).unwrap();
        let key = localize_key(&s, &KeySpec::top(0.2)).unwrap();
        let text = key.to_json().unwrap();
        let back = Key::from_json(&text).unwrap();
        assert_eq!(back, key);
        for (a, b) in back.entries.iter().zip(&key.entries) {
            assert_eq!(a.1.to_bits(), b.1.to_bits());
        }

        let mut swapped = key.clone();
        swapped.entries.swap(0, 1);
        assert!(matches!(swapped.validate(), Err(Error::Validation(_))));

        let mut empty = key.clone();
        empty.entries.clear();
        assert!(matches!(empty.validate(), Err(Error::Validation(_))));

        assert!(matches!(
            Key::from_json("{\"version\": 1,"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn partial_key_rejected_against_model() {
        let s = init_network(&NetworkSpec::mlp(&[5, 7, 3]).unwrap(), 8).unwrap();
        let mut key = localize_key(&s, &KeySpec::top(0.2)).unwrap();
        key.validate_for(&s).unwrap();
        key.entries.pop();
        assert!(matches!(key.validate_for(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn single_layer_network_cannot_be_keyed() {
        let s = init_network(&NetworkSpec::mlp(&[4, 3]).unwrap(), 0).unwrap();
        assert!(matches!(
            localize_key(&s, &KeySpec::default()),
            Err(Error::Contract(_))
        ));
    }
}
