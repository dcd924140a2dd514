//! Lock (Φ), unlock (Ψ), the all-zero reference model, and key refresh.

use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::keying::Key;
use crate::network::{ModelTag, ParameterStore};

/// A model with its key coordinates zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct LockedModel {
    params: ParameterStore,
    fingerprint: Fingerprint,
}

impl LockedModel {
    /// Wraps parameters read back from disk. The fingerprint is recomputed.
    pub fn from_params(params: ParameterStore) -> Self {
        let fingerprint = params.fingerprint();
        LockedModel {
            params: params.with_tag(ModelTag::Locked),
            fingerprint,
        }
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }
}

fn zero_key_coords(params: &ParameterStore, key: &Key) -> ParameterStore {
    let mut out = params.clone();
    let values = out.values_mut();
    for i in key.indices() {
        values[i] = 0.0;
    }
    out.with_tag(ModelTag::Locked)
}

pub fn lock(params: &ParameterStore, key: &Key) -> Result<LockedModel> {
    key.validate_for(params)?;
    let locked = zero_key_coords(params, key);
    let fingerprint = locked.fingerprint();
    if fingerprint != key.base_model_hash {
        return Err(Error::StaleKey {
            expected: key.base_model_hash.short(),
            actual: fingerprint.short(),
        });
    }
    Ok(LockedModel {
        params: locked,
        fingerprint,
    })
}

pub fn unlock(locked: &LockedModel, key: &Key) -> Result<ParameterStore> {
    if locked.fingerprint != key.base_model_hash {
        return Err(Error::Fingerprint {
            locked: locked.fingerprint.short(),
            key: key.base_model_hash.short(),
        });
    }
    key.validate_for(&locked.params)?;
    let mut out = locked.params.clone().with_tag(key.restores);
    let values = out.values_mut();
    for &(i, v) in &key.entries {
        values[i] = v;
    }
    Ok(out)
}

/// `f⁰`: every weight and bias zero except the output layer's bias.
pub fn reference_model(params: &ParameterStore) -> ParameterStore {
    let mut out = params.clone().with_tag(ModelTag::Reference);
    let last = *out.layout().last().expect("validated spec has a layer");
    let values = out.values_mut();
    let keep = last.bias_range();
    for (i, v) in values.iter_mut().enumerate() {
        if !keep.contains(&i) {
            *v = 0.0;
        }
    }
    out
}

/// Re-reads key values from a key-only adapted model.
///
/// `adapted` must agree bit-for-bit with `base` outside the key; the new key
/// still unlocks `base`.
pub fn refresh_key(adapted: &ParameterStore, old_key: &Key, base: &LockedModel) -> Result<Key> {
    if base.fingerprint != old_key.base_model_hash {
        return Err(Error::Fingerprint {
            locked: base.fingerprint.short(),
            key: old_key.base_model_hash.short(),
        });
    }
    old_key.validate_for(adapted)?;
    if adapted.spec() != base.params.spec() {
        return Err(Error::Dimension(
            "adapted model has a different architecture".into(),
        ));
    }
    let in_key = old_key.index_set();
    let mut count = 0;
    let mut first = None;
    for (i, (a, b)) in adapted
        .values()
        .iter()
        .zip(base.params.values())
        .enumerate()
    {
        if !in_key.contains(&i) && a.to_bits() != b.to_bits() {
            count += 1;
            first.get_or_insert(i);
        }
    }
    if let Some(first) = first {
        return Err(Error::AdaptabilityViolation { count, first });
    }
    let values = adapted.values();
    Ok(Key {
        entries: old_key.indices().map(|i| (i, values[i])).collect(),
        restores: ModelTag::KeyFinetuned,
        ..old_key.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keying::{localize_key, KeySpec};
    use crate::network::{forward, init_network, NetworkSpec};
    use crate::tensor::Tensor;

    fn tiny() -> ParameterStore {
        // 1→1→1: w0, b0, w1, b1
        let spec = NetworkSpec::mlp(&[1, 1, 1]).unwrap();
        ParameterStore::from_values(spec, vec![1.0, 2.0, 3.0, 4.0], ModelTag::Pretrained).unwrap()
    }

    #[test]
    fn lock_zeroes_only_key_coords() {
        let s = tiny();
        let key = Key::from_indices(&s, [1], KeySpec::default()).unwrap();
        let locked = lock(&s, &key).unwrap();
        assert_eq!(locked.params().values(), &[1.0, 0.0, 3.0, 4.0]);
        assert_eq!(locked.params().tag(), ModelTag::Locked);
        // idempotent
        let again = lock(locked.params(), &key).unwrap();
        assert_eq!(again, locked);
    }

    #[test]
    fn roundtrip_exact() {
        let s = init_network(&NetworkSpec::mlp(&[6, 9, 9, 4]).unwrap(), 3)
            .unwrap()
            .with_tag(ModelTag::Pretrained);
        let key = localize_key(&s, &KeySpec::top(0.2)).unwrap();
        let locked = lock(&s, &key).unwrap();
        assert_eq!(unlock(&locked, &key).unwrap(), s);
    }

    #[test]
    fn stale_and_wrong_keys() {
        let spec = NetworkSpec::mlp(&[6, 9, 4]).unwrap();
        let a = init_network(&spec, 1).unwrap();
        let b = init_network(&spec, 2).unwrap();
        let ka = localize_key(&a, &KeySpec::top(0.2)).unwrap();
        let kb = localize_key(&b, &KeySpec::top(0.2)).unwrap();
        assert!(matches!(lock(&b, &ka), Err(Error::StaleKey { .. })));
        let locked = lock(&a, &ka).unwrap();
        let before = locked.clone();
        assert!(matches!(
            unlock(&locked, &kb),
            Err(Error::Fingerprint { .. })
        ));
        assert_eq!(locked, before);
    }

    #[test]
    fn full_key_gives_bias_output() {
        let spec = NetworkSpec::mlp(&[3, 4, 2]).unwrap();
        let mut s = init_network(&spec, 9).unwrap();
        let last = s.layout()[1];
        s.values_mut()[last.bias_range()].copy_from_slice(&[0.5, -0.25]);
        let weights: Vec<usize> = s
            .layout()
            .iter()
            .flat_map(|l| l.weight_range().chain(l.bias_range()))
            .filter(|i| !last.bias_range().contains(i))
            .collect();
        let key = Key::from_indices(&s, weights, KeySpec::default()).unwrap();
        let locked = lock(&s, &key).unwrap();
        let y = forward(locked.params(), &Tensor::vector(vec![1.0, -3.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.5, -0.25]);
        assert_eq!(locked.params().values(), reference_model(&s).values());
    }

    #[test]
    fn refresh_after_noop_and_after_drift() {
        let s = init_network(&NetworkSpec::mlp(&[4, 10, 3]).unwrap(), 4).unwrap();
        let key = localize_key(&s, &KeySpec::top(0.1)).unwrap();
        let base = lock(&s, &key).unwrap();
        let same = refresh_key(&s, &key, &base).unwrap();
        assert_eq!(same.entries, key.entries);
        assert_eq!(same.base_model_hash, key.base_model_hash);

        let mut tuned = s.clone();
        let (i, _) = key.entries[0];
        tuned.values_mut()[i] += 1.0;
        let fresh = refresh_key(&tuned, &key, &base).unwrap();
        let mut expect = tuned.clone();
        expect.set_tag(ModelTag::KeyFinetuned);
        assert_eq!(unlock(&base, &fresh).unwrap(), expect);

        let outside = (0..s.len()).find(|j| !key.index_set().contains(j)).unwrap();
        tuned.values_mut()[outside] += 1.0;
        assert!(matches!(
            refresh_key(&tuned, &key, &base),
            Err(Error::AdaptabilityViolation { count: 1, first }) if first == outside
        ));
    }
}
