//! Influence tuple sampling under a confound access mask.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AccessMask, Dataset};
use crate::error::{Error, Result};

/// A probe with `k` same-confound (A) and `k` different-confound (B) train
/// examples sharing its label. Members are dataset ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceTuple {
    pub probe: usize,
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
}

impl InfluenceTuple {
    pub fn k(&self) -> usize {
        self.group_a.len()
    }

    /// Checks the tuple invariants against `dataset`.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidExample(msg));
        let ex = |id: usize| {
            dataset
                .examples
                .get(id)
                .ok_or_else(|| Error::InvalidExample(format!("tuple id {id} outside dataset")))
        };
        let probe = ex(self.probe)?;
        if self.group_a.is_empty() || self.group_a.len() != self.group_b.len() {
            return bad(format!("group sizes {} and {}", self.group_a.len(), self.group_b.len()));
        }
        for &id in &self.group_a {
            let e = ex(id)?;
            if e.label != probe.label || e.confound != probe.confound || id == self.probe {
                return bad(format!("group A member {id} does not match probe {}", self.probe));
            }
        }
        for &id in &self.group_b {
            let e = ex(id)?;
            if e.label != probe.label || e.confound == probe.confound {
                return bad(format!("group B member {id} does not match probe {}", self.probe));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct PoolKey {
    label: usize,
    confound: usize,
    other: bool,
}

/// Draws tuples from the mask-admitted train examples.
///
/// Group members are drawn without replacement within an epoch: each pool is
/// consumed in a shuffled order and refilled once exhausted. Call
/// [`TupleSampler::start_epoch`] to refill all pools.
#[derive(Clone, Debug)]
pub struct TupleSampler {
    k: usize,
    pools: BTreeMap<PoolKey, Vec<usize>>,
    remaining: BTreeMap<PoolKey, Vec<usize>>,
    probes: Vec<usize>,
    admitted: usize,
}

impl TupleSampler {
    pub fn new(dataset: &Dataset, mask: &AccessMask, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidSpec("k must be at least 1".into()));
        }
        let mut pools: BTreeMap<PoolKey, Vec<usize>> = BTreeMap::new();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for id in mask.ids() {
            let e = &dataset.examples[id];
            pairs.push((e.label, e.confound));
        }
        pairs.sort_unstable();
        pairs.dedup();
        for id in mask.ids() {
            let e = &dataset.examples[id];
            for &(label, confound) in pairs.iter().filter(|p| p.0 == e.label) {
                let other = e.confound != confound;
                pools.entry(PoolKey { label, confound, other }).or_default().push(id);
            }
        }
        let size = |key: PoolKey| pools.get(&key).map_or(0, Vec::len);
        let probes: Vec<usize> = mask
            .ids()
            .filter(|&id| {
                let e = &dataset.examples[id];
                let key = |other| PoolKey {
                    label: e.label,
                    confound: e.confound,
                    other,
                };
                size(key(false)) > k && size(key(true)) >= k
            })
            .collect();
        if probes.is_empty() {
            return Err(Error::EmptyGroup(format!(
                "no admitted probe has {k} same-confound and {k} different-confound examples among {} admitted",
                mask.len()
            )));
        }
        Ok(Self {
            k,
            remaining: BTreeMap::new(),
            pools,
            probes,
            admitted: mask.len(),
        })
    }

    /// The largest `k` for which some admitted probe has full groups.
    pub fn max_k(dataset: &Dataset, mask: &AccessMask) -> usize {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for id in mask.ids() {
            let e = &dataset.examples[id];
            *counts.entry((e.label, e.confound)).or_default() += 1;
        }
        counts
            .iter()
            .map(|(&(label, confound), &same)| {
                let other: usize = counts
                    .iter()
                    .filter(|(&(l, c), _)| l == label && c != confound)
                    .map(|(_, n)| n)
                    .sum();
                (same - 1).min(other)
            })
            .max()
            .unwrap_or(0)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn admitted(&self) -> usize {
        self.admitted
    }

    /// Admitted examples that can serve as probes.
    pub fn probe_candidates(&self) -> &[usize] {
        &self.probes
    }

    pub fn start_epoch(&mut self) {
        self.remaining.clear();
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, dataset: &Dataset, rng: &mut R) -> InfluenceTuple {
        let probe = *self.probes.choose(rng).expect("probe candidates are non-empty");
        let e = &dataset.examples[probe];
        let key = |other| PoolKey {
            label: e.label,
            confound: e.confound,
            other,
        };
        let group_a = self.draw(key(false), probe, rng);
        let group_b = self.draw(key(true), probe, rng);
        InfluenceTuple {
            probe,
            group_a,
            group_b,
        }
    }

    fn draw<R: Rng + ?Sized>(&mut self, key: PoolKey, exclude: usize, rng: &mut R) -> Vec<usize> {
        let pool = &self.pools[&key];
        let remaining = self.remaining.entry(key).or_default();
        let mut out = Vec::with_capacity(self.k);
        let mut skipped = None;
        while out.len() < self.k {
            let Some(id) = remaining.pop() else {
                // Refill with everything not already in this group.
                remaining.extend(pool.iter().copied().filter(|id| !out.contains(id)));
                remaining.shuffle(rng);
                if let Some(s) = skipped.take() {
                    remaining.retain(|&id| id != s);
                    skipped = Some(s);
                }
                continue;
            };
            if id == exclude {
                skipped = Some(id);
            } else {
                out.push(id);
            }
        }
        if let Some(s) = skipped {
            remaining.push(s);
        }
        out
    }
}

/// One tuple drawn from a fresh sampler.
pub fn sample_influence_tuple<R: Rng + ?Sized>(
    dataset: &Dataset,
    rng: &mut R,
    k: usize,
    mask: &AccessMask,
) -> Result<InfluenceTuple> {
    let mut sampler = TupleSampler::new(dataset, mask, k)?;
    Ok(sampler.sample(dataset, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_lenconf, make_access_mask, Example, LenConfSpec, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Dataset {
        let mk = |label, confound| Example {
            tokens: vec![4],
            label,
            confound,
            split: Split::Train,
        };
        Dataset::new(vec![mk(0, 0), mk(0, 0), mk(0, 1), mk(1, 1), mk(1, 0), mk(1, 0)])
    }

    #[test]
    fn full_mask_tuples_are_valid() {
        let ds = generate_lenconf(&LenConfSpec::default()).unwrap();
        let mask = AccessMask::all(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sampler = TupleSampler::new(&ds, &mask, 3).unwrap();
        for _ in 0..200 {
            let t = sampler.sample(&ds, &mut rng);
            assert_eq!(t.k(), 3);
            t.validate(&ds).unwrap();
        }
    }

    #[test]
    fn forced_tuple() {
        let ds = tiny();
        let mask = AccessMask::all(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let t = sample_influence_tuple(&ds, &mut rng, 1, &mask).unwrap();
            t.validate(&ds).unwrap();
            let expected = match t.probe {
                0 => (vec![1], vec![2]),
                1 => (vec![0], vec![2]),
                4 => (vec![5], vec![3]),
                5 => (vec![4], vec![3]),
                p => panic!("probe {p} cannot have a full group A"),
            };
            assert_eq!((t.group_a, t.group_b), expected);
        }
    }

    #[test]
    fn too_restrictive_mask() {
        let ds = tiny();
        let mask = AccessMask::all(&ds);
        assert!(matches!(
            sample_influence_tuple(&ds, &mut ChaCha8Rng::seed_from_u64(0), 2, &mask),
            Err(Error::EmptyGroup(_))
        ));
        assert_eq!(TupleSampler::max_k(&ds, &mask), 1);
    }

    #[test]
    fn groups_cycle_without_replacement() {
        let ds = generate_lenconf(&LenConfSpec::default()).unwrap();
        let mask = make_access_mask(&ds, 0.2, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut sampler = TupleSampler::new(&ds, &mask, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Within one pass over a pool, members are not repeated.
        let mut seen: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for _ in 0..5 {
            let t = sampler.sample(&ds, &mut rng);
            let e = &ds.examples[t.probe];
            seen.entry((e.label, e.confound)).or_default().extend(&t.group_a);
        }
        for (key, ids) in seen {
            let pool_len = mask
                .ids()
                .filter(|&i| (ds.examples[i].label, ds.examples[i].confound) == key)
                .count();
            if ids.len() < pool_len {
                let mut d = ids.clone();
                d.sort_unstable();
                d.dedup();
                assert_eq!(d.len(), ids.len());
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn draws_stay_inside_mask(seed in 0u64..1000) {
            let ds = generate_lenconf(&LenConfSpec::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = make_access_mask(&ds, 0.05, 1, &mut rng).unwrap();
            proptest::prop_assert_eq!(mask.len(), 75);
            let k = TupleSampler::max_k(&ds, &mask).min(2);
            let mut sampler = TupleSampler::new(&ds, &mask, k).unwrap();
            for i in 0..1000 {
                if i % 25 == 0 {
                    sampler.start_epoch();
                }
                let t = sampler.sample(&ds, &mut rng);
                t.validate(&ds).unwrap();
                for id in std::iter::once(t.probe).chain(t.group_a).chain(t.group_b) {
                    proptest::prop_assert!(mask.contains(id));
                }
            }
        }
    }
}
