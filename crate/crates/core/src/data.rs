//! Synthetic confounded datasets, access masks and line-delimited JSON I/O.
//!
//! Two generators produce a core attribute that determines the label and a
//! prefix token that only correlates with it:
//!
//! - **LenConf**: label is sequence length (short vs long), prefix is
//!   `CONF_A`/`CONF_B`, agreeing with the label at a configurable rate.
//! - **FeatConf**: label is which marker token (ING vs PLAIN) appears once
//!   inside the sequence, prefix is THE/A.
//!
//! Each split draws from its own ChaCha stream derived from the generator seed,
//! so generation is a pure function of the generator settings.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, CONF_A, CONF_B, FIRST_CONTENT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub confound: usize,
    pub split: Split,
}

/// Examples of all splits; an example's id is its index here.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].split == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.examples.iter().filter(|e| e.split == split).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LenConfSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub mu_short: f64,
    pub mu_long: f64,
    pub sigma: f64,
    pub train_confound_rate: f64,
    pub eval_confound_rate: f64,
    pub vocab: usize,
    pub max_len: usize,
    /// Prepend BOS before the prefix token.
    pub bos: bool,
    pub seed: u64,
}

impl Default for LenConfSpec {
    fn default() -> Self {
        Self {
            n_train: 1500,
            n_dev: 480,
            n_test: 500,
            mu_short: 15.0,
            mu_long: 25.0,
            sigma: 4.0,
            train_confound_rate: 0.9,
            eval_confound_rate: 0.5,
            vocab: 64,
            max_len: 48,
            bos: false,
            seed: 0,
        }
    }
}

impl LenConfSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.mu_short >= self.mu_long {
            return bad(format!("mu_short {} must be < mu_long {}", self.mu_short, self.mu_long));
        }
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        check_rate("train_confound_rate", self.train_confound_rate)?;
        check_rate("eval_confound_rate", self.eval_confound_rate)?;
        if self.vocab <= FIRST_CONTENT as usize {
            return bad(format!("vocab {} leaves no content tokens", self.vocab));
        }
        if self.max_len < 3 + self.overhead() + 1 {
            return bad(format!("max_len {} too small", self.max_len));
        }
        Ok(())
    }

    fn overhead(&self) -> usize {
        1 + usize::from(self.bos)
    }

    /// Content lengths are clipped to this range.
    pub fn length_bounds(&self) -> (usize, usize) {
        (3, self.max_len - self.overhead())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatConfSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Marker for label 1.
    pub ing: u32,
    /// Marker for label 0.
    pub plain: u32,
    /// Prefix agreeing with label 1 (confound 0).
    pub the: u32,
    /// Prefix agreeing with label 0 (confound 1).
    pub a: u32,
    pub train_confound_rate: f64,
    pub eval_confound_rate: f64,
    /// Inclusive range of content length, marker included.
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for FeatConfSpec {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_dev: 15000,
            n_test: 15000,
            ing: FIRST_CONTENT,
            plain: FIRST_CONTENT + 1,
            the: CONF_A,
            a: CONF_B,
            train_confound_rate: 0.997,
            eval_confound_rate: 0.667,
            min_len: 8,
            max_len: 20,
            vocab: 64,
            seed: 0,
        }
    }
}

impl FeatConfSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        check_rate("train_confound_rate", self.train_confound_rate)?;
        check_rate("eval_confound_rate", self.eval_confound_rate)?;
        let special = [self.ing, self.plain, self.the, self.a];
        let distinct: BTreeSet<u32> = special.iter().copied().collect();
        if distinct.len() != 4 {
            return bad("marker and prefix tokens must be distinct".into());
        }
        if [self.ing, self.plain].iter().any(|&t| t < FIRST_CONTENT) {
            return bad("marker tokens must not use reserved ids".into());
        }
        if [self.the, self.a].iter().any(|&t| t == 0 || t == BOS) {
            return bad("prefix tokens must not be PAD or BOS".into());
        }
        if special.iter().any(|&t| t as usize >= self.vocab) {
            return bad("special tokens must be < vocab".into());
        }
        if self.content_tokens().is_empty() {
            return bad(format!("vocab {} leaves no content tokens", self.vocab));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad(format!("length range [{}, {}] invalid", self.min_len, self.max_len));
        }
        Ok(())
    }

    fn content_tokens(&self) -> Vec<u32> {
        (FIRST_CONTENT..self.vocab as u32)
            .filter(|t| ![self.ing, self.plain, self.the, self.a].contains(t))
            .collect()
    }
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{name} {r} outside [0, 1]")))
    }
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    rng
}

/// Class sizes for a split of `n`: class 0 receives the odd example.
pub fn class_sizes(n: usize) -> [usize; 2] {
    [n.div_ceil(2), n / 2]
}

fn split_sizes(n_train: usize, n_dev: usize, n_test: usize) -> [(Split, usize); 3] {
    [(Split::Train, n_train), (Split::Dev, n_dev), (Split::Test, n_test)]
}

pub fn generate_lenconf(spec: &LenConfSpec) -> Result<Dataset> {
    spec.validate()?;
    let (lo, hi) = spec.length_bounds();
    let mut examples = Vec::with_capacity(spec.n_train + spec.n_dev + spec.n_test);
    for (split, n) in split_sizes(spec.n_train, spec.n_dev, spec.n_test) {
        let mut rng = split_rng(spec.seed, split);
        let rate = if split == Split::Train {
            spec.train_confound_rate
        } else {
            spec.eval_confound_rate
        };
        let mut labels: Vec<usize> = class_sizes(n)
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        labels.shuffle(&mut rng);
        for label in labels {
            let mu = if label == 0 { spec.mu_short } else { spec.mu_long };
            let normal = Normal::new(mu, spec.sigma).expect("sigma validated");
            let len = (normal.sample(&mut rng).round().max(0.0) as usize).clamp(lo, hi);
            let agree = rng.random_bool(rate);
            let confound = if agree { label } else { 1 - label };
            let mut tokens = Vec::with_capacity(len + 2);
            if spec.bos {
                tokens.push(BOS);
            }
            tokens.push(if confound == 0 { CONF_A } else { CONF_B });
            tokens.extend((0..len).map(|_| rng.random_range(FIRST_CONTENT..spec.vocab as u32)));
            examples.push(Example {
                tokens,
                label,
                confound,
                split,
            });
        }
    }
    Ok(Dataset::new(examples))
}

pub fn generate_featconf(spec: &FeatConfSpec) -> Result<Dataset> {
    spec.validate()?;
    let content = spec.content_tokens();
    let mut examples = Vec::with_capacity(spec.n_train + spec.n_dev + spec.n_test);
    for (split, n) in split_sizes(spec.n_train, spec.n_dev, spec.n_test) {
        let mut rng = split_rng(spec.seed, split);
        let rate = if split == Split::Train {
            spec.train_confound_rate
        } else {
            spec.eval_confound_rate
        };
        let mut labels: Vec<usize> = class_sizes(n)
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        labels.shuffle(&mut rng);
        for label in labels {
            // label 1 <-> ING and (when agreeing) THE, confound 0 <-> THE
            let agree = rng.random_bool(rate);
            let confound = if agree { 1 - label } else { label };
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let marker_at = rng.random_range(1..len - 1);
            let mut tokens = Vec::with_capacity(len + 1);
            tokens.push(if confound == 0 { spec.the } else { spec.a });
            for i in 0..len {
                if i == marker_at {
                    tokens.push(if label == 1 { spec.ing } else { spec.plain });
                } else {
                    tokens.push(*content.choose(&mut rng).expect("non-empty content"));
                }
            }
            examples.push(Example {
                tokens,
                label,
                confound,
                split,
            });
        }
    }
    Ok(Dataset::new(examples))
}

/// Fraction of `examples` whose prefix agrees with the label under the given
/// pairing (`label == confound` for LenConf, `label != confound` for FeatConf).
pub fn agreement_rate(examples: &[&Example], same_index: bool) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let agree = examples
        .iter()
        .filter(|e| (e.label == e.confound) == same_index)
        .count();
    agree as f64 / examples.len() as f64
}

/// Removes the prefix token (the first token after an optional BOS).
pub fn strip_confound(dataset: &Dataset) -> Dataset {
    Dataset::new(
        dataset
            .examples
            .iter()
            .map(|e| {
                let mut tokens = e.tokens.clone();
                let at = usize::from(tokens.first() == Some(&BOS));
                if at < tokens.len() {
                    tokens.remove(at);
                }
                Example { tokens, ..e.clone() }
            })
            .collect(),
    )
}

/// Train example ids whose confound attribute may be queried.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessMask {
    pub rate: f64,
    ids: BTreeSet<usize>,
}

impl AccessMask {
    pub fn all(dataset: &Dataset) -> Self {
        Self {
            rate: 1.0,
            ids: dataset.ids(Split::Train).into_iter().collect(),
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }
}

/// Uniform sample without replacement of `round(rate · n_train)` train ids.
///
/// Logs a warning when fewer than `2k + 1` ids are admitted, since tuple
/// sampling will then fail.
pub fn make_access_mask<R: Rng + ?Sized>(dataset: &Dataset, rate: f64, k: usize, rng: &mut R) -> Result<AccessMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidSpec(format!("access rate {rate} outside (0, 1]")));
    }
    let train = dataset.ids(Split::Train);
    let n = (rate * train.len() as f64).round() as usize;
    let ids: BTreeSet<usize> = if n >= train.len() {
        train.into_iter().collect()
    } else {
        train.choose_multiple(rng, n).copied().collect()
    };
    if ids.len() < 2 * k + 1 {
        log::warn!(
            "access rate {rate} admits {} examples, fewer than 2k+1 = {}",
            ids.len(),
            2 * k + 1
        );
    }
    Ok(AccessMask { rate, ids })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in &dataset.examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        examples.push(ex);
    }
    Ok(Dataset::new(examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_lenconf() -> LenConfSpec {
        LenConfSpec {
            n_train: 101,
            n_dev: 20,
            n_test: 20,
            ..LenConfSpec::default()
        }
    }

    #[test]
    fn lenconf_structure() {
        let spec = small_lenconf();
        let ds = generate_lenconf(&spec).unwrap();
        assert_eq!(ds.count(Split::Train), 101);
        let train = ds.split(Split::Train);
        assert_eq!(train.iter().filter(|e| e.label == 0).count(), 51);
        for e in &ds.examples {
            let prefix = e.tokens[0];
            assert_eq!(prefix, if e.confound == 0 { CONF_A } else { CONF_B });
            assert!(e.tokens[1..].iter().all(|&t| (FIRST_CONTENT..64).contains(&t)));
            assert!(e.tokens.len() >= 4 && e.tokens.len() <= spec.max_len);
        }
        assert_eq!(generate_lenconf(&spec).unwrap(), ds);
    }

    #[test]
    fn lenconf_bos_variant() {
        let spec = LenConfSpec {
            bos: true,
            ..small_lenconf()
        };
        let ds = generate_lenconf(&spec).unwrap();
        assert!(ds
            .examples
            .iter()
            .all(|e| e.tokens[0] == BOS && e.tokens.len() <= spec.max_len));
        let stripped = strip_confound(&ds);
        assert!(stripped
            .examples
            .iter()
            .all(|e| e.tokens[0] == BOS && e.tokens[1] >= FIRST_CONTENT));
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = LenConfSpec {
            mu_short: 30.0,
            ..LenConfSpec::default()
        };
        assert!(generate_lenconf(&s).is_err());
        let s = LenConfSpec {
            train_confound_rate: 1.5,
            ..LenConfSpec::default()
        };
        assert!(generate_lenconf(&s).is_err());
        let f = FeatConfSpec {
            ing: CONF_A,
            ..FeatConfSpec::default()
        };
        assert!(generate_featconf(&f).is_err());
        let f = FeatConfSpec {
            ing: 7,
            plain: 7,
            ..FeatConfSpec::default()
        };
        assert!(generate_featconf(&f).is_err());
    }

    #[test]
    fn featconf_has_exactly_one_marker() {
        let spec = FeatConfSpec {
            n_train: 200,
            n_dev: 50,
            n_test: 50,
            ..FeatConfSpec::default()
        };
        let ds = generate_featconf(&spec).unwrap();
        for e in &ds.examples {
            let markers: Vec<u32> = e
                .tokens
                .iter()
                .copied()
                .filter(|&t| t == spec.ing || t == spec.plain)
                .collect();
            assert_eq!(markers.len(), 1);
            assert_eq!(markers[0] == spec.ing, e.label == 1);
            assert_eq!(e.tokens[0] == spec.the, e.confound == 0);
            // marker is interior to the content
            let pos = e.tokens.iter().position(|&t| t == markers[0]).unwrap();
            assert!(pos >= 2 && pos < e.tokens.len() - 1);
        }
    }

    #[test]
    fn strip_removes_only_the_prefix() {
        let ds = generate_lenconf(&small_lenconf()).unwrap();
        let stripped = strip_confound(&ds);
        for (a, b) in ds.examples.iter().zip(&stripped.examples) {
            assert_eq!(b.tokens.len() + 1, a.tokens.len());
            assert_eq!(&a.tokens[1..], b.tokens.as_slice());
            assert_eq!((a.label, a.confound, a.split), (b.label, b.confound, b.split));
        }
    }

    #[test]
    fn access_masks() {
        let ds = generate_lenconf(&LenConfSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = make_access_mask(&ds, 1.0, 5, &mut rng).unwrap();
        assert_eq!(all, AccessMask::all(&ds));
        let m = make_access_mask(&ds, 0.05, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.len(), 75);
        assert!(m.ids().all(|i| ds.examples[i].split == Split::Train));
        let again = make_access_mask(&ds, 0.05, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let other = make_access_mask(&ds, 0.05, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m, again);
        assert_ne!(m, other);
        assert!(make_access_mask(&ds, 0.0, 5, &mut rng).is_err());
    }

    #[test]
    fn dataset_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate_lenconf(&small_lenconf()).unwrap();
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);

        write_dataset(&Dataset::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(read_dataset(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            "{\"tokens\":[2,5],\"label\":0,\"confound\":0,\"split\":\"train\"}\n{\"tokens\":[2],\"confound\":0,\"split\":\"dev\"}\n",
        )
        .unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("label"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
