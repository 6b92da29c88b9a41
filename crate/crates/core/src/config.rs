//! Flat `key = value` configuration with layered overrides.
//!
//! Values resolve as command-line flag, then config file, then default.
//! Keys accept `-` or `_` interchangeably and are stored with `_`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{FeatConfSpec, LenConfSpec};
use crate::error::{Error, Result};
use crate::tuning::RunConfig;

pub type Pairs = BTreeMap<String, String>;

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Pairs> {
    let mut pairs = Pairs::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        let key = normalize_key(key);
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Pairs> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

pub fn render_pairs(pairs: &Pairs) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn write_pairs(pairs: &Pairs, path: &Path) -> Result<()> {
    std::fs::write(path, render_pairs(pairs)).map_err(|e| Error::io(path, e))
}

/// A config struct addressable by flat keys.
pub trait Configurable: Default {
    fn keys() -> &'static [&'static str];
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    /// Every key with its current value.
    fn pairs(&self) -> Pairs;

    fn apply(&mut self, pairs: &Pairs) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(&normalize_key(k), v))
    }

    /// Default, then `file`, then `flags`.
    fn resolve(file: Option<&Pairs>, flags: &Pairs) -> Result<Self> {
        let mut out = Self::default();
        if let Some(file) = file {
            out.apply(file)?;
        }
        out.apply(flags)?;
        Ok(out)
    }
}

fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::Config {
        key: key.into(),
        reason: format!("{value:?}: {e}"),
    })
}

macro_rules! configurable {
    ($ty:ty { $($key:literal => $($field:ident).+),* $(,)? }) => {
        impl Configurable for $ty {
            fn keys() -> &'static [&'static str] {
                &[$($key),*]
            }

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value(key, value)?,)*
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            reason: "unknown key".into(),
                        })
                    }
                }
                Ok(())
            }

            fn pairs(&self) -> Pairs {
                let mut out = Pairs::new();
                $(out.insert($key.to_string(), self.$($field).+.to_string());)*
                out
            }
        }
    };
}

configurable!(RunConfig {
    "method" => method,
    "seed" => seed,
    "vocab" => dims.vocab,
    "hidden" => dims.hidden,
    "labels" => dims.labels,
    "confounds" => dims.confounds,
    "max_len" => dims.max_len,
    "lr" => label_optimizer.lr,
    "beta1" => label_optimizer.beta1,
    "beta2" => label_optimizer.beta2,
    "eps" => label_optimizer.eps,
    "influence_lr" => influence_optimizer.lr,
    "influence_beta1" => influence_optimizer.beta1,
    "influence_beta2" => influence_optimizer.beta2,
    "influence_eps" => influence_optimizer.eps,
    "batch_size" => batch_size,
    "finetune_steps" => schedule.finetune_steps,
    "influence_epochs" => schedule.influence_epochs,
    "probes_per_epoch" => schedule.probes_per_epoch,
    "k" => schedule.k,
    "influence_batch_size" => schedule.influence_batch_size,
    "rounds" => schedule.rounds,
    "lambda" => lambda,
    "access_rate" => access_rate,
    "probe_count" => probe_count,
    "cid_every_round" => cid_every_round,
});

configurable!(LenConfSpec {
    "n_train" => n_train,
    "n_dev" => n_dev,
    "n_test" => n_test,
    "mu_short" => mu_short,
    "mu_long" => mu_long,
    "sigma" => sigma,
    "train_confound_rate" => train_confound_rate,
    "eval_confound_rate" => eval_confound_rate,
    "vocab" => vocab,
    "max_len" => max_len,
    "bos" => bos,
    "seed" => seed,
});

configurable!(FeatConfSpec {
    "n_train" => n_train,
    "n_dev" => n_dev,
    "n_test" => n_test,
    "ing" => ing,
    "plain" => plain,
    "the" => the,
    "a" => a,
    "train_confound_rate" => train_confound_rate,
    "eval_confound_rate" => eval_confound_rate,
    "min_len" => min_len,
    "max_len" => max_len,
    "vocab" => vocab,
    "seed" => seed,
});
