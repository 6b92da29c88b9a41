//! Training loops for all methods and the metrics trace they produce.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{choose_probes, cid_for_probes, Method as ScoreMethod, SubsetKind};
use crate::autodiff::{self, ParamVars};
use crate::data::{make_access_mask, strip_confound, AccessMask, Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::par::*;

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::influence::{embedding_loss_gradient, influence_loss_gradient};
use super::sample::TupleSampler;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMethod {
    Finetune,
    Adversarial,
    Influence,
    Embedding,
    /// Finetuning on the dataset with the confound prefix removed.
    NoSpurious,
}

impl TrainingMethod {
    pub const ALL: [TrainingMethod; 5] = [
        TrainingMethod::Finetune,
        TrainingMethod::Adversarial,
        TrainingMethod::Influence,
        TrainingMethod::Embedding,
        TrainingMethod::NoSpurious,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMethod::Finetune => "finetune",
            TrainingMethod::Adversarial => "adversarial",
            TrainingMethod::Influence => "influence",
            TrainingMethod::Embedding => "embedding",
            TrainingMethod::NoSpurious => "no-spurious",
        }
    }

    /// Whether the method alternates label steps with influence epochs.
    pub fn alternates(self) -> bool {
        matches!(self, TrainingMethod::Influence | TrainingMethod::Embedding)
    }
}

impl fmt::Display for TrainingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config {
                key: "method".into(),
                reason: format!("unknown method {s:?}"),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternationSchedule {
    /// Label-loss steps per round (m).
    pub finetune_steps: usize,
    /// Influence epochs per round (n).
    pub influence_epochs: usize,
    pub probes_per_epoch: usize,
    /// Group size per tuple.
    pub k: usize,
    /// Tuples whose gradients are averaged into one influence update.
    pub influence_batch_size: usize,
    pub rounds: usize,
}

impl Default for AlternationSchedule {
    fn default() -> Self {
        Self {
            finetune_steps: 50,
            influence_epochs: 5,
            probes_per_epoch: 25,
            k: 5,
            influence_batch_size: 5,
            rounds: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: TrainingMethod,
    pub dims: ModelDims,
    pub label_optimizer: AdamConfig,
    pub influence_optimizer: AdamConfig,
    pub batch_size: usize,
    pub schedule: AlternationSchedule,
    /// Weight of the reversed confound loss in adversarial training.
    pub lambda: f64,
    /// Fraction of train examples whose confound may be queried by tuning.
    pub access_rate: f64,
    /// Fixed CID probes per run; 0 skips CID.
    pub probe_count: usize,
    /// Measure CID after every round rather than only at the end.
    pub cid_every_round: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: TrainingMethod::Finetune,
            dims: ModelDims::default(),
            label_optimizer: AdamConfig::with_lr(3e-3),
            influence_optimizer: AdamConfig::with_lr(3e-4),
            batch_size: 64,
            schedule: AlternationSchedule::default(),
            lambda: 0.3,
            access_rate: 1.0,
            probe_count: 40,
            cid_every_round: true,
            seed: 2021,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        self.dims.validate()?;
        let s = &self.schedule;
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("finetune_steps", s.finetune_steps),
            ("probes_per_epoch", s.probes_per_epoch),
            ("k", s.k),
            ("influence_batch_size", s.influence_batch_size),
            ("rounds", s.rounds),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        for (key, lr) in [
            ("lr", self.label_optimizer.lr),
            ("influence_lr", self.influence_optimizer.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, "must be a positive number");
            }
        }
        if !(self.access_rate > 0.0 && self.access_rate <= 1.0) {
            return bad("access_rate", "must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Finetune,
    Influence,
    Eval,
}

/// One trace line. `step` counts parameter updates of either kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub round: usize,
    pub epoch: Option<usize>,
    pub phase: Phase,
    pub loss: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    pub cid: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    /// Mean J over each influence epoch of the round.
    pub epoch_j: Vec<f64>,
    pub cid: Option<f64>,
    pub train_accuracy: f64,
}

impl RoundSummary {
    /// Mean J over the last epoch is below that of the first.
    pub fn j_decreased(&self) -> Option<bool> {
        match (self.epoch_j.first(), self.epoch_j.last()) {
            (Some(a), Some(b)) if self.epoch_j.len() > 1 => Some(b < a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<TraceRow>,
    pub rounds: Vec<RoundSummary>,
    pub finetune_steps: usize,
    pub influence_epochs: usize,
    pub influence_updates: usize,
    /// Tuples dropped because a member's gradient was degenerate (fully fit).
    pub skipped_tuples: usize,
    /// Group size actually used, after shrinking to what the mask allows.
    pub effective_k: usize,
    pub admitted: usize,
    /// Every dataset id drawn into an influence tuple.
    pub sampled_ids: Vec<usize>,
    pub cid_probes: Vec<usize>,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub final_cid: Option<f64>,
    pub converged: bool,
}

/// Train accuracy above which a run counts as converged.
pub const CONVERGENCE_ACCURACY: f64 = 0.9;

pub struct TrainOutput {
    pub model: Model,
    pub trace: MetricsTrace,
    pub label_state: OptimizerState,
    pub influence_state: OptimizerState,
}

// RNG streams, so changing one consumer leaves the others untouched.
const BATCH_STREAM: u64 = 1;
const TUPLE_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;
const MASK_STREAM: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The fixed CID probes a run with `seed` measures.
pub fn cid_probes(dataset: &Dataset, count: usize, seed: u64) -> Vec<usize> {
    choose_probes(dataset, count, &mut stream(seed, PROBE_STREAM))
}

/// Shuffled passes over the train split, `batch_size` at a time.
struct Batches {
    ids: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn next(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size.min(self.ids.len()) {
            if self.pos == 0 {
                self.ids.shuffle(&mut self.rng);
            }
            out.push(self.ids[self.pos]);
            self.pos = (self.pos + 1) % self.ids.len();
        }
        out
    }
}

fn mean_gradients(grads: Vec<Vec<f64>>) -> Vec<f64> {
    let n = grads.len() as f64;
    let mut out = vec![0.0; grads[0].len()];
    for g in &grads {
        for (o, x) in out.iter_mut().zip(g) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn apply(model: &mut Model, state: &mut OptimizerState, grads: &[f64]) -> Result<()> {
    let mut flat = model.params().flatten();
    adam_step(state, &mut flat, grads)?;
    model.params_mut().unflatten(&flat)
}

fn refs<'d>(dataset: &'d Dataset, ids: &[usize]) -> Vec<&'d Example> {
    ids.iter().map(|&i| &dataset.examples[i]).collect()
}

/// Trains according to `config.method`.
///
/// Every method runs `rounds · m` label steps from the same initialization
/// and batch order. Influence and embedding tuning follow each block of `m`
/// label steps with `n` influence epochs using a separate Adam instance.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    let stripped;
    let data = if config.method == TrainingMethod::NoSpurious {
        stripped = strip_confound(dataset);
        &stripped
    } else {
        dataset
    };
    for e in &data.examples {
        config.dims.check_example(e)?;
    }
    let train_ids = data.ids(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::InvalidSpec("dataset has no train examples".into()));
    }

    let mut model = Model::init(config.seed, config.dims)?;
    let n_params = model.num_params();
    let mut label_state = OptimizerState::new(config.label_optimizer, n_params);
    let mut influence_state = OptimizerState::new(config.influence_optimizer, n_params);
    let mut batches = Batches {
        ids: train_ids.clone(),
        pos: 0,
        rng: stream(config.seed, BATCH_STREAM),
    };
    let mut tuple_rng = stream(config.seed, TUPLE_STREAM);
    let probes = if config.probe_count > 0 {
        cid_probes(data, config.probe_count, config.seed)
    } else {
        Vec::new()
    };

    let s = config.schedule;
    let mut sampler = None;
    let mut admitted = 0;
    if config.method.alternates() && s.influence_epochs > 0 {
        let mask = if config.access_rate < 1.0 {
            make_access_mask(data, config.access_rate, s.k, &mut stream(config.seed, MASK_STREAM))?
        } else {
            AccessMask::all(data)
        };
        admitted = mask.len();
        let max_k = TupleSampler::max_k(data, &mask);
        let k = s.k.min(max_k);
        if k < s.k {
            log::warn!(
                "access rate {} admits {} examples; group size reduced from {} to {k}",
                config.access_rate,
                mask.len(),
                s.k
            );
        }
        if k == 0 {
            return Err(Error::EmptyGroup(format!(
                "access rate {} admits no probe with both confound groups",
                config.access_rate
            )));
        }
        sampler = Some(TupleSampler::new(data, &mask, k)?);
    }

    let mut trace = MetricsTrace {
        rows: Vec::new(),
        rounds: Vec::new(),
        finetune_steps: 0,
        influence_epochs: 0,
        influence_updates: 0,
        skipped_tuples: 0,
        effective_k: sampler.as_ref().map_or(0, TupleSampler::k),
        admitted,
        sampled_ids: Vec::new(),
        cid_probes: probes.clone(),
        train_accuracy: 0.0,
        dev_accuracy: 0.0,
        test_accuracy: 0.0,
        final_cid: None,
        converged: false,
    };
    let train_refs = refs(data, &train_ids);
    let full = model.full_subset();
    let mut step = 0;

    for round in 0..s.rounds {
        for _ in 0..s.finetune_steps {
            let batch = refs(data, &batches.next(config.batch_size));
            let tape = match config.method {
                TrainingMethod::Adversarial => {
                    autodiff::GradientTape::record(model.params(), &full, |v: &ParamVars<'_>| {
                        model.adversarial_loss(v, &batch, config.lambda)
                    })?
                }
                _ => autodiff::GradientTape::record(model.params(), &full, |v: &ParamVars<'_>| {
                    model.label_loss(v, &batch)
                })?,
            };
            let loss = tape.loss();
            let grads = tape.gradient().to_vec();
            drop(tape);
            apply(&mut model, &mut label_state, &grads)?;
            step += 1;
            trace.finetune_steps += 1;
            trace.rows.push(TraceRow {
                step,
                round,
                epoch: None,
                phase: Phase::Finetune,
                loss: Some(loss),
                j: None,
                cid: None,
                accuracy: None,
            });
        }

        let mut epoch_j = Vec::new();
        if let Some(sampler) = sampler.as_mut() {
            for epoch in 0..s.influence_epochs {
                sampler.start_epoch();
                let tuples: Vec<_> = (0..s.probes_per_epoch)
                    .map(|_| sampler.sample(data, &mut tuple_rng))
                    .collect();
                for t in &tuples {
                    trace.sampled_ids.push(t.probe);
                    trace.sampled_ids.extend(&t.group_a);
                    trace.sampled_ids.extend(&t.group_b);
                }
                let mut js = Vec::with_capacity(tuples.len());
                for chunk in tuples.chunks(s.influence_batch_size) {
                    let results = chunk
                        .par_iter()
                        .map(|t| {
                            let r = match config.method {
                                TrainingMethod::Influence => {
                                    influence_loss_gradient(&model, data, t).map(|g| (g.loss, g.gradient))
                                }
                                _ => embedding_loss_gradient(&model, data, t),
                            };
                            match r {
                                Err(Error::DegenerateGradient { .. }) => Ok(None),
                                r => r.map(Some),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    trace.skipped_tuples += results.iter().filter(|r| r.is_none()).count();
                    let (batch_j, grads): (Vec<f64>, Vec<Vec<f64>>) = results.into_iter().flatten().unzip();
                    if grads.is_empty() {
                        continue;
                    }
                    let j = batch_j.iter().sum::<f64>() / batch_j.len() as f64;
                    js.extend(batch_j);
                    apply(&mut model, &mut influence_state, &mean_gradients(grads))?;
                    step += 1;
                    trace.influence_updates += 1;
                    trace.rows.push(TraceRow {
                        step,
                        round,
                        epoch: Some(epoch),
                        phase: Phase::Influence,
                        loss: None,
                        j: Some(j),
                        cid: None,
                        accuracy: None,
                    });
                }
                if !js.is_empty() {
                    epoch_j.push(js.iter().sum::<f64>() / js.len() as f64);
                }
                trace.influence_epochs += 1;
            }
        }

        let last = round + 1 == s.rounds;
        let cid = if !probes.is_empty() && (config.cid_every_round || last) {
            Some(cid_for_probes(&model, data, &probes, ScoreMethod::Cosine, SubsetKind::Full)?.cid)
        } else {
            None
        };
        let train_accuracy = model.accuracy(&train_refs)?;
        trace.rows.push(TraceRow {
            step,
            round,
            epoch: None,
            phase: Phase::Eval,
            loss: None,
            j: None,
            cid,
            accuracy: Some(train_accuracy),
        });
        trace.rounds.push(RoundSummary {
            round,
            epoch_j,
            cid,
            train_accuracy,
        });
        log::debug!(
            "{} seed {} round {round}: train acc {train_accuracy:.4}, cid {cid:?}",
            config.method,
            config.seed
        );
    }

    let last = trace.rounds.last().expect("at least one round");
    trace.train_accuracy = last.train_accuracy;
    trace.final_cid = last.cid;
    trace.dev_accuracy = model.accuracy(&data.split(Split::Dev))?;
    trace.test_accuracy = model.accuracy(&data.split(Split::Test))?;
    trace.converged = trace.train_accuracy > CONVERGENCE_ACCURACY;
    Ok(TrainOutput {
        model,
        trace,
        label_state,
        influence_state,
    })
}

impl MetricsTrace {
    /// Writes the per-step rows as CSV.
    /// Writes the rows as CSV, preceded by `# comment` lines.
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for c in comments {
            writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(file);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Fraction of rounds with at least two epochs in which J decreased.
    pub fn j_decrease_rate(&self) -> Option<f64> {
        let flags: Vec<bool> = self.rounds.iter().filter_map(RoundSummary::j_decreased).collect();
        if flags.is_empty() {
            return None;
        }
        Some(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
    }
}
