//! Multi-seed method comparisons and the confound access-rate sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attribution::{mean, variance, welch_t};
use crate::config::{Configurable, Pairs};
use crate::data::Dataset;
use crate::error::Result;
use crate::par::*;
use crate::tuning::{train, RunConfig, TrainOutput, TrainingMethod};

pub const DEFAULT_SEEDS: [u64; 5] = [2021, 2022, 2023, 2024, 2025];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Shared settings; `method`, `seed` and `access_rate` are overridden per trial.
    pub base: RunConfig,
    pub methods: Vec<TrainingMethod>,
    pub seeds: Vec<u64>,
    /// Extra influence-tuning trials at each rate, in addition to the method grid.
    pub access_rates: Vec<f64>,
}

impl ExperimentPlan {
    pub fn new(base: RunConfig) -> Self {
        Self {
            base,
            methods: TrainingMethod::ALL.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            access_rates: Vec::new(),
        }
    }

    /// Every (method, access rate, seed) trial, grid first, without duplicates.
    pub fn trials(&self) -> Vec<RunConfig> {
        let mut cells: Vec<(TrainingMethod, f64)> = self.methods.iter().map(|&m| (m, self.base.access_rate)).collect();
        for &rate in &self.access_rates {
            if !cells.contains(&(TrainingMethod::Influence, rate)) {
                cells.push((TrainingMethod::Influence, rate));
            }
        }
        cells
            .into_iter()
            .flat_map(|(method, access_rate)| {
                self.seeds.iter().map(move |&seed| RunConfig {
                    method,
                    seed,
                    access_rate,
                    ..self.base.clone()
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub method: TrainingMethod,
    pub access_rate: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub final_cid: Option<f64>,
    pub converged: bool,
    pub j_decrease_rate: Option<f64>,
}

impl TrialRow {
    pub fn new(config: &RunConfig, out: &TrainOutput) -> Self {
        let t = &out.trace;
        Self {
            seed: config.seed,
            method: config.method,
            access_rate: config.access_rate,
            train_accuracy: t.train_accuracy,
            dev_accuracy: t.dev_accuracy,
            test_accuracy: t.test_accuracy,
            final_cid: t.final_cid,
            converged: t.converged,
            j_decrease_rate: t.j_decrease_rate(),
        }
    }
}

/// Mean and sample standard deviation; `std` is `None` below two values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            mean: mean(xs),
            std: (xs.len() > 1).then(|| variance(xs).sqrt()),
        })
    }
}

/// Statistics over the converged trials of one (method, access rate) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: TrainingMethod,
    pub access_rate: f64,
    pub converged: usize,
    pub non_converged: usize,
    pub train_accuracy: Option<Stat>,
    pub dev_accuracy: Option<Stat>,
    pub test_accuracy: Option<Stat>,
    pub cid: Option<Stat>,
    /// Two-sided Welch p-value of test accuracy against converged finetune trials.
    pub p_vs_finetune: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: Pairs,
    pub methods: Vec<TrainingMethod>,
    pub seeds: Vec<u64>,
    pub access_rates: Vec<f64>,
    pub trials: Vec<TrialRow>,
    pub aggregates: Vec<MethodAggregate>,
    /// Trials excluded from every aggregate.
    pub non_converged: Vec<TrialRow>,
}

impl ExperimentSummary {
    pub fn from_trials(plan: &ExperimentPlan, trials: Vec<TrialRow>) -> Self {
        let mut cells: Vec<(TrainingMethod, f64)> = Vec::new();
        for t in &trials {
            if !cells.contains(&(t.method, t.access_rate)) {
                cells.push((t.method, t.access_rate));
            }
        }
        let finetune_test: Vec<f64> = trials
            .iter()
            .filter(|t| t.converged && t.method == TrainingMethod::Finetune)
            .map(|t| t.test_accuracy)
            .collect();
        let aggregates = cells
            .into_iter()
            .map(|(method, access_rate)| {
                let cell: Vec<&TrialRow> = trials
                    .iter()
                    .filter(|t| t.method == method && t.access_rate == access_rate)
                    .collect();
                let ok: Vec<&TrialRow> = cell.iter().copied().filter(|t| t.converged).collect();
                let stat = |f: fn(&TrialRow) -> f64| Stat::of(&ok.iter().map(|t| f(t)).collect::<Vec<_>>());
                let cids: Vec<f64> = ok.iter().filter_map(|t| t.final_cid).collect();
                let test: Vec<f64> = ok.iter().map(|t| t.test_accuracy).collect();
                let p_vs_finetune = (method != TrainingMethod::Finetune)
                    .then(|| welch_t(&test, &finetune_test).ok().map(|(_, p)| p))
                    .flatten();
                MethodAggregate {
                    method,
                    access_rate,
                    converged: ok.len(),
                    non_converged: cell.len() - ok.len(),
                    train_accuracy: stat(|t| t.train_accuracy),
                    dev_accuracy: stat(|t| t.dev_accuracy),
                    test_accuracy: stat(|t| t.test_accuracy),
                    cid: Stat::of(&cids),
                    p_vs_finetune,
                }
            })
            .collect();
        let non_converged = trials.iter().filter(|t| !t.converged).cloned().collect();
        Self {
            config: plan.base.pairs(),
            methods: plan.methods.clone(),
            seeds: plan.seeds.clone(),
            access_rates: plan.access_rates.clone(),
            trials,
            aggregates,
            non_converged,
        }
    }

    pub fn aggregate(&self, method: TrainingMethod, access_rate: f64) -> Option<&MethodAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.access_rate == access_rate)
    }

    /// Mean converged test accuracy at the base access rate.
    pub fn mean_test(&self, method: TrainingMethod) -> Option<f64> {
        let rate = self.config.get("access_rate")?.parse().ok()?;
        Some(self.aggregate(method, rate)?.test_accuracy?.mean)
    }

    /// One row per trial, after a `# comment` line for each of `comments`.
    pub fn write_trials_csv(&self, path: &std::path::Path, comments: &[String]) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| crate::Error::io(path, e))?;
        for c in comments {
            writeln!(file, "# {c}").map_err(|e| crate::Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(file);
        for t in &self.trials {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| crate::Error::io(path, e))?;
        Ok(())
    }
}

/// Runs every trial of `plan`, independent trials in parallel.
///
/// `on_trial` sees each finished trial, e.g. to persist its model and trace.
pub fn run_experiment<F>(plan: &ExperimentPlan, dataset: &Dataset, on_trial: F) -> Result<ExperimentSummary>
where
    F: Fn(&RunConfig, &TrainOutput) -> Result<()> + Sync,
{
    let trials = plan.trials();
    let rows = trials
        .par_iter()
        .map(|config| {
            let out = train(config, dataset)?;
            log::info!(
                "{} seed {} rate {}: test {:.4} converged {}",
                config.method,
                config.seed,
                config.access_rate,
                out.trace.test_accuracy,
                out.trace.converged
            );
            on_trial(config, &out)?;
            Ok(TrialRow::new(config, &out))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentSummary::from_trials(plan, rows))
}
