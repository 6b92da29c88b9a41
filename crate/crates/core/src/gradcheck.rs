//! Finite-difference oracle suite for every derivative the tuning loop uses.
//!
//! Each trial builds a random model with at most 50 parameters and a handful
//! of random examples, then compares:
//!
//! | check       | analytic                     | oracle                              |
//! |-------------|------------------------------|-------------------------------------|
//! | gradient    | `gradient` of label/confound loss | central differences            |
//! | hvp         | `hvp(v)`                     | central differences of the gradient along `v` |
//! | dot         | `H_t g_p + H_p g_t`          | central differences of `g_t · g_p`  |
//! | cosine      | `p + q - r - s`              | central differences of `cos(g_t, g_p)` |
//! | influence   | tuple `∇J` from HVPs         | central differences of `J`          |
//! | embedding   | `gradient` of `J_proj`       | central differences of `J_proj`     |
//!
//! Errors are `‖analytic - oracle‖₂ / ‖oracle‖₂`, maximized over trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{dot, grad_cosine_influence, norm, SubsetKind};
use crate::autodiff::{
    finite_difference, finite_difference_gradient, gradient, loss_fn, GradientTape, ParamSet, ParamVars,
};
use crate::data::{Dataset, Example, Split};
use crate::error::Result;
use crate::model::{Model, ModelDims, CONF_A, CONF_B, FIRST_CONTENT};
use crate::tuning::{
    cosine_influence_terms, dot_influence_gradient, embedding_loss_gradient, influence_loss,
    influence_loss_gradient_with_signs, InfluenceTuple, TERM_SIGNS,
};

pub const EPSILON: f64 = 1e-5;

/// V=6, d=3: 46 parameters.
pub const TINY_DIMS: ModelDims = ModelDims {
    vocab: 6,
    hidden: 3,
    labels: 2,
    confounds: 2,
    max_len: 8,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Gradient,
    Hvp,
    Dot,
    Cosine,
    Influence,
    Embedding,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Gradient,
        Check::Hvp,
        Check::Dot,
        Check::Cosine,
        Check::Influence,
        Check::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Gradient => "gradient",
            Check::Hvp => "hvp",
            Check::Dot => "dot",
            Check::Cosine => "cosine",
            Check::Influence => "influence",
            Check::Embedding => "embedding",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Check::Gradient => 1e-6,
            Check::Hvp | Check::Embedding => 1e-5,
            Check::Dot | Check::Cosine | Check::Influence => 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Signs of p, q, r, s. Anything but the default is a deliberate mutation.
    pub term_signs: [f64; 4],
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            term_signs: TERM_SIGNS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: Check,
    pub max_rel_err: f64,
    pub worst_trial: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub params_per_model: usize,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn result(&self, check: Check) -> &CheckResult {
        self.results
            .iter()
            .find(|r| r.check == check)
            .expect("every check runs")
    }
}

pub fn rel_err(analytic: &[f64], oracle: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(oracle).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(oracle).max(1e-12)
}

/// Random tiny model with non-zero biases.
pub fn random_model(rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut model = Model::init(rng.random(), TINY_DIMS)?;
    let mut flat = model.params().flatten();
    for x in flat.iter_mut() {
        *x += rng.random_range(-0.5..0.5);
    }
    model.params_mut().unflatten(&flat)?;
    Ok(model)
}

fn random_example(rng: &mut ChaCha8Rng, label: usize, confound: usize) -> Example {
    let len = rng.random_range(2..6);
    let mut tokens = vec![if confound == 0 { CONF_A } else { CONF_B }];
    tokens.extend((0..len).map(|_| rng.random_range(FIRST_CONTENT..TINY_DIMS.vocab as u32)));
    Example {
        tokens,
        label,
        confound,
        split: Split::Train,
    }
}

/// Probe, then two examples sharing its confound, then two that do not.
fn random_tuple_data(rng: &mut ChaCha8Rng) -> (Dataset, InfluenceTuple) {
    let y = rng.random_range(0..2);
    let c = rng.random_range(0..2);
    let exs = [c, c, c, 1 - c, 1 - c]
        .into_iter()
        .map(|cc| random_example(rng, y, cc))
        .collect();
    let tuple = InfluenceTuple {
        probe: 0,
        group_a: vec![1, 2],
        group_b: vec![3, 4],
    };
    (Dataset::new(exs), tuple)
}

fn with_params(model: &Model, p: &ParamSet) -> Result<Model> {
    Model::from_params(model.dims(), p.clone())
}

fn trial(rng: &mut ChaCha8Rng, signs: [f64; 4]) -> Result<[f64; 6]> {
    let model = random_model(rng)?;
    let full = model.full_subset();
    let params = model.params();
    let (data, tuple) = random_tuple_data(rng);
    let batch: Vec<&Example> = data.examples.iter().collect();
    // Pooling is a sum, so only a different prefix guarantees distinct gradients.
    let (a, b) = (&data.examples[3], &data.examples[0]);

    let mut grad_err: f64 = 0.0;
    for confound in [false, true] {
        let builder = loss_fn(|v: &ParamVars<'_>| {
            if confound {
                model.confound_loss(v, &batch)
            } else {
                model.label_loss(v, &batch)
            }
        });
        let g = gradient(params, &full, builder)?;
        let fd = finite_difference_gradient(params, &full, EPSILON, builder)?;
        grad_err = grad_err.max(rel_err(&g, &fd));
    }

    let v: Vec<f64> = (0..full.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hv = GradientTape::record(params, &full, |vars: &ParamVars<'_>| model.label_loss(vars, &batch))?.hvp(&v)?;
    let shifted = |sign: f64| -> Result<Vec<f64>> {
        let mut p = params.clone();
        let flat: Vec<f64> = p
            .flatten()
            .iter()
            .zip(&v)
            .map(|(x, d)| x + sign * EPSILON * d)
            .collect();
        p.unflatten(&flat)?;
        let m = with_params(&model, &p)?;
        gradient(&p, &full, |vars: &ParamVars<'_>| m.label_loss(vars, &batch))
    };
    let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
    let hv_fd: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * EPSILON))
        .collect();
    let hvp_err = rel_err(&hv, &hv_fd);

    let (_, dg) = dot_influence_gradient(&model, a, b)?;
    let dot_fd = finite_difference(params, &full, EPSILON, |p| {
        let m = with_params(&model, p)?;
        Ok(dot(&m.example_gradient(a, &full)?, &m.example_gradient(b, &full)?))
    })?;
    let dot_err = rel_err(&dg, &dot_fd);

    let cg = cosine_influence_terms(&model, a, b)?.combine(signs);
    let cos_fd = finite_difference(params, &full, EPSILON, |p| {
        Ok(grad_cosine_influence(&with_params(&model, p)?, a, b, SubsetKind::Full)?.value)
    })?;
    let cos_err = rel_err(&cg, &cos_fd);

    let jg = influence_loss_gradient_with_signs(&model, &data, &tuple, signs)?.gradient;
    let j_fd = finite_difference(params, &full, EPSILON, |p| {
        influence_loss(&with_params(&model, p)?, &data, &tuple, SubsetKind::Full)
    })?;
    let inf_err = rel_err(&jg, &j_fd);

    let (_, eg) = embedding_loss_gradient(&model, &data, &tuple)?;
    let e_fd = finite_difference(params, &full, EPSILON, |p| {
        Ok(embedding_loss_gradient(&with_params(&model, p)?, &data, &tuple)?.0)
    })?;
    let emb_err = rel_err(&eg, &e_fd);

    Ok([grad_err, hvp_err, dot_err, cos_err, inf_err, emb_err])
}

/// Runs every check on `config.trials` random tiny models.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut worst = [(0.0f64, 0usize); 6];
    for t in 0..config.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(t as u64);
        let errs = trial(&mut rng, config.term_signs)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            // A NaN error is the worst possible and is never replaced.
            if !w.0.is_nan() && (e.is_nan() || e > w.0) {
                *w = (e, t);
            }
        }
    }
    let results = Check::ALL
        .iter()
        .zip(worst)
        .map(|(&check, (max_rel_err, worst_trial))| CheckResult {
            check,
            max_rel_err,
            worst_trial,
            tolerance: check.tolerance(),
            passed: max_rel_err < check.tolerance(),
        })
        .collect();
    Ok(GradcheckReport {
        config: *config,
        params_per_model: Model::init(0, TINY_DIMS)?.num_params(),
        results,
    })
}
