//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Runs as a plain binary so the verdicts print even when they all pass.
//! Pass a substring (e.g. `cargo test --test acceptance -- featconf`) to run
//! a subset.

use std::cell::OnceCell;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use inftune::attribution::{cosine, grad_cosine_influence, norm, proj_influence, SubsetKind};
use inftune::autodiff::{gradient, ParamVars};
use inftune::data::{
    agreement_rate, generate_featconf, generate_lenconf, write_dataset, Dataset, Example, FeatConfSpec, LenConfSpec,
    Split,
};
use inftune::experiment::{run_experiment, ExperimentPlan, ExperimentSummary, TrialRow};
use inftune::gradcheck::{run_gradcheck, Check, GradcheckConfig};
use inftune::model::{Model, ModelDims};
use inftune::tuning::{train, RunConfig, TrainingMethod};
use inftune::Result;

const SEEDS: [u64; 5] = [2021, 2022, 2023, 2024, 2025];
const ACCESS_RATES: [f64; 3] = [0.05, 0.2, 1.0];
/// Influence rate for embedding tuning, whose loss is on a different scale.
const EMBEDDING_INFLUENCE_LR: f64 = 3e-3;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn base_config() -> RunConfig {
    RunConfig {
        cid_every_round: false,
        ..RunConfig::default()
    }
}

/// Trials for `methods`, with embedding tuning at its own influence rate.
fn run_methods(
    data: &Dataset,
    methods: &[TrainingMethod],
    access_rates: &[f64],
) -> Result<(ExperimentSummary, Duration)> {
    let start = Instant::now();
    let mut plan = ExperimentPlan::new(base_config());
    plan.seeds = SEEDS.to_vec();
    plan.methods = methods
        .iter()
        .copied()
        .filter(|&m| m != TrainingMethod::Embedding)
        .collect();
    plan.access_rates = access_rates.to_vec();
    let mut rows: Vec<TrialRow> = run_experiment(&plan, data, |_, _| Ok(()))?.trials;
    if methods.contains(&TrainingMethod::Embedding) {
        let mut emb = ExperimentPlan::new(base_config());
        emb.base.influence_optimizer.lr = EMBEDDING_INFLUENCE_LR;
        emb.seeds = SEEDS.to_vec();
        emb.methods = vec![TrainingMethod::Embedding];
        rows.extend(run_experiment(&emb, data, |_, _| Ok(()))?.trials);
    }
    plan.methods = methods.to_vec();
    Ok((ExperimentSummary::from_trials(&plan, rows), start.elapsed()))
}

fn mean_test(s: &ExperimentSummary, method: TrainingMethod) -> f64 {
    s.mean_test(method).unwrap_or(f64::NAN)
}

fn mean_cid(s: &ExperimentSummary, method: TrainingMethod) -> f64 {
    s.aggregate(method, 1.0)
        .and_then(|a| a.cid)
        .map_or(f64::NAN, |c| c.mean)
}

fn gradient_oracles() -> Result<Verdict> {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default())?;
    let elapsed = start.elapsed();
    let errs: Vec<String> = report
        .results
        .iter()
        .map(|r| format!("{} {:.1e}", r.check.name(), r.max_rel_err))
        .collect();
    let required = [Check::Gradient, Check::Hvp, Check::Dot, Check::Cosine, Check::Embedding];
    let passed = report.config.trials >= 20
        && report.params_per_model <= 50
        && required.iter().all(|&c| report.result(c).passed)
        && report.passed()
        && elapsed < Duration::from_secs(60);
    Ok(verdict(
        passed,
        format!(
            "{} trials, {} params: {}",
            report.config.trials,
            report.params_per_model,
            errs.join(", ")
        ),
    ))
}

/// Models to probe: fresh, perturbed and briefly trained.
fn probe_models(data: &Dataset) -> Result<Vec<Model>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut models = vec![Model::init(1, ModelDims::default())?];
    let mut noisy = Model::init(2, ModelDims::default())?;
    let flat: Vec<f64> = noisy
        .params()
        .flatten()
        .iter()
        .map(|x| x + rng.random_range(-0.2..0.2))
        .collect();
    noisy.params_mut().unflatten(&flat)?;
    models.push(noisy);
    let mut cfg = base_config();
    cfg.schedule.rounds = 4;
    cfg.probe_count = 0;
    models.push(train(&cfg, data)?.model);
    Ok(models)
}

fn same_label_pairs(data: &Dataset, n: usize, seed: u64) -> Vec<(&Example, &Example)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = data.split(Split::Train);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let a = *train.choose(&mut rng).unwrap();
        let b = *train.choose(&mut rng).unwrap();
        if a.label == b.label && !std::ptr::eq(a, b) {
            pairs.push((a, b));
        }
    }
    pairs
}

fn projection_identity(data: &Dataset) -> Result<Verdict> {
    let mut worst_score: f64 = 0.0;
    let mut worst_dir: f64 = 0.0;
    let mut count = 0;
    for (i, model) in probe_models(data)?.iter().enumerate() {
        for (a, b) in same_label_pairs(data, 50, i as u64) {
            let head = grad_cosine_influence(model, a, b, SubsetKind::LabelHeadRow)?.value;
            let proj = proj_influence(model, a, b)?.value;
            worst_score = worst_score.max((head - proj).abs());
            count += 1;
            for ex in [a, b] {
                let g = model.example_gradient(ex, &model.label_head_row(ex.label)?)?;
                let pooled = model.pooled(&[ex])?;
                let (ng, np) = (norm(&g), norm(pooled.row(0)));
                for (gi, pi) in g.iter().zip(pooled.row(0)) {
                    worst_dir = worst_dir.max((gi / ng + pi / np).abs());
                }
            }
        }
    }
    Ok(verdict(
        count >= 100 && worst_score < 1e-10 && worst_dir < 1e-10,
        format!("{count} pairs: max |head - proj| {worst_score:.1e}, max direction error {worst_dir:.1e}"),
    ))
}

fn scaled_gradient(model: &Model, ex: &Example, scale: f64) -> Result<Vec<f64>> {
    gradient(model.params(), &model.full_subset(), |v: &ParamVars<'_>| {
        model.label_loss(v, &[ex]).scale(scale)
    })
}

fn cosine_properties(data: &Dataset) -> Result<Verdict> {
    let (mut self_err, mut sym_err, mut scale_err, mut range_excess): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let train = data.split(Split::Train);
    let mut count = 0;
    for model in probe_models(data)? {
        for _ in 0..40 {
            let a = *train.choose(&mut rng).unwrap();
            let b = *train.choose(&mut rng).unwrap();
            let ab = grad_cosine_influence(&model, a, b, SubsetKind::Full)?.value;
            let ba = grad_cosine_influence(&model, b, a, SubsetKind::Full)?.value;
            let aa = grad_cosine_influence(&model, a, a, SubsetKind::Full)?.value;
            self_err = self_err.max((aa - 1.0).abs());
            sym_err = sym_err.max((ab - ba).abs());
            range_excess = range_excess.max(ab.abs() - 1.0).max(aa.abs() - 1.0);
            let gb = scaled_gradient(&model, b, 1.0)?;
            for c in [1e-3, 0.5, 7.0, 1e3] {
                let scaled = cosine(&scaled_gradient(&model, a, c)?, &gb)?;
                scale_err = scale_err.max((scaled - ab).abs());
            }
            count += 1;
        }
    }
    Ok(verdict(
        self_err <= 1e-12 && sym_err <= 1e-12 && scale_err <= 1e-10 && range_excess <= 1e-9,
        format!(
            "{count} pairs: self {self_err:.1e}, symmetry {sym_err:.1e}, scaling {scale_err:.1e}, range excess {range_excess:.1e}"
        ),
    ))
}

fn deconfounding_ordering(s: &ExperimentSummary, elapsed: Duration) -> Verdict {
    use TrainingMethod::*;
    let [ft, inf, emb, ns] = [Finetune, Influence, Embedding, NoSpurious].map(|m| mean_test(s, m));
    let ft_fit = s
        .trials
        .iter()
        .filter(|t| t.method == Finetune && t.converged)
        .all(|t| t.train_accuracy == 1.0);
    let gap = 0.02;
    let passed = ns > inf && ns > emb && inf.min(emb) > ft && ft_fit && inf - ft >= gap && emb - ft >= gap;
    verdict(
        passed,
        format!(
            "test acc no-spurious {ns:.4}, influence {inf:.4} ({:+.1} pts), embedding {emb:.4} ({:+.1} pts), finetune {ft:.4}; finetune fits train: {ft_fit} [{:.0}s]",
            100.0 * (inf - ft),
            100.0 * (emb - ft),
            elapsed.as_secs_f64()
        ),
    )
}

fn cid_ordering(s: &ExperimentSummary) -> Verdict {
    use TrainingMethod::*;
    let [ft, inf, ns] = [Finetune, Influence, NoSpurious].map(|m| mean_cid(s, m));
    let reduction = 1.0 - inf / ft;
    let rates: Vec<f64> = s
        .trials
        .iter()
        .filter(|t| t.method == Influence && t.access_rate == 1.0)
        .filter_map(|t| t.j_decrease_rate)
        .collect();
    // Every trial runs the same number of rounds, so this is the pooled rate.
    let j_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    verdict(
        reduction >= 0.4 && ns < ft && j_rate >= 0.8,
        format!(
            "CID finetune {ft:.4}, influence {inf:.4} ({:.0}% lower), no-spurious {ns:.4}; J fell within {:.0}% of influence rounds",
            100.0 * reduction,
            100.0 * j_rate
        ),
    )
}

fn featconf_ordering(s: &ExperimentSummary) -> Verdict {
    use TrainingMethod::*;
    let [ft, inf, emb] = [Finetune, Influence, Embedding].map(|m| mean_test(s, m));
    verdict(
        inf - ft >= 0.02 && emb - ft >= 0.02,
        format!("test acc influence {inf:.4}, embedding {emb:.4}, finetune {ft:.4}"),
    )
}

fn access_rates(s: &ExperimentSummary) -> Verdict {
    let ft = mean_test(s, TrainingMethod::Finetune);
    let mut passed = true;
    let mut parts = Vec::new();
    for rate in ACCESS_RATES {
        let a = s.aggregate(TrainingMethod::Influence, rate);
        let converged = a.map_or(0, |a| a.converged);
        let acc = a.and_then(|a| a.test_accuracy).map_or(f64::NAN, |t| t.mean);
        passed &= converged >= 3 && acc > ft;
        parts.push(format!("{:.0}%: {converged}/5 converged, test {acc:.4}", 100.0 * rate));
    }
    verdict(passed, format!("{}; finetune {ft:.4}", parts.join("; ")))
}

/// Whether the observed agreement rate is within three binomial standard
/// deviations of `p`.
fn rate_ok(examples: &[&Example], same_index: bool, p: f64) -> (bool, f64) {
    let observed = agreement_rate(examples, same_index);
    let sd = (p * (1.0 - p) / examples.len() as f64).sqrt();
    ((observed - p).abs() <= 3.0 * sd, observed)
}

fn determinism(lenconf: &Dataset) -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut passed = true;

    let dir = tempfile::tempdir().map_err(|e| inftune::Error::io("tempdir", e))?;
    let bytes = |d: &Dataset, name: &str| -> Result<Vec<u8>> {
        let path = dir.path().join(name);
        write_dataset(d, &path)?;
        std::fs::read(&path).map_err(|e| inftune::Error::io(path, e))
    };
    let len_spec = LenConfSpec::default();
    let feat_spec = FeatConfSpec::default();
    let featconf = generate_featconf(&feat_spec)?;
    let same_data = bytes(lenconf, "a")? == bytes(&generate_lenconf(&len_spec)?, "b")?
        && bytes(&featconf, "c")? == bytes(&generate_featconf(&feat_spec)?, "d")?;
    passed &= same_data;
    notes.push(format!("datasets reproduce: {same_data}"));

    let mut cfg = base_config();
    cfg.method = TrainingMethod::Influence;
    cfg.schedule.rounds = 3;
    cfg.probe_count = 10;
    let (a, b) = (train(&cfg, lenconf)?, train(&cfg, lenconf)?);
    let same_run = a.model.params().flatten() == b.model.params().flatten() && a.trace == b.trace;
    passed &= same_run;
    notes.push(format!("training reproduces: {same_run}"));

    let sizes = [(lenconf, [1500, 480, 500]), (&featconf, [5000, 15000, 15000])]
        .iter()
        .all(|(d, n)| Split::ALL.iter().zip(n).all(|(&s, &n)| d.count(s) == n));
    passed &= sizes;
    notes.push(format!("split sizes exact: {sizes}"));

    let mut rates = Vec::new();
    for (name, data, same_index, train_p, eval_p) in [
        (
            "lenconf",
            lenconf,
            true,
            len_spec.train_confound_rate,
            len_spec.eval_confound_rate,
        ),
        (
            "featconf",
            &featconf,
            false,
            feat_spec.train_confound_rate,
            feat_spec.eval_confound_rate,
        ),
    ] {
        for split in Split::ALL {
            let p = if split == Split::Train { train_p } else { eval_p };
            let (ok, observed) = rate_ok(&data.split(split), same_index, p);
            passed &= ok;
            rates.push(format!("{name}/{split} {observed:.4}"));
        }
    }
    notes.push(format!("confound rates {}", rates.join(", ")));
    Ok(verdict(passed, notes.join("; ")))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    let lenconf = generate_lenconf(&LenConfSpec::default()).expect("default settings are valid");
    // Criteria 4, 5 and 7 share one set of LenConf trials.
    let lenconf_runs = OnceCell::new();
    let lenconf_summary = || {
        use TrainingMethod::*;
        lenconf_runs
            .get_or_init(|| {
                run_methods(&lenconf, &[Finetune, Influence, Embedding, NoSpurious], &ACCESS_RATES)
                    .map_err(|e| e.to_string())
            })
            .clone()
    };
    let lenconf = &lenconf;
    let text = |e: inftune::Error| e.to_string();

    type Criterion<'a> = (&'a str, Box<dyn Fn() -> std::result::Result<Verdict, String> + 'a>);
    let criteria: Vec<Criterion<'_>> = vec![
        ("1 gradient oracles", Box::new(|| gradient_oracles().map_err(text))),
        (
            "2 projection identity",
            Box::new(|| projection_identity(lenconf).map_err(text)),
        ),
        (
            "3 cosine properties",
            Box::new(|| cosine_properties(lenconf).map_err(text)),
        ),
        (
            "4 lenconf accuracy ordering",
            Box::new(|| lenconf_summary().map(|(s, d)| deconfounding_ordering(&s, d))),
        ),
        (
            "5 lenconf cid ordering",
            Box::new(|| lenconf_summary().map(|(s, _)| cid_ordering(&s))),
        ),
        (
            "6 featconf accuracy ordering",
            Box::new(|| {
                use TrainingMethod::*;
                let data = generate_featconf(&FeatConfSpec::default()).map_err(text)?;
                let (s, _) = run_methods(&data, &[Finetune, Influence, Embedding], &[]).map_err(text)?;
                Ok(featconf_ordering(&s))
            }),
        ),
        (
            "7 access rates",
            Box::new(|| lenconf_summary().map(|(s, _)| access_rates(&s))),
        ),
        ("8 determinism", Box::new(|| determinism(lenconf).map_err(text))),
    ];

    if std::env::args().any(|a| a == "--list") {
        for (name, _) in criteria.iter().filter(|(n, _)| wanted(n)) {
            println!("criterion {name}: test");
        }
        return ExitCode::SUCCESS;
    }

    let mut failed = 0;
    for (name, check) in criteria {
        if !wanted(name) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {name}: {} ({detail}) [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
