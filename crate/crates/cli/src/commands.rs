use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde_json::json;

use inftune::attribution::{Method, SubsetKind};
use inftune::config::{normalize_key, read_pairs, render_pairs, write_pairs, Configurable, Pairs};
use inftune::data::{
    generate_featconf, generate_lenconf, read_dataset, write_dataset, Dataset, FeatConfSpec, LenConfSpec, Split,
};
use inftune::experiment::{run_experiment, ExperimentPlan};
use inftune::gradcheck::{run_gradcheck, GradcheckConfig};
use inftune::model::Model;
use inftune::tuning::{cid_probes, train as train_model, RunConfig, TrainOutput, TrainingMethod, TERM_SIGNS};

use crate::{
    CidArgs, DataArgs, ExperimentArgs, GenDataArgs, GradcheckArgs, Kind, RunFlags, ScoreMethod, Subset, TrainArgs,
};

fn parse_set(items: &[String]) -> Result<Pairs> {
    let mut out = Pairs::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {item:?}"))?;
        out.insert(normalize_key(k), v.trim().to_string());
    }
    Ok(out)
}

fn read_optional(path: Option<&Path>) -> Result<Option<Pairs>> {
    path.map(|p| read_pairs(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()
}

fn comment_lines(pairs: &Pairs) -> Vec<String> {
    pairs.iter().map(|(k, v)| format!("{k} = {v}")).collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn generate(kind: Kind, pairs: &Pairs) -> Result<(Dataset, Pairs)> {
    Ok(match kind {
        Kind::Lenconf => {
            let mut spec = LenConfSpec::default();
            spec.apply(pairs)?;
            (generate_lenconf(&spec)?, spec.pairs())
        }
        Kind::Featconf => {
            let mut spec = FeatConfSpec::default();
            spec.apply(pairs)?;
            (generate_featconf(&spec)?, spec.pairs())
        }
    })
}

/// Reads `--data`, or generates `--kind` with default sizes.
fn load_data(args: &DataArgs) -> Result<(Dataset, String)> {
    match (&args.data, args.kind) {
        (Some(path), _) => {
            let data = read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
            Ok((data, path.display().to_string()))
        }
        (None, Some(kind)) => {
            let pairs = Pairs::from([("seed".to_string(), args.data_seed.to_string())]);
            let (data, _) = generate(kind, &pairs)?;
            Ok((data, format!("{} seed {}", kind.as_str(), args.data_seed)))
        }
        (None, None) => bail!("one of --data or --kind is required"),
    }
}

fn flag_pairs(flags: &RunFlags) -> Result<Pairs> {
    let mut out = Pairs::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.insert(k.to_string(), v);
        }
    };
    put("method", flags.method.clone());
    put("seed", flags.seed.map(|x| x.to_string()));
    put("lr", flags.lr.map(|x| x.to_string()));
    put("influence_lr", flags.influence_lr.map(|x| x.to_string()));
    put("lambda", flags.lambda.map(|x| x.to_string()));
    put("access_rate", flags.access_rate.map(|x| x.to_string()));
    put("rounds", flags.rounds.map(|x| x.to_string()));
    put("finetune_steps", flags.finetune_steps.map(|x| x.to_string()));
    put("influence_epochs", flags.influence_epochs.map(|x| x.to_string()));
    put("probes_per_epoch", flags.probes_per_epoch.map(|x| x.to_string()));
    put("k", flags.k.map(|x| x.to_string()));
    put(
        "influence_batch_size",
        flags.influence_batch_size.map(|x| x.to_string()),
    );
    put("batch_size", flags.batch_size.map(|x| x.to_string()));
    put("probe_count", flags.probe_count.map(|x| x.to_string()));
    put("cid_every_round", flags.cid_every_round.map(|x| x.to_string()));
    // `--set` is applied last so it wins over the named flags.
    out.extend(parse_set(&flags.set)?);
    Ok(out)
}

pub fn gen_data(out_root: &Path, args: GenDataArgs) -> Result<ExitCode> {
    let file = read_optional(args.config.as_deref())?;
    let mut flags = parse_set(&args.set)?;
    if let Some(seed) = args.seed {
        flags.insert("seed".into(), seed.to_string());
    }
    let mut pairs = file.unwrap_or_default();
    pairs.extend(flags);
    let (data, spec) = generate(args.kind, &pairs)?;
    let seed = &spec["seed"];
    let out = args.out.unwrap_or_else(|| {
        out_root
            .join("data")
            .join(format!("{}-{seed}.jsonl", args.kind.as_str()))
    });
    create_parent(&out)?;
    write_dataset(&data, &out)?;
    let mut echo = Pairs::from([("kind".to_string(), args.kind.as_str().to_string())]);
    echo.extend(spec);
    write_pairs(&echo, &out.with_extension("spec"))?;
    println!(
        "wrote {} records ({} train, {} dev, {} test) to {}",
        data.len(),
        data.count(Split::Train),
        data.count(Split::Dev),
        data.count(Split::Test),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_summary(config: &RunConfig, data_source: &str, out: &TrainOutput) -> serde_json::Value {
    let t = &out.trace;
    json!({
        "config": config.pairs(),
        "data": data_source,
        "train_accuracy": t.train_accuracy,
        "dev_accuracy": t.dev_accuracy,
        "test_accuracy": t.test_accuracy,
        "converged": t.converged,
        "final_cid": t.final_cid,
        "cid_probes": t.cid_probes,
        "finetune_steps": t.finetune_steps,
        "influence_epochs": t.influence_epochs,
        "influence_updates": t.influence_updates,
        "skipped_tuples": t.skipped_tuples,
        "effective_k": t.effective_k,
        "admitted": t.admitted,
        "j_decrease_rate": t.j_decrease_rate(),
    })
}

fn write_run(dir: &Path, config: &RunConfig, data_source: &str, out: &TrainOutput) -> inftune::Result<()> {
    fs::create_dir_all(dir).map_err(|e| inftune::Error::io(dir, e))?;
    let pairs = config.pairs();
    let comments = comment_lines(&pairs);
    write_pairs(&pairs, &dir.join("config.cfg"))?;
    out.model.save_with_comments(&dir.join("model.ckpt"), &comments)?;
    out.trace.write_csv(&dir.join("trace.csv"), &comments)?;
    let summary = serde_json::to_string_pretty(&train_summary(config, data_source, out))?;
    let path = dir.join("summary.json");
    fs::write(&path, summary + "\n").map_err(|e| inftune::Error::io(path, e))
}

pub fn train(out_root: &Path, args: TrainArgs) -> Result<ExitCode> {
    let file = read_optional(args.run.config.as_deref())?;
    let config = RunConfig::resolve(file.as_ref(), &flag_pairs(&args.run)?)?;
    let (data, source) = load_data(&args.data)?;
    let out = train_model(&config, &data)?;
    let dir = args.out.unwrap_or_else(|| {
        out_root
            .join("train")
            .join(format!("{}-{}", config.method, config.seed))
    });
    write_run(&dir, &config, &source, &out)?;
    let t = &out.trace;
    println!(
        "{} seed {}: train {:.4} dev {:.4} test {:.4} cid {} -> {}",
        config.method,
        config.seed,
        t.train_accuracy,
        t.dev_accuracy,
        t.test_accuracy,
        t.final_cid.map_or("n/a".into(), |c| format!("{c:.5}")),
        dir.display()
    );
    if !t.converged {
        // Reported, not an error: non-converged runs are excluded downstream.
        eprintln!("warning: run did not converge (train accuracy {:.4})", t.train_accuracy);
    }
    Ok(ExitCode::SUCCESS)
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

pub fn cid(args: CidArgs) -> Result<ExitCode> {
    let model = Model::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (data, source) = load_data(&args.data)?;
    let probes = cid_probes(&data, args.probes, args.seed);
    let method = match args.score {
        ScoreMethod::Cosine => Method::Cosine,
        ScoreMethod::Dot => Method::Dot,
        ScoreMethod::Proj => Method::Proj,
    };
    let subset = match args.subset {
        Subset::Full => SubsetKind::Full,
        Subset::LabelHeadRow => SubsetKind::LabelHeadRow,
    };
    let report = inftune::attribution::cid_for_probes(&model, &data, &probes, method, subset)?;

    let mut csv = String::new();
    for line in [
        format!("checkpoint = {}", args.checkpoint.display()),
        format!("data = {source}"),
        format!("probes = {}", args.probes),
        format!("seed = {}", args.seed),
        format!("score = {}", serde_json::to_value(method)?.as_str().unwrap_or_default()),
        format!(
            "subset = {}",
            serde_json::to_value(subset)?.as_str().unwrap_or_default()
        ),
        format!("skipped_probes = {}", report.skipped_probes.len()),
    ] {
        writeln!(csv, "# {line}")?;
    }
    writeln!(csv, "probe_id,mean_a,mean_b,diff,t,p")?;
    for r in &report.probes {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.probe,
            r.mean_a,
            r.mean_b,
            r.mean_diff,
            opt(r.t),
            opt(r.p)
        )?;
    }
    writeln!(csv, "cid,,,{},,", report.cid)?;

    match &args.out {
        Some(path) => {
            create_parent(path)?;
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "cid {:.6} over {} probes -> {}",
                report.cid,
                report.probes.len(),
                path.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut term_signs = TERM_SIGNS;
    if args.flip_r {
        term_signs[2] = -term_signs[2];
    }
    let config = GradcheckConfig {
        trials: args.trials,
        seed: args.seed,
        term_signs,
    };
    let report = run_gradcheck(&config)?;
    println!(
        "{} trials, seed {}, {} params per model",
        config.trials, config.seed, report.params_per_model
    );
    for r in &report.results {
        println!(
            "{:<10} max rel err {:.3e} (trial {:>2})  tol {:.0e}  {}",
            r.check.name(),
            r.max_rel_err,
            r.worst_trial,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &args.out {
        create_parent(path)?;
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn parse_list<T: FromStr>(s: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| anyhow::anyhow!("{key}: {x:?}: {e}")))
        .collect()
}

pub fn experiment(out_root: &Path, args: ExperimentArgs) -> Result<ExitCode> {
    let mut file = read_optional(args.run.config.as_deref())?.unwrap_or_default();
    // Plan keys are not run settings; take them out before resolving.
    let file_methods = file.remove("methods");
    let file_seeds = file.remove("seeds");
    let file_rates = file.remove("access_rates");
    let base = RunConfig::resolve(Some(&file), &flag_pairs(&args.run)?)?;

    let mut plan = ExperimentPlan::new(base);
    if !args.methods.is_empty() {
        plan.methods = args
            .methods
            .iter()
            .map(|m| TrainingMethod::from_str(m))
            .collect::<Result<_, _>>()?;
    } else if let Some(m) = file_methods {
        plan.methods = parse_list(&m, "methods")?;
    }
    if !args.seeds.is_empty() {
        plan.seeds = args.seeds.clone();
    } else if let Some(s) = file_seeds {
        plan.seeds = parse_list(&s, "seeds")?;
    }
    if !args.access_rates.is_empty() {
        plan.access_rates = args.access_rates.clone();
    } else if let Some(r) = file_rates {
        plan.access_rates = parse_list(&r, "access_rates")?;
    }

    let (data, source) = load_data(&args.data)?;
    let dir: PathBuf = args.out.unwrap_or_else(|| out_root.join("experiment"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut echo = plan.base.pairs();
    let join = |xs: Vec<String>| xs.join(",");
    echo.insert(
        "methods".into(),
        join(plan.methods.iter().map(|m| m.to_string()).collect()),
    );
    echo.insert("seeds".into(), join(plan.seeds.iter().map(|s| s.to_string()).collect()));
    echo.insert(
        "access_rates".into(),
        join(plan.access_rates.iter().map(|r| r.to_string()).collect()),
    );
    write_pairs(&echo, &dir.join("config.cfg"))?;
    log::info!("experiment config:\n{}", render_pairs(&echo));

    let summary = run_experiment(&plan, &data, |config, out| {
        let trial_dir = dir.join(format!("{}-{}-{}", config.method, config.access_rate, config.seed));
        write_run(&trial_dir, config, &source, out)
    })?;

    summary.write_trials_csv(&dir.join("trials.csv"), &comment_lines(&echo))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", dir.display()))?;

    println!(
        "{:<12} {:>5} {:>6} {:>16} {:>16} {:>10}",
        "method", "rate", "conv", "test", "cid", "p_vs_ft"
    );
    for a in &summary.aggregates {
        let stat = |s: Option<inftune::experiment::Stat>| {
            s.map_or("n/a".into(), |s| format!("{:.4}±{:.4}", s.mean, s.std.unwrap_or(0.0)))
        };
        println!(
            "{:<12} {:>5} {:>3}/{:<2} {:>16} {:>16} {:>10}",
            a.method.as_str(),
            a.access_rate,
            a.converged,
            a.converged + a.non_converged,
            stat(a.test_accuracy),
            stat(a.cid),
            a.p_vs_finetune.map_or("-".into(), |p| format!("{p:.3}"))
        );
    }
    if !summary.non_converged.is_empty() {
        eprintln!(
            "warning: {} trials did not converge and were excluded",
            summary.non_converged.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}
