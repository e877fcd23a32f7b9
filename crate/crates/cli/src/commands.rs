use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bridgekit::bridge::BridgeSchedule;
use bridgekit::checkpoint::Checkpoint;
use bridgekit::evaluation::evaluate;
use bridgekit::experiment::{run_ablation, Preset};
use bridgekit::prior::{DatasetSplits, PairedExample, Split, TaskRules};
use bridgekit::sampler::{sample_examples, SampleMode};
use bridgekit::trainer::{config_fingerprint, fit};
use bridgekit::verify::{format_table, run_suite, Suite};
use bridgekit::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::run::{RunDir, CONFIG_FILE};
use crate::{Cli, Command};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData {
            config,
            out,
            train,
            valid,
            test,
        } => gen_data(config.as_deref(), out, *train, *valid, *test),
        Command::Schedule { steps, out } => schedule(&cli.runs, *steps, out.as_deref()),
        Command::Train {
            config,
            data,
            out,
            max_steps,
            resume,
        } => match resume {
            Some(dir) => resume_train(dir, config.as_deref(), data.as_deref(), *max_steps),
            None => train(config.as_deref(), data.as_deref(), out.as_deref(), *max_steps),
        },
        Command::Sample {
            ckpt,
            data,
            n,
            mode,
            out,
            split,
            seed,
        } => sample(&cli.runs, ckpt, data, *n, mode, out, split, *seed),
        Command::Eval {
            ckpt,
            data,
            out,
            split,
            config,
        } => eval(&cli.runs, ckpt, data, out, split, config.as_deref()),
        Command::Verify { suite, seed } => verify(&cli.runs, suite, *seed),
        Command::Ablate {
            preset,
            config,
            data,
            out,
        } => ablate(preset, config.as_deref(), data.as_deref(), out),
    }
}

/// Runs `body` inside `run`, recording success or failure in its manifest.
fn finish<T>(run: RunDir, result: Result<(T, serde_json::Value)>) -> Result<T> {
    match result {
        Ok((v, details)) => {
            run.finish("ok", details)?;
            Ok(v)
        }
        Err(e) => {
            let _ = run.finish("failed", json!({"error": e.to_string()}));
            Err(e)
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(Error::invalid(format!("unknown split {s:?} (train, valid, test)"))),
    }
}

fn split_examples(path: &Path, split: &str) -> Result<Vec<PairedExample>> {
    let split = parse_split(split)?;
    let data = DatasetSplits::read_file(path)?;
    let examples = data.get(split).to_vec();
    if examples.is_empty() {
        return Err(Error::invalid(format!("{} has no {split:?} examples", path.display())));
    }
    Ok(examples)
}

fn gen_data(
    config: Option<&Path>,
    out: &Path,
    train: Option<usize>,
    valid: Option<usize>,
    test: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.data.n_train = train.unwrap_or(cfg.data.n_train);
    cfg.data.n_valid = valid.unwrap_or(cfg.data.n_valid);
    cfg.data.n_test = test.unwrap_or(cfg.data.n_test);
    let mut run = RunDir::create(out, "gen-data")?;
    run.write(CONFIG_FILE, &cfg.to_toml(), "resolved configuration")?;
    let body = (|| {
        let d = DatasetSplits::generate(&cfg.task, cfg.data.n_train, cfg.data.n_valid, cfg.data.n_test)?;
        let files = d.write_dir(out)?;
        for f in &files {
            run.register(std::fs::canonicalize(f).unwrap_or_else(|_| f.clone()), "dataset split");
        }
        let rules = TaskRules::new(&cfg.task)?;
        let mut summary = format!(
            "split,examples\ntrain,{}\nvalid,{}\ntest,{}\n",
            d.train.len(),
            d.valid.len(),
            d.test.len()
        );
        if cfg.task.kind == bridgekit::prior::TaskKind::LocalContext {
            summary.push_str(&format!("position_wise_ceiling,{}\n", rules.position_wise_ceiling()));
        }
        run.write("metrics.csv", &summary, "split sizes")?;
        log::info!(
            "wrote {} / {} / {} examples to {}",
            d.train.len(),
            d.valid.len(),
            d.test.len(),
            out.display()
        );
        Ok(((), json!({"task": cfg.task.kind.tag()})))
    })();
    finish(run, body)
}

fn schedule(runs: &Path, steps: usize, out: Option<&Path>) -> Result<()> {
    let sched = BridgeSchedule::cosine(steps)?;
    let table = sched.to_table();
    let mut run = RunDir::create(runs, "schedule")?;
    let cfg = format!("steps = {steps}\n");
    run.write(CONFIG_FILE, &cfg, "resolved configuration")?;
    let body = (|| {
        run.write("metrics.csv", &table.replace('\t', ","), "schedule as CSV")?;
        if let Some(p) = out {
            std::fs::write(p, &table).map_err(|e| Error::io(p, e))?;
            run.register(p, "schedule table");
        }
        print!("{table}");
        Ok(((), json!({"steps": steps})))
    })();
    finish(run, body)
}

fn load_training_data(dir: &Path) -> Result<DatasetSplits> {
    let data = DatasetSplits::read_dir(dir)?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::invalid(format!(
            "{} needs non-empty train and valid splits",
            dir.display()
        )));
    }
    Ok(data)
}

fn register_training_outputs(run: &mut RunDir) {
    for (f, what) in [
        ("metrics.csv", "per-step training metrics: step,loss,lr"),
        ("valid.csv", "validation loss: step,valid_loss"),
        ("timing.csv", "wall-clock seconds since start: step,wall_seconds"),
        ("best.ckpt", "checkpoint with the lowest validation loss"),
        ("last.ckpt", "final checkpoint"),
    ] {
        run.register(f, what);
    }
}

fn train(config: Option<&Path>, data: Option<&Path>, out: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    let data_dir = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| Error::invalid("train needs --data or paths.data_dir"))?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or_else(|| Error::invalid("train needs --out or paths.out_dir"))?;
    let data = load_training_data(&data_dir)?;
    let mut run = RunDir::create(&out, "train")?;
    run.write(CONFIG_FILE, &cfg.to_toml(), "resolved configuration")?;
    let body = (|| {
        let outcome = fit(&cfg.train, &cfg.loss, &data.train, &data.valid, Some(&run.path), None)?;
        register_training_outputs(&mut run);
        log::info!(
            "finished {} steps; run directory {}",
            outcome.last.state.step,
            run.path.display()
        );
        println!("{}", run.path.display());
        Ok(((), training_details(&cfg, &outcome)))
    })();
    finish(run, body)
}

fn training_details(cfg: &RunConfig, outcome: &bridgekit::trainer::FitOutcome) -> serde_json::Value {
    json!({
        "fingerprint": config_fingerprint(&cfg.train, &cfg.loss),
        "steps": outcome.last.state.step,
        "best_valid_loss": outcome.best.state.best_valid,
        "final_valid_loss": outcome.valid.last().map(|v| v.1),
    })
}

fn resume_train(dir: &Path, config: Option<&Path>, data: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
    let config = config.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CONFIG_FILE));
    let mut cfg = RunConfig::load(Some(&config))?;
    cfg.train.max_steps = max_steps;
    let data_dir = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| Error::invalid("train needs --data or paths.data_dir"))?;
    let data = load_training_data(&data_dir)?;
    let ck = Checkpoint::load(&dir.join("last.ckpt"), Some(&config_fingerprint(&cfg.train, &cfg.loss)))?;
    let mut run = RunDir::reopen(dir, "train-resume")?;
    run.write(CONFIG_FILE, &cfg.to_toml(), "resolved configuration")?;
    let body = (|| {
        log::info!("resuming from step {}", ck.state.step);
        let outcome = fit(&cfg.train, &cfg.loss, &data.train, &data.valid, Some(dir), Some(ck))?;
        register_training_outputs(&mut run);
        println!("{}", dir.display());
        Ok(((), training_details(&cfg, &outcome)))
    })();
    finish(run, body)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    runs: &Path,
    ckpt: &Path,
    data: &Path,
    n: usize,
    mode: &str,
    out: &Path,
    split: &str,
    seed: u64,
) -> Result<()> {
    let mode: SampleMode = mode.parse()?;
    if n == 0 {
        return Err(Error::invalid("--n must be at least 1"));
    }
    let ck = Checkpoint::load(ckpt, None)?;
    let examples = split_examples(data, split)?;
    let mut run = RunDir::create(runs, "sample")?;
    let resolved = format!(
        "checkpoint = {:?}\ndata = {:?}\nsplit = {split:?}\nn = {n}\nmode = {:?}\nseed = {seed}\nfingerprint = {:?}\n",
        ckpt.display().to_string(),
        data.display().to_string(),
        serde_json::to_value(mode).unwrap().as_str().unwrap_or(""),
        ck.fingerprint
    );
    run.write(CONFIG_FILE, &resolved, "resolved configuration")?;
    let body = (|| {
        let file = File::create(out).map_err(|e| Error::io(out, e))?;
        let mut w = BufWriter::new(file);
        let mut metrics = String::from("id,repeat,mean_log_prob\n");
        for r in 0..n {
            let samples = sample_examples(&ck, &examples, mode, seed, r as u64, ck.train.batch_size_tokens)?;
            for (ex, s) in examples.iter().zip(&samples) {
                let rec = json!({
                    "id": ex.id,
                    "repeat": r,
                    "tokens": s.tokens.tokens(),
                    "log_probs": s.log_probs,
                    "mean_log_prob": s.mean_log_prob(),
                });
                writeln!(w, "{rec}").map_err(|e| Error::io(out, e))?;
                metrics.push_str(&format!("{},{r},{}\n", ex.id, s.mean_log_prob()));
            }
        }
        w.flush().map_err(|e| Error::io(out, e))?;
        run.register(absolute(out), "samples (JSON Lines)");
        run.write("metrics.csv", &metrics, "per-sample mean log-probability")?;
        log::info!("wrote {} samples to {}", n * examples.len(), out.display());
        Ok(((), json!({"samples": n * examples.len()})))
    })();
    finish(run, body)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn eval(runs: &Path, ckpt: &Path, data: &Path, out: &Path, split: &str, config: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(ckpt, None)?;
    let examples = split_examples(data, split)?;
    cfg.train = ck.train.clone();
    cfg.loss = ck.loss;
    let mut run = RunDir::create(runs, "eval")?;
    run.write(CONFIG_FILE, &cfg.to_toml(), "resolved configuration")?;
    let body = (|| {
        let report = evaluate(&ck, &examples, &cfg.eval)?;
        std::fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
        let csv = out.with_extension("csv");
        std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let table = out.with_extension("txt");
        std::fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
        run.register(absolute(out), "metrics report (JSON)");
        run.register(absolute(&csv), "metrics rows: system,bucket,metric,value");
        run.register(absolute(&table), "metrics table");
        run.write(
            "metrics.csv",
            &report.to_csv(),
            "metrics rows: system,bucket,metric,value",
        )?;
        print!("{}", report.to_table());
        Ok(((), json!({"examples": examples.len()})))
    })();
    finish(run, body)
}

fn verify(runs: &Path, suite: &str, seed: u64) -> Result<()> {
    let s: Suite = suite.parse()?;
    let mut run = RunDir::create(runs, "verify")?;
    run.write(
        CONFIG_FILE,
        &format!("suite = {suite:?}\nseed = {seed}\n"),
        "resolved configuration",
    )?;
    let body = (|| {
        let results = run_suite(s, seed)?;
        let table = format_table(&results);
        print!("{table}");
        let mut csv = String::from("suite,check,passed,value,tolerance\n");
        for r in &results {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.suite, r.name, r.passed, r.value, r.tolerance
            ));
        }
        run.write("metrics.csv", &csv, "check results")?;
        let failed = results.iter().filter(|r| !r.passed).count();
        if failed > 0 {
            return Err(Error::invalid(format!("{failed} of {} checks failed", results.len())));
        }
        log::info!("all {} checks passed", results.len());
        Ok(((), json!({"checks": results.len()})))
    })();
    finish(run, body)
}

fn ablate(preset: &str, config: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let preset: Preset = preset.parse()?;
    let cfg = RunConfig::load(config)?;
    let data = match data.map(Path::to_path_buf).or_else(|| cfg.paths.data_dir.clone()) {
        Some(dir) => {
            let d = load_training_data(&dir)?;
            if d.test.is_empty() {
                return Err(Error::invalid(format!("{} has no test split", dir.display())));
            }
            d
        }
        None => DatasetSplits::generate(&cfg.task, cfg.data.n_train, cfg.data.n_valid, cfg.data.n_test)?,
    };
    let mut run = RunDir::create(out, &format!("ablate-{}", preset.name()))?;
    run.write(CONFIG_FILE, &cfg.to_toml(), "resolved configuration")?;
    let body = (|| {
        let report = run_ablation(preset, &cfg.train, &cfg.loss, &cfg.eval, &data, Some(&run.path))?;
        for (label, _, _) in preset.variants(&cfg.train, &cfg.loss) {
            let dir = label.replace('=', "");
            for f in ["metrics.csv", "valid.csv", "timing.csv", "best.ckpt", "last.ckpt"] {
                run.register(format!("{dir}/{f}"), &format!("{label} training output"));
            }
        }
        let table = report.to_table();
        run.write("comparison.txt", &table, "comparison table")?;
        run.write(
            "comparison.json",
            &serde_json::to_string_pretty(&report).expect("report serializes"),
            "comparison report",
        )?;
        let mut csv = String::from("variant,metric,value\n");
        for r in &report.rows {
            csv.push_str(&format!("{},median_recovery_pct,{}\n", r.label, r.median_recovery_pct));
            csv.push_str(&format!("{},perplexity,{}\n", r.label, r.perplexity));
            csv.push_str(&format!("{},prior_recovery_pct,{}\n", r.label, r.prior_recovery_pct));
        }
        run.write("metrics.csv", &csv, "comparison rows: variant,metric,value")?;
        print!("{table}");
        Ok(((), json!({"preset": preset.name()})))
    })();
    finish(run, body)
}
