use std::fs;
use std::path::Path;

use clap::ArgMatches;

use mrn::data::{generate, Dataset, GenConfig, Split};
use mrn::evaluation::{evaluate, report_csv, AnswerType, EvalReport, Predictor};
use mrn::experiment::{ablation_csv, default_sweep, fit, run_ablation, AblationRow, RunSettings};
use mrn::gradcheck::{run_all, GradcheckConfig};
use mrn::model::Variant;
use mrn::net::NetConfig;
use mrn::training::write_metrics_csv;
use mrn::visualization::visualize_sequence;
use mrn::{checkpoint, Tensor};

use crate::args::{AblateCmd, Common, EvalCmd, GenArgs, GradcheckArgs, TrainCmd, VizCmd};
use crate::config::{resolve, resolve_eval, ConfigFile, RunConfig};
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn config_file(common: &Common) -> Result<ConfigFile, CliError> {
    match &common.config {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile {
            version: crate::config::CONFIG_VERSION,
            ..ConfigFile::default()
        }),
    }
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found; run `mrn gen` first"),
        ));
    }
    Ok(Dataset::load(path)?)
}

fn settings(cfg: &RunConfig) -> RunSettings {
    RunSettings {
        train: cfg.train,
        pretrain: cfg.pretrain,
    }
}

fn summary(r: &EvalReport) -> String {
    format!(
        "{} all {:.4}  yes/no {:.4}  number {:.4}  other {:.4}",
        r.protocol,
        r.overall(),
        r.by_type(AnswerType::YesNo),
        r.by_type(AnswerType::Number),
        r.by_type(AnswerType::Other)
    )
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let cfg = GenConfig {
        seed: a.seed,
        examples: a.examples,
        ..GenConfig::default()
    };
    let data = generate(&cfg)?;
    create_dir(&a.out)?;
    let bin = a.out.join("dataset.bin");
    data.save(&bin)?;
    data.write_jsonl(&a.out.join("dataset.jsonl"))?;
    let count = |s| data.indices(s).len();
    println!(
        "wrote {} ({} train / {} val / {} test examples)",
        bin.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn train(a: &TrainCmd, m: &ArgMatches) -> Result<(), CliError> {
    let file = config_file(&a.common)?;
    let cfg = resolve(m, Some(&a.model), a.model.dim, &a.train, Some(&a.eval), &file)?;
    let data = load_data(&a.data)?;
    let net_cfg = NetConfig::toy(
        &data,
        cfg.variant.expect("train has a model"),
        cfg.blocks.expect("train has a model"),
        cfg.dim,
    );
    net_cfg.validate()?;
    let (net, report) = fit(&data, net_cfg, &settings(&cfg))?;
    let out = &a.common.out;
    create_dir(out)?;
    checkpoint::save(&net, &out.join("checkpoint.json"))?;
    write_metrics_csv(&report.curve, &out.join("metrics.csv"))?;
    write(&out.join("run.toml"), &cfg.to_toml())?;
    if let Some(last) = report.curve.last() {
        println!(
            "iteration {}: train loss {:.4}, val accuracy {:.4}",
            last.iteration, last.train_loss, last.val_overall
        );
    }
    let eval = cfg.eval.expect("train has eval settings");
    let r = evaluate(&net, &data, &data.indices(eval.split), eval.protocol, eval.postprocess)?;
    println!("{}", summary(&r));
    println!("wrote {}", out.join("checkpoint.json").display());
    Ok(())
}

pub fn eval(a: &EvalCmd, m: &ArgMatches) -> Result<(), CliError> {
    let file = config_file(&a.common)?;
    let e = resolve_eval(m, &a.eval, &file)?;
    let data = load_data(&a.data)?;
    let net = checkpoint::load(&a.checkpoint)?;
    net.config.check_dataset(&data)?;
    let idx = data.indices(e.split);
    if idx.is_empty() {
        return Err(CliError::Validation(format!("split {:?} is empty", e.split)));
    }
    let r = evaluate(&net, &data, &idx, e.protocol, e.postprocess)?;
    create_dir(&a.common.out)?;
    let path = a.common.out.join("report.csv");
    write(&path, &report_csv(std::slice::from_ref(&r)))?;
    println!("{}", summary(&r));
    println!("wrote {}", path.display());
    Ok(())
}

fn best<'a>(rows: impl Iterator<Item = &'a AblationRow>) -> Option<&'a AblationRow> {
    rows.fold(None, |b: Option<&AblationRow>, r| match b {
        Some(b) if b.open_ended.overall() >= r.open_ended.overall() => Some(b),
        _ => Some(r),
    })
}

pub fn ablate(a: &AblateCmd, m: &ArgMatches) -> Result<(), CliError> {
    let file = config_file(&a.common)?;
    let cfg = resolve(m, None, a.dim, &a.train, None, &file)?;
    let data = load_data(&a.data)?;
    let mut sweep = default_sweep(&data, cfg.dim)?;
    if !a.only.is_empty() {
        for l in &a.only {
            if !sweep.iter().any(|e| &e.label == l) {
                let labels: Vec<&str> = sweep.iter().map(|e| e.label.as_str()).collect();
                return Err(CliError::Validation(format!(
                    "unknown sweep entry {l:?}; one of {}",
                    labels.join(", ")
                )));
            }
        }
        sweep.retain(|e| a.only.contains(&e.label));
    }
    let outcome = run_ablation(&data, &settings(&cfg), &sweep, |r, _| {
        eprintln!(
            "{:<6} params {:>7}  oe {:.4}  mc {:.4}",
            r.entry.label,
            r.params,
            r.open_ended.overall(),
            r.multiple_choice.overall()
        )
    })?;
    let out = &a.common.out;
    create_dir(out)?;
    let path = out.join("ablation.csv");
    write(&path, &ablation_csv(&outcome.rows))?;
    write(&out.join("run.toml"), &cfg.to_toml())?;
    println!("best overall: {}", outcome.best);
    let at_l3 = outcome
        .rows
        .iter()
        .filter(|r| r.entry.blocks == 3 && Variant::FIGURE.contains(&r.entry.variant));
    if let Some(r) = best(at_l3) {
        println!("best variant at L=3: {}", r.entry.variant);
    }
    if let Some(r) = best(outcome.rows.iter().filter(|r| r.entry.variant == Variant::B)) {
        println!("best depth for variant b: L={}", r.entry.blocks);
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn viz(a: &VizCmd) -> Result<(), CliError> {
    let data = load_data(&a.data)?;
    let net = checkpoint::load(&a.checkpoint)?;
    net.config.check_dataset(&data)?;
    let i = match a.example {
        Some(i) if i < data.len() => i,
        Some(i) => {
            return Err(CliError::Validation(format!(
                "example {i} out of range (dataset has {})",
                data.len()
            )))
        }
        None => *data
            .indices(Split::Test)
            .first()
            .ok_or_else(|| CliError::Validation("dataset has no test examples".into()))?,
    };
    if a.scale == 0 {
        return Err(CliError::Validation("--scale must be at least 1".into()));
    }
    let e = &data.examples[i];
    let scores = net.scores(&data, &[i])?;
    let pred = argmax(&scores[0]);
    let image: Tensor = data.image(i);
    let v = visualize_sequence(
        &net,
        &image,
        &e.question_ids,
        &e.question.text(),
        &data.answers[pred],
        &a.out,
        &format!("example{i}"),
        a.scale,
    )?;
    println!("question: {}", v.manifest.question);
    println!("predicted: {}  (ground truth: {})", v.manifest.answer, e.answer);
    for b in &v.manifest.blocks {
        println!(
            "block {}: {} pixels above {:.3e} -> {}",
            b.block,
            b.selected_pixels,
            b.threshold,
            b.overlay.display()
        );
    }
    println!("wrote {}", a.out.join(format!("example{i}_manifest.json")).display());
    Ok(())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if !(a.tolerance > 0.0) || a.max_entries == 0 {
        return Err(CliError::Validation(
            "--tolerance must be positive and --max-entries at least 1".into(),
        ));
    }
    let cfg = GradcheckConfig {
        tolerance: a.tolerance,
        max_entries: a.max_entries,
        seed: a.seed,
        fault: a.inject_fault,
        ..GradcheckConfig::default()
    };
    let report = run_all(&cfg)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("gradcheck.txt"), &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{} gradient checks failed (worst relative error {:.3e})",
            report.failures().count(),
            report.worst()
        )))
    }
}
