use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use lto_core::data::{gen_synthetic, save_csv, SynthSpec};
use lto_core::error::Error;
use lto_core::eval::{drop_ratio_at_beta, MetricSeries, SweepAxis};
use lto_core::learners::LearnerKind;
use lto_core::pipeline::{
    attribute_confusion_sweep, benchmark_synth, evaluate_checkpoints, obstruct, prepare, run_attribute_experiment,
    run_sweep, split_data, synth_for_seed, AttributeExperimentConfig, ExperimentConfig, Prepared,
};
use serde::Serialize;

use crate::artifacts::{
    load_checkpoints, read_manifest, save_checkpoints, write, write_json, Manifest, ObjectiveEntry, Summary, MANIFEST,
    METRICS, SUMMARY, TIMING,
};
use crate::config::{apply_all, ConfigArgs, EVAL_KEYS};

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = benchmark_synth().n_super)]
    pub supers: usize,
    #[arg(long, default_value_t = benchmark_synth().classes_per_super)]
    pub classes: usize,
    #[arg(long, default_value_t = benchmark_synth().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = benchmark_synth().samples_per_class)]
    pub per_class: usize,
    #[arg(long, default_value_t = benchmark_synth().super_sep)]
    pub super_sep: f64,
    #[arg(long, default_value_t = benchmark_synth().class_sep)]
    pub class_sep: f64,
    #[arg(long, default_value_t = benchmark_synth().noise_sigma)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; `<out-dir>/data.csv` when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen(args: &GenArgs, out_dir: &Path) -> Result<()> {
    let spec = SynthSpec {
        n_super: args.supers,
        classes_per_super: args.classes,
        dim: args.dim,
        samples_per_class: args.per_class,
        super_sep: args.super_sep,
        class_sep: args.class_sep,
        noise_sigma: args.noise,
        seed: 0,
    };
    let ds = gen_synthetic(&synth_for_seed(&spec, args.seed))?;
    let path = args.out.clone().unwrap_or_else(|| out_dir.join("data.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let digest = save_csv(&ds, &path)?;
    println!("wrote {} ({} rows, sha256 {digest})", path.display(), ds.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ObstructArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Replays the configuration recorded in a manifest; other config flags are rejected.
    #[arg(long, conflicts_with_all = ["config", "set", "seed", "data", "method", "steps"])]
    pub manifest: Option<PathBuf>,
}

pub fn obstruct_cmd(args: &ObstructArgs, out_dir: &Path) -> Result<()> {
    let cfg = match &args.manifest {
        Some(p) => {
            let m = read_manifest(p)?;
            m.config.validate()?;
            m.config
        }
        None => args.cfg.resolve()?,
    };
    let prep = prepare(&cfg)?;
    let run = obstruct(&cfg, &prep)?;
    let checkpoints = save_checkpoints(out_dir, &run.checkpoints)?;
    let manifest = Manifest {
        tool: "lto".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "obstruct".into(),
        config: cfg.clone(),
        pretrain_accuracy: prep.pretrain_accuracy,
        checkpoints,
        objectives: run
            .log
            .iter()
            .map(|r| ObjectiveEntry {
                step: r.step,
                objective: r.objective,
            })
            .collect(),
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    let seconds: Vec<f64> = run.log.iter().map(|r| r.seconds).collect();
    write_json(&out_dir.join(TIMING), &seconds)?;
    println!(
        "{} seed {}: {} steps, {} checkpoints, pre-training accuracy {:.3}; wrote {}",
        cfg.run.method,
        cfg.seed,
        cfg.run.steps,
        manifest.checkpoints.len(),
        prep.pretrain_accuracy,
        out_dir.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `obstruct`.
    #[arg(long)]
    pub run: PathBuf,
    /// Evaluation-only overrides (`key = value` file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Learner used at evaluation time; the obstruction learner when absent.
    #[arg(long)]
    pub learner: Option<String>,
}

/// `Δ@β` summary; an undefined ratio is reported rather than raised.
pub fn summarize(series: &MetricSeries, beta: f64) -> Result<Summary> {
    Ok(match drop_ratio_at_beta(series, beta) {
        Ok(d) => Summary {
            beta,
            drop_ratio: Some(d.drop_ratio),
            selected_step: Some(d.selected_step),
            delta_r: Some(d.delta_r),
            delta_rp: Some(d.delta_rp),
            undefined: None,
        },
        Err(e @ (Error::UndefinedRatio { .. } | Error::Metric(_))) => Summary {
            beta,
            drop_ratio: None,
            selected_step: None,
            delta_r: None,
            delta_rp: None,
            undefined: Some(e.to_string()),
        },
        Err(e) => return Err(e.into()),
    })
}

pub fn eval_cmd(args: &EvalArgs, out_dir: Option<&Path>) -> Result<()> {
    let manifest = read_manifest(&args.run.join(MANIFEST))?;
    let overrides = ConfigArgs {
        config: args.config.clone(),
        set: args.set.clone(),
        beta: args.beta,
        episodes: args.episodes,
        ..ConfigArgs::default()
    }
    .entries()?;
    if let Some((k, _)) = overrides.iter().find(|(k, _)| !EVAL_KEYS.contains(&k.as_str())) {
        bail!("`{k}` cannot change at evaluation time; re-run obstruct instead");
    }
    let mut cfg = manifest.config.clone();
    apply_all(&mut cfg, &overrides)?;
    let mut eval_alg = cfg.algorithm.clone();
    if let Some(l) = &args.learner {
        eval_alg.kind = l.parse::<LearnerKind>()?;
    }
    cfg.validate()?;
    let checkpoints = load_checkpoints(&args.run, &manifest)?;
    let (ds, restricted, bundle) = split_data(&cfg)?;
    let prep = Prepared {
        ds,
        restricted,
        bundle,
        theta_p: checkpoints[0].theta.clone(),
        pretrain_accuracy: manifest.pretrain_accuracy,
    };
    let (series, _) = evaluate_checkpoints(&cfg, &prep, &checkpoints, &eval_alg, &cfg.eval)?;
    let summary = summarize(&series, cfg.beta)?;
    let dir = out_dir.unwrap_or(&args.run);
    write(&dir.join(METRICS), series.to_csv().as_bytes())?;
    write_json(&dir.join(SUMMARY), &summary)?;
    match (summary.drop_ratio, summary.selected_step) {
        (Some(r), Some(s)) => println!("Δ@{} = {r:.4} at step {s}", cfg.beta),
        _ => println!("Δ@{} undefined: {}", cfg.beta, summary.undefined.as_deref().unwrap_or("")),
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisName {
    Data,
    Time,
    Cross,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum)]
    pub axis: AxisName,
    /// Comma-separated multipliers, or learners for the cross axis.
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    axis: &'a SweepAxis,
    seeds: &'a [u64],
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow::anyhow!("invalid {what} `{x}`: {e}")))
        .collect()
}

pub fn sweep_cmd(args: &SweepArgs, out_dir: &Path) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let seeds: Vec<u64> = parse_list("seed", &args.seeds)?;
    let axis = match args.axis {
        AxisName::Data => SweepAxis::Data(parse_list("multiplier", args.grid.as_deref().unwrap_or("1,2,4"))?),
        AxisName::Time => SweepAxis::Time(parse_list("multiplier", args.grid.as_deref().unwrap_or("1,2,4"))?),
        AxisName::Cross => SweepAxis::Cross(parse_list("learner", args.grid.as_deref().unwrap_or("protonet,linear-ce,ridge"))?),
    };
    let table = run_sweep(&cfg, &axis, &seeds)?;
    let name = axis.name();
    write(&out_dir.join(format!("sweep_{name}.csv")), table.to_csv().as_bytes())?;
    write_json(
        &out_dir.join(format!("sweep_{name}_manifest.json")),
        &SweepManifest {
            tool: "lto",
            version: env!("CARGO_PKG_VERSION"),
            command: "sweep",
            config: &cfg,
            axis: &axis,
            seeds: &seeds,
        },
    )?;
    print!("{}", table.to_csv());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AttributesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated restricted attributes.
    #[arg(long, default_value = "0")]
    pub restricted: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Also obstruct each attribute alone and write the confusion matrix.
    #[arg(long)]
    pub confusion: bool,
}

#[derive(Serialize)]
struct AttributeSummary<'a> {
    restricted: Vec<usize>,
    summary: Summary,
    selected_drops: &'a [f64],
}

pub fn attributes_cmd(args: &AttributesArgs, out_dir: &Path) -> Result<()> {
    let mut cfg = AttributeExperimentConfig {
        seed: args.seed,
        ..AttributeExperimentConfig::default()
    };
    if let Some(s) = args.steps {
        cfg.run.steps = s;
    }
    if let Some(lr) = args.outer_lr {
        cfg.run.outer_lr = lr;
    }
    if let Some(b) = args.beta {
        cfg.beta = b;
    }
    let restricted: BTreeSet<usize> = parse_list::<usize>("attribute", &args.restricted)?.into_iter().collect();
    let result = run_attribute_experiment(&cfg, &restricted)?;
    let mut csv = String::from("step");
    for a in 0..cfg.synth.n_attrs {
        csv.push_str(&format!(",auroc_{a}"));
    }
    csv.push('\n');
    for (c, row) in result.run.checkpoints.iter().zip(&result.aurocs) {
        csv.push_str(&c.step.to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write(&out_dir.join("attributes.csv"), csv.as_bytes())?;
    write(&out_dir.join(METRICS), result.series.to_csv().as_bytes())?;
    let summary = summarize(&result.series, cfg.beta)?;
    write_json(
        &out_dir.join("attribute_summary.json"),
        &AttributeSummary {
            restricted: restricted.iter().copied().collect(),
            summary,
            selected_drops: &result.selected_drops,
        },
    )?;
    let drops: Vec<String> = result.selected_drops.iter().map(|d| format!("{d:.2}")).collect();
    println!("AUROC drop per attribute at the selected checkpoint: {}", drops.join(" "));
    if args.confusion {
        let m = attribute_confusion_sweep(&cfg)?;
        let mut csv = String::new();
        for row in &m.rows {
            match row {
                Some(r) => csv.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
                None => csv.push_str(&vec!["NA"; cfg.synth.n_attrs].join(",")),
            }
            csv.push('\n');
        }
        write(&out_dir.join("confusion.csv"), csv.as_bytes())?;
        print!("{csv}");
    }
    Ok(())
}
