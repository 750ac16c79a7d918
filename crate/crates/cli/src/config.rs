//! Flat `key = value` configuration with flags > file > defaults precedence.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use lto_core::data::SplitMode;
use lto_core::pipeline::{benchmark_synth, DataSource, ExperimentConfig};

/// Keys an evaluation may change without invalidating the checkpoints.
pub const EVAL_KEYS: &[&str] = &[
    "beta",
    "eval_episodes",
    "eval_n_way",
    "eval_k_shot",
    "eval_q_query",
    "eval_train_steps",
    "eval_train_lr",
    "eval_train_batch",
    "eval_train_tasks",
    "f_per_class",
    "m_data",
    "m_time",
    "learner",
    "inner_steps",
    "inner_lr",
    "ridge_lambda",
];

/// Every key `apply` understands, in the order they are documented.
pub const KEYS: &[&str] = &[
    "seed",
    "data",
    "supers",
    "classes",
    "dim",
    "per_class",
    "super_sep",
    "class_sep",
    "noise",
    "restricted_superclass",
    "split",
    "f_class_frac",
    "a_frac",
    "restricted_a_frac",
    "a_shots",
    "f_shots",
    "max_multiplier",
    "hidden",
    "init_scale",
    "pretrain_epochs",
    "pretrain_lr",
    "method",
    "steps",
    "outer_lr",
    "batch_size",
    "grad_mode",
    "checkpoint_every",
    "persist_phi",
    "learner",
    "inner_steps",
    "inner_lr",
    "ridge_lambda",
    "n_way",
    "k_shot",
    "q_query",
    "eval_episodes",
    "eval_n_way",
    "eval_k_shot",
    "eval_q_query",
    "eval_train_steps",
    "eval_train_lr",
    "eval_train_batch",
    "eval_train_tasks",
    "f_per_class",
    "m_data",
    "m_time",
    "beta",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`, got `{line}`", i + 1))?;
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            bail!("config line {}: unknown key `{key}`", i + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_kv(&text).with_context(|| format!("in {}", path.display()))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| anyhow!("invalid value `{v}` for `{key}`: {e}"))
}

fn synth<'a>(cfg: &'a mut ExperimentConfig, key: &str) -> Result<&'a mut lto_core::data::SynthSpec> {
    match &mut cfg.data {
        DataSource::Synthetic(s) => Ok(s),
        DataSource::Csv { .. } => bail!("`{key}` only applies to synthetic data"),
    }
}

fn clip_defaults() -> SplitMode {
    SplitMode::ClipStyle {
        a_shots: 5,
        f_shots: 5,
        max_multiplier: 4,
    }
}

/// Sets one key on `cfg`.
pub fn apply(cfg: &mut ExperimentConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = num(key, v)?,
        "data" => {
            cfg.data = if v == "synthetic" {
                DataSource::Synthetic(benchmark_synth())
            } else {
                DataSource::Csv { path: PathBuf::from(v) }
            }
        }
        "supers" => synth(cfg, key)?.n_super = num(key, v)?,
        "classes" => synth(cfg, key)?.classes_per_super = num(key, v)?,
        "dim" => synth(cfg, key)?.dim = num(key, v)?,
        "per_class" => synth(cfg, key)?.samples_per_class = num(key, v)?,
        "super_sep" => synth(cfg, key)?.super_sep = num(key, v)?,
        "class_sep" => synth(cfg, key)?.class_sep = num(key, v)?,
        "noise" => synth(cfg, key)?.noise_sigma = num(key, v)?,
        "restricted_superclass" => cfg.restricted_superclass = num(key, v)?,
        "split" => {
            cfg.split = match v {
                "classical" => SplitMode::classical(),
                "clip-style" => clip_defaults(),
                _ => bail!("invalid value `{v}` for `split`: expected classical or clip-style"),
            }
        }
        "f_class_frac" | "a_frac" | "restricted_a_frac" => match &mut cfg.split {
            SplitMode::Classical {
                f_class_frac,
                a_frac,
                restricted_a_frac,
            } => {
                let slot = match key {
                    "f_class_frac" => f_class_frac,
                    "a_frac" => a_frac,
                    _ => restricted_a_frac,
                };
                *slot = num(key, v)?;
            }
            SplitMode::ClipStyle { .. } => bail!("`{key}` only applies to split = classical"),
        },
        "a_shots" | "f_shots" | "max_multiplier" => match &mut cfg.split {
            SplitMode::ClipStyle {
                a_shots,
                f_shots,
                max_multiplier,
            } => {
                let slot = match key {
                    "a_shots" => a_shots,
                    "f_shots" => f_shots,
                    _ => max_multiplier,
                };
                *slot = num(key, v)?;
            }
            SplitMode::Classical { .. } => bail!("`{key}` only applies to split = clip-style"),
        },
        "hidden" => {
            cfg.hidden = v
                .split(',')
                .map(|w| num(key, w.trim()))
                .collect::<Result<_>>()?
        }
        "init_scale" => cfg.init_scale = num(key, v)?,
        "pretrain_epochs" => cfg.pretrain_epochs = num(key, v)?,
        "pretrain_lr" => cfg.pretrain_lr = num(key, v)?,
        "method" => cfg.run.method = num(key, v)?,
        "steps" => cfg.run.steps = num(key, v)?,
        "outer_lr" => cfg.run.outer_lr = num(key, v)?,
        "batch_size" => cfg.run.batch_size = num(key, v)?,
        "grad_mode" => cfg.run.grad_mode = num(key, v)?,
        "checkpoint_every" => cfg.run.checkpoint_every = num(key, v)?,
        "persist_phi" => cfg.run.persist_phi = num(key, v)?,
        "learner" => cfg.algorithm.kind = num(key, v)?,
        "inner_steps" => cfg.algorithm.inner_steps = num(key, v)?,
        "inner_lr" => cfg.algorithm.inner_lr = num(key, v)?,
        "ridge_lambda" => cfg.algorithm.ridge_lambda = num(key, v)?,
        "n_way" => cfg.episode.n_way = num(key, v)?,
        "k_shot" => cfg.episode.k_shot = num(key, v)?,
        "q_query" => cfg.episode.q_query = num(key, v)?,
        "eval_episodes" => cfg.eval.episodes = num(key, v)?,
        "eval_n_way" => cfg.eval.spec.n_way = num(key, v)?,
        "eval_k_shot" => cfg.eval.spec.k_shot = num(key, v)?,
        "eval_q_query" => cfg.eval.spec.q_query = num(key, v)?,
        "eval_train_steps" => cfg.eval.train_steps = num(key, v)?,
        "eval_train_lr" => cfg.eval.train_lr = num(key, v)?,
        "eval_train_batch" => cfg.eval.train_batch = num(key, v)?,
        "eval_train_tasks" => cfg.eval.train_tasks = num(key, v)?,
        "f_per_class" => cfg.eval.f_per_class = if v == "all" { None } else { Some(num(key, v)?) },
        "m_data" => cfg.eval.m_data = num(key, v)?,
        "m_time" => cfg.eval.m_time = num(key, v)?,
        "beta" => cfg.beta = num(key, v)?,
        _ => bail!("unknown key `{key}`"),
    }
    Ok(())
}

/// Applies entries in order, except that `data` and `split` go first so the
/// keys that depend on them find the right variant.
pub fn apply_all(cfg: &mut ExperimentConfig, entries: &[(String, String)]) -> Result<()> {
    let first = |k: &str| k == "data" || k == "split";
    for (k, v) in entries.iter().filter(|(k, _)| first(k)) {
        apply(cfg, k, v)?;
    }
    for (k, v) in entries.iter().filter(|(k, _)| !first(k)) {
        apply(cfg, k, v)?;
    }
    Ok(())
}

/// Experiment flags shared by `obstruct` and `sweep`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset CSV; synthetic benchmark data when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub restricted_superclass: Option<usize>,
    /// lto, only-r or no-f.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub outer_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// first-order or exact-unrolled.
    #[arg(long)]
    pub grad_mode: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// protonet, linear-ce or ridge.
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
}

impl ConfigArgs {
    fn set_pairs(&self) -> Result<Vec<(String, String)>> {
        self.set
            .iter()
            .map(|s| {
                let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
                let k = k.trim();
                if !KEYS.contains(&k) {
                    bail!("--set: unknown key `{k}`");
                }
                Ok((k.to_string(), v.trim().to_string()))
            })
            .collect()
    }

    fn flag_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("restricted_superclass", self.restricted_superclass.map(|v| v.to_string()));
        push("method", self.method.clone());
        push("steps", self.steps.map(|v| v.to_string()));
        push("outer_lr", self.outer_lr.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("grad_mode", self.grad_mode.clone());
        push("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        push("learner", self.learner.clone());
        push("inner_steps", self.inner_steps.map(|v| v.to_string()));
        push("inner_lr", self.inner_lr.map(|v| v.to_string()));
        push("eval_episodes", self.episodes.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        out
    }

    /// Defaults, then the file, then `--set`, then named flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut entries = match &self.config {
            Some(p) => read_kv(p)?,
            None => Vec::new(),
        };
        entries.extend(self.set_pairs()?);
        entries.extend(self.flag_pairs());
        let mut cfg = ExperimentConfig::default();
        apply_all(&mut cfg, &entries)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys this invocation sets, for commands that only accept some.
    pub fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut entries = match &self.config {
            Some(p) => read_kv(p)?,
            None => Vec::new(),
        };
        entries.extend(self.set_pairs()?);
        entries.extend(self.flag_pairs());
        Ok(entries)
    }
}
