//! End-to-end experiments: data, pre-training, obstruction, evaluation and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv, make_splits, Constraint, Dataset, EpisodeSpec, Pool, RestrictedSet, SplitBundle, SplitMode, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{
    attribute_confusion, drop_ratio_at_beta, evaluate_attributes, evaluate_fsc, CellKey, ConfusionMatrix, DropRatio,
    EvalConfig, FscAccuracy, MetricSeries, SweepAxis, SweepCell, SweepTable,
};
use crate::learners::{FscAlgorithm, LearnerKind};
use crate::lto::{
    gen_attributes, init_attribute_heads, pretrain_attribute_backbone, run_attribute_lto, run_obstruction, AttrDataset,
    AttrSynthSpec, AttributeConfig, AttributeTaskSource, Checkpoint, EpisodeStream, LoopConfig,
    ObstructionConfig, RunOutput,
};
use crate::models::{pretrain_backbone, BackboneSpec, ParamSet};
use crate::rng::{self, derive_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// Generated from the experiment seed; its own `seed` field is ignored.
    Synthetic(SynthSpec),
    Csv { path: PathBuf },
}

/// Synthetic spec used for a given experiment seed.
pub fn synth_for_seed(spec: &SynthSpec, seed: u64) -> SynthSpec {
    SynthSpec {
        seed: derive_seed(seed, "data", 0),
        ..spec.clone()
    }
}

pub fn benchmark_synth() -> SynthSpec {
    SynthSpec {
        n_super: 10,
        classes_per_super: 4,
        dim: 16,
        samples_per_class: 80,
        super_sep: 4.0,
        class_sep: 2.5,
        noise_sigma: 0.6,
        seed: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub restricted_superclass: usize,
    pub split: SplitMode,
    /// Backbone layer widths after the input; the last is the embedding size.
    pub hidden: Vec<usize>,
    pub init_scale: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub run: LoopConfig,
    pub algorithm: FscAlgorithm,
    /// Episode shape of the obstruction tasks.
    pub episode: EpisodeSpec,
    pub eval: EvalConfig,
    pub beta: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSource::Synthetic(benchmark_synth()),
            restricted_superclass: 0,
            split: SplitMode::classical(),
            hidden: vec![32, 16],
            init_scale: 1.0,
            pretrain_epochs: 100,
            pretrain_lr: 0.05,
            run: LoopConfig::default(),
            algorithm: FscAlgorithm::new(LearnerKind::Protonet, 20, 0.002),
            episode: EpisodeSpec::default(),
            eval: EvalConfig::default(),
            beta: 2.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one non-zero width"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(self.pretrain_lr.is_finite() && self.pretrain_lr >= 0.0) {
            return Err(Error::config("pretrain_lr", "must be finite and non-negative"));
        }
        self.run.validate()?;
        self.algorithm.validate()?;
        self.eval.validate()
    }

    pub fn obstruction(&self, restricted: &RestrictedSet) -> ObstructionConfig {
        ObstructionConfig {
            run: self.run.clone(),
            algorithm: self.algorithm.clone(),
            restricted: restricted.restricted.clone(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig { seed, ..self.clone() }
    }
}

/// Data, split and pre-trained backbone shared by every run of one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ds: Dataset,
    pub restricted: RestrictedSet,
    pub bundle: SplitBundle,
    pub theta_p: ParamSet,
    pub pretrain_accuracy: f64,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => gen_synthetic(&synth_for_seed(spec, cfg.seed)),
        DataSource::Csv { path } => load_csv(path),
    }
}

/// Loads the data and splits it, without any training.
pub fn split_data(cfg: &ExperimentConfig) -> Result<(Dataset, RestrictedSet, SplitBundle)> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    let restricted = RestrictedSet::from_superclass(&ds, cfg.restricted_superclass)?;
    let bundle = make_splits(&ds, &restricted, &cfg.split, derive_seed(cfg.seed, "split", 0))?;
    Ok((ds, restricted, bundle))
}

/// Loads the data, splits it and pre-trains `θ^p` on `D_A` over all classes.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (ds, restricted, bundle) = split_data(cfg)?;
    let classes = ds.classes();
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels: Vec<usize> = bundle.a.iter().map(|&i| index[&ds.labels()[i]]).collect();
    let mut widths = vec![ds.dim()];
    widths.extend(&cfg.hidden);
    let spec = BackboneSpec {
        widths,
        init_seed: derive_seed(cfg.seed, "init", 0),
        init_scale: cfg.init_scale,
    };
    let report = pretrain_backbone(&ds.rows(&bundle.a)?, &labels, classes.len(), &spec, cfg.pretrain_epochs, cfg.pretrain_lr)?;
    Ok(Prepared {
        ds,
        restricted,
        bundle,
        theta_p: report.theta,
        pretrain_accuracy: report.train_accuracy,
    })
}

/// Runs the configured method on restricted-mix tasks from `D_A`.
pub fn obstruct(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunOutput> {
    let source = EpisodeStream {
        pool: Pool::new(&prep.ds, &prep.bundle.a),
        spec: cfg.episode,
        constraint: Constraint::RestrictedMix(prep.restricted.restricted.clone()),
        seed: derive_seed(cfg.seed, "episodes", 0),
    };
    run_obstruction(&prep.theta_p, &cfg.obstruction(&prep.restricted), &source)
}

/// Accuracies of every checkpoint under one evaluation seed.
pub fn evaluate_checkpoints(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    checkpoints: &[Checkpoint],
    alg: &FscAlgorithm,
    eval: &EvalConfig,
) -> Result<(MetricSeries, Vec<FscAccuracy>)> {
    let seed = derive_seed(cfg.seed, "eval", 0);
    let accs: Vec<FscAccuracy> = checkpoints
        .iter()
        .map(|c| evaluate_fsc(&c.theta, alg, &prep.ds, &prep.bundle, &prep.restricted.restricted, eval, seed))
        .collect::<Result<_>>()?;
    let points: Vec<(usize, f64, f64)> = checkpoints
        .iter()
        .zip(&accs)
        .map(|(c, a)| (c.step, a.acc_r(), a.acc_rp()))
        .collect();
    Ok((MetricSeries::from_accuracies(&points)?, accs))
}

/// `Δ@β`, with an undefined ratio mapped to `None`.
pub fn defined_ratio(series: &MetricSeries, beta: f64) -> Result<Option<DropRatio>> {
    match drop_ratio_at_beta(series, beta) {
        Ok(d) => Ok(Some(d)),
        Err(Error::UndefinedRatio { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Full single-seed experiment: prepare, obstruct, evaluate.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub prep: Prepared,
    pub run: RunOutput,
    pub series: MetricSeries,
    pub drop: Option<DropRatio>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let prep = prepare(cfg)?;
    let run = obstruct(cfg, &prep)?;
    let (series, _) = evaluate_checkpoints(cfg, &prep, &run.checkpoints, &cfg.algorithm, &cfg.eval)?;
    let drop = defined_ratio(&series, cfg.beta)?;
    Ok(ExperimentResult { prep, run, series, drop })
}

/// Learner of kind `kind` sharing the configured hyperparameters.
pub fn learner_of_kind(base: &FscAlgorithm, kind: LearnerKind) -> FscAlgorithm {
    FscAlgorithm { kind, ..base.clone() }
}

/// `Δ@β` per cell and seed. Multiplier axes reuse one obstruction run per
/// seed; the cross axis obstructs once per seed and obstruction learner.
pub fn run_sweep(base: &ExperimentConfig, axis: &SweepAxis, seeds: &[u64]) -> Result<SweepTable> {
    axis.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "needs at least one seed"));
    }
    let keys = axis.keys();
    let mut values: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(seeds.len()); keys.len()];
    for &seed in seeds {
        let cfg = base.with_seed(seed);
        let prep = prepare(&cfg)?;
        let mut runs: BTreeMap<LearnerKind, RunOutput> = BTreeMap::new();
        for (slot, key) in keys.iter().enumerate() {
            let (lto_alg, eval_alg, eval) = match (*key, axis) {
                (CellKey::Multiplier(m), SweepAxis::Data(_)) => {
                    (cfg.algorithm.clone(), cfg.algorithm.clone(), EvalConfig { m_data: m, ..cfg.eval.clone() })
                }
                (CellKey::Multiplier(m), _) => {
                    (cfg.algorithm.clone(), cfg.algorithm.clone(), EvalConfig { m_time: m, ..cfg.eval.clone() })
                }
                (CellKey::Pair { lto, eval }, _) => {
                    (learner_of_kind(&cfg.algorithm, lto), learner_of_kind(&cfg.algorithm, eval), cfg.eval.clone())
                }
            };
            if !runs.contains_key(&lto_alg.kind) {
                let run_cfg = ExperimentConfig {
                    algorithm: lto_alg.clone(),
                    ..cfg.clone()
                };
                runs.insert(lto_alg.kind, obstruct(&run_cfg, &prep)?);
            }
            let (series, _) = evaluate_checkpoints(&cfg, &prep, &runs[&lto_alg.kind].checkpoints, &eval_alg, &eval)?;
            values[slot].push(defined_ratio(&series, cfg.beta)?.map(|d| d.drop_ratio));
        }
    }
    Ok(SweepTable {
        axis: axis.clone(),
        seeds: seeds.to_vec(),
        beta: base.beta,
        cells: keys.into_iter().zip(values).map(|(k, v)| SweepCell::new(k, v)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeExperimentConfig {
    pub seed: u64,
    /// Generated from the experiment seed; its own `seed` field is ignored.
    pub synth: AttrSynthSpec,
    /// Sample fractions for `D_A` and `D_F`; the rest is `D_eval`.
    pub a_frac: f64,
    pub f_frac: f64,
    pub hidden: Vec<usize>,
    pub init_scale: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub run: LoopConfig,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub fsc_size: usize,
    pub obs_size: usize,
    /// Head-fitting steps on `D_F` before scoring AUROC on `D_eval`.
    pub eval_steps: usize,
    pub eval_lr: f64,
    pub beta: f64,
}

impl Default for AttributeExperimentConfig {
    fn default() -> Self {
        AttributeExperimentConfig {
            seed: 0,
            synth: AttrSynthSpec {
                n_attrs: 4,
                dim: 16,
                n_samples: 1200,
                signal: 2.0,
                noise_sigma: 1.0,
                p_on: 0.5,
                seed: 0,
            },
            a_frac: 0.5,
            f_frac: 0.25,
            hidden: vec![32, 16],
            init_scale: 1.0,
            pretrain_epochs: 200,
            pretrain_lr: 0.5,
            run: LoopConfig {
                steps: 120,
                outer_lr: 0.005,
                checkpoint_every: 8,
                ..LoopConfig::default()
            },
            inner_steps: 20,
            inner_lr: 0.001,
            fsc_size: 20,
            obs_size: 20,
            eval_steps: 100,
            eval_lr: 3e-4,
            beta: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttributeResult {
    pub restricted: BTreeSet<usize>,
    pub run: RunOutput,
    /// AUROC in percent, per checkpoint and attribute.
    pub aurocs: Vec<Vec<f64>>,
    /// Mean AUROC over `R` and `R'` per checkpoint.
    pub series: MetricSeries,
    pub drop: Option<DropRatio>,
    /// Per-attribute AUROC drop at the selected checkpoint (the last one if undefined).
    pub selected_drops: Vec<f64>,
}

/// Attribute data split into `(D_A, D_F, D_eval)`.
pub fn attribute_splits(cfg: &AttributeExperimentConfig) -> Result<(AttrDataset, AttrDataset, AttrDataset)> {
    let data = gen_attributes(&AttrSynthSpec {
        seed: derive_seed(cfg.seed, "data", 0),
        ..cfg.synth.clone()
    })?;
    let n = data.len();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(cfg.seed, "split", 0));
    let n_a = (n as f64 * cfg.a_frac).round() as usize;
    let n_f = (n as f64 * cfg.f_frac).round() as usize;
    if n_a == 0 || n_f == 0 || n_a + n_f >= n {
        return Err(Error::config("a_frac/f_frac", "every attribute split needs samples"));
    }
    Ok((data.subset(&ids[..n_a])?, data.subset(&ids[n_a..n_a + n_f])?, data.subset(&ids[n_a + n_f..])?))
}

/// Obstructs `restricted` attributes and scores AUROC at every checkpoint.
pub fn run_attribute_experiment(cfg: &AttributeExperimentConfig, restricted: &BTreeSet<usize>) -> Result<AttributeResult> {
    let (a, f, eval) = attribute_splits(cfg)?;
    let mut widths = vec![cfg.synth.dim];
    widths.extend(&cfg.hidden);
    let spec = BackboneSpec {
        widths,
        init_seed: derive_seed(cfg.seed, "init", 0),
        init_scale: cfg.init_scale,
    };
    let (theta_p, _) = pretrain_attribute_backbone(&a, &spec, cfg.pretrain_epochs, cfg.pretrain_lr)?;
    let acfg = AttributeConfig {
        run: cfg.run.clone(),
        inner_steps: cfg.inner_steps,
        inner_lr: cfg.inner_lr,
        restricted: restricted.clone(),
    };
    let source = AttributeTaskSource {
        data: &a,
        fsc_size: cfg.fsc_size,
        obs_size: cfg.obs_size,
        seed: derive_seed(cfg.seed, "episodes", 0),
    };
    let phi0 = init_attribute_heads(spec.d_emb(), a.n_attrs());
    let run = run_attribute_lto(&theta_p, &phi0, &acfg, &source)?;
    let aurocs: Vec<Vec<f64>> = run
        .checkpoints
        .iter()
        .map(|c| {
            evaluate_attributes(&c.theta, &f, &eval, cfg.eval_steps, cfg.eval_lr).map(|v| v.iter().map(|x| 100.0 * x).collect())
        })
        .collect::<Result<_>>()?;
    let mean_over = |row: &[f64], inside: bool| {
        let picked: Vec<f64> = (0..row.len()).filter(|a| restricted.contains(a) == inside).map(|a| row[a]).collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    };
    let points: Vec<(usize, f64, f64)> = run
        .checkpoints
        .iter()
        .zip(&aurocs)
        .map(|(c, row)| (c.step, mean_over(row, true), mean_over(row, false)))
        .collect();
    let series = MetricSeries::from_accuracies(&points)?;
    let drop = defined_ratio(&series, cfg.beta)?;
    let selected = drop.map(|d| d.selected_step).unwrap_or(cfg.run.steps);
    let at = run.checkpoints.iter().position(|c| c.step == selected).unwrap_or(run.checkpoints.len() - 1);
    let selected_drops = aurocs[0].iter().zip(&aurocs[at]).map(|(r, x)| r - x).collect();
    Ok(AttributeResult {
        restricted: restricted.clone(),
        run,
        aurocs,
        series,
        drop,
        selected_drops,
    })
}

/// Obstructs each attribute alone and tabulates the collateral drops.
pub fn attribute_confusion_sweep(cfg: &AttributeExperimentConfig) -> Result<ConfusionMatrix> {
    let drops: Vec<Vec<f64>> = (0..cfg.synth.n_attrs)
        .map(|a| run_attribute_experiment(cfg, &BTreeSet::from([a])).map(|r| r.selected_drops))
        .collect::<Result<_>>()?;
    // drops[j][i] is attribute i's drop when obstructing j; the matrix wants it by measured attribute.
    let n = drops.len();
    let by_measured: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| drops[j][i]).collect()).collect();
    attribute_confusion(&by_measured)
}
