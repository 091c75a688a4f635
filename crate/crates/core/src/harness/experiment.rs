//! Baseline against perturbed training on the synthetic task, over seeds.

use std::time::Instant;

use serde::Serialize;

use super::config::KvConfig;
use super::data::{gen_synthetic_dataset, SyntheticTaskSpec};
use super::eval::{decode_split, score_decoded, sweep_fusion, EvalOptions, FusionGrid, MetricsRow};
use super::train::{lm_config_from, train, TrainConfig};
use crate::decode::{BeamConfig, FusionWeights};
use crate::error::{domain, Result};
use crate::perturb::PerturbPolicy;
use crate::tokenlm::{lm_train, CorpusTag, LmTrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub name: String,
    pub perturb: PerturbPolicy,
}

impl System {
    pub fn new(name: &str, perturb: PerturbPolicy) -> Self {
        System {
            name: name.to_string(),
            perturb,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    /// Model, schedule and optimizer shared by every system; the feature
    /// dimension and seed are set per run.
    pub train: TrainConfig,
    pub lm: LmTrainConfig,
    pub beam: BeamConfig,
    pub fusion_grid: FusionGrid,
    pub seeds: Vec<u64>,
    pub systems: Vec<System>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
            lm: LmTrainConfig::default(),
            beam: BeamConfig::default(),
            fusion_grid: FusionGrid::default(),
            seeds: vec![1, 2, 3, 4, 5],
            systems: vec![
                System::new("baseline", PerturbPolicy::none()),
                System::new(
                    "scheduled_sampling",
                    PerturbPolicy::scheduled_sampling(0.9, 3),
                ),
                System::new("switchout", PerturbPolicy::switchout(0.1)),
            ],
        }
    }
}

impl ExperimentConfig {
    /// Reads `data.*`, `model.*`, `train.*`, `lm.*`, `decode.*` and
    /// `experiment.seeds` (comma separated). Systems stay at their defaults.
    pub fn from_config(c: &KvConfig) -> Result<Self> {
        c.check_known("experiment", &["seeds"])?;
        let task = SyntheticTaskSpec::from_config(c)?;
        let train = TrainConfig::from_config(c, task.feature_dim)?;
        let lm = lm_config_from(c)?;
        let beam = EvalOptions::from_config(c, task.expected_token_rate())?.beam;
        let seeds = match c.raw("experiment.seeds") {
            None => ExperimentConfig::default().seeds,
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|e| domain(format!("experiment.seeds: {e}")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(ExperimentConfig {
            task,
            train,
            lm,
            beam,
            seeds,
            ..ExperimentConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub system: String,
    pub metrics: MetricsRow,
    pub weights: FusionWeights,
}

impl ExperimentRow {
    pub const CSV_HEADER: &'static str =
        "seed,system,split,beam,fusion,wer,sub,del,ins,mu,lambda,rho";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.seed,
            self.system,
            self.metrics.csv_row(),
            self.weights.mu,
            self.weights.lambda,
            self.weights.rho
        )
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<ExperimentRow>,
    pub wall_time_s: f64,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        let mut s = String::from(ExperimentRow::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Mean WER over seeds for one system, split and fusion column.
    pub fn mean_wer(&self, system: &str, split: &str, fusion: &str) -> Option<f64> {
        let w: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.system == system && r.metrics.split == split && r.metrics.fusion == fusion
            })
            .map(|r| r.metrics.wer)
            .collect();
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }
}

/// For every seed: generate the task, train the source and external LMs,
/// train each system, pick fusion weights on dev, then score both test
/// splits without and with fusion.
pub fn run_experiment(
    config: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> Result<ExperimentResult> {
    let started = Instant::now();
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let task = gen_synthetic_dataset(&SyntheticTaskSpec {
            seed,
            ..config.task.clone()
        })?;
        let vocab = &task.train.vocab;
        let (src_lm, _) = lm_train(
            &task.train.transcripts(),
            vocab,
            &LmTrainConfig {
                corpus_tag: CorpusTag::TrainTranscripts,
                seed,
                ..config.lm.clone()
            },
        )?;
        let (ext_lm, _) = lm_train(
            &task.target_domain,
            vocab,
            &LmTrainConfig {
                corpus_tag: CorpusTag::TargetDomain,
                seed,
                ..config.lm.clone()
            },
        )?;
        let beam = BeamConfig {
            expected_token_rate: config.task.expected_token_rate(),
            ..config.beam.clone()
        };
        for system in &config.systems {
            let mut tc = config.train.clone();
            tc.model.feature_dim = config.task.feature_dim;
            tc.seed = seed;
            tc.perturb = system.perturb;
            let outcome = train(&tc, &task.train, Some(&src_lm))?;
            let dev = decode_split(
                &outcome.model,
                &task.dev,
                &beam,
                Some(&src_lm),
                Some(&ext_lm),
            )?;
            let (weights, _) = sweep_fusion(&dev, &config.fusion_grid)?;
            for split in ["test_clean", "test_noisy"] {
                let decoded = decode_split(
                    &outcome.model,
                    task.split(split)?,
                    &beam,
                    Some(&src_lm),
                    Some(&ext_lm),
                )?;
                for (fusion, w) in [
                    ("none", FusionWeights::DISABLED),
                    ("density_ratio", weights),
                ] {
                    let r = score_decoded(&decoded, &w)?;
                    rows.push(ExperimentRow {
                        seed,
                        system: system.name.clone(),
                        metrics: MetricsRow {
                            split: split.to_string(),
                            beam: beam.beam_width,
                            fusion: fusion.to_string(),
                            wer: r.wer,
                            sub: r.totals.substitutions,
                            del: r.totals.deletions,
                            ins: r.totals.insertions,
                        },
                        weights: w,
                    });
                }
            }
            progress(&format!(
                "seed {seed} {}: final nll {:.4}, {:.1}s elapsed",
                system.name,
                outcome
                    .reports
                    .last()
                    .map_or(f64::NAN, |r| r.mean_neg_log_lik),
                started.elapsed().as_secs_f64()
            ));
        }
    }
    Ok(ExperimentResult {
        rows,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
