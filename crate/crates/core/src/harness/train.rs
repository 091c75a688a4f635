use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::KvConfig;
use super::data::Dataset;
use crate::error::{domain, Error, Result};
use crate::networks::{write_atomic, ModelConfig, RnntModel};
use crate::numerics::{adamw_step, AdamWConfig, LrSchedule, OptimizerState, ParamSet, SeededRng};
use crate::perturb::{apply_policy, PerturbKind, PerturbPolicy};
use crate::tokenlm::{LmTrainConfig, TokenLm};
use crate::transducer::transducer_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub perturb: PerturbPolicy,
    pub curriculum: bool,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Perturbation records written per epoch to
    /// `checkpoint_dir/perturbations.jsonl`.
    pub dump_perturbations: usize,
}

/// The long-warmup, long-hold shape at twenty times the rates, for the
/// synthetic task's far smaller number of updates.
pub fn desk_schedule() -> LrSchedule {
    LrSchedule {
        lr_start: 4e-3,
        lr_peak: 4e-2,
        ..LrSchedule::long_warmup_long_hold()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            schedule: desk_schedule(),
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            perturb: PerturbPolicy::none(),
            curriculum: true,
            seed: 1,
            checkpoint_dir: None,
            dump_perturbations: 0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "trans_layers",
    "trans_hidden",
    "pred_hidden",
    "embed_dim",
    "joint_dim",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr_start",
    "lr_peak",
    "warmup_epochs",
    "hold_epochs",
    "decay_factor",
    "curriculum",
    "seed",
    "checkpoint_dir",
    "dump_perturbations",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
];
const PERTURB_KEYS: &[&str] = &[
    "kind",
    "tau",
    "teacher_p",
    "top_k",
    "anneal_epoch",
    "post_anneal_lr",
    "lm",
];

impl TrainConfig {
    /// Reads `model.*`, `train.*` and `perturb.*`; the feature dimension
    /// comes from the data.
    pub fn from_config(c: &KvConfig, feature_dim: usize) -> Result<Self> {
        c.check_known("model", MODEL_KEYS)?;
        c.check_known("train", TRAIN_KEYS)?;
        c.check_known("perturb", PERTURB_KEYS)?;
        let d = TrainConfig::default();
        let m = d.model;
        let model = ModelConfig {
            feature_dim,
            trans_layers: c.get_or("model.trans_layers", m.trans_layers)?,
            trans_hidden: c.get_or("model.trans_hidden", m.trans_hidden)?,
            pred_hidden: c.get_or("model.pred_hidden", m.pred_hidden)?,
            embed_dim: c.get_or("model.embed_dim", m.embed_dim)?,
            joint_dim: c.get_or("model.joint_dim", m.joint_dim)?,
        };
        let s = d.schedule;
        let schedule = LrSchedule {
            lr_start: c.get_or("train.lr_start", s.lr_start)?,
            lr_peak: c.get_or("train.lr_peak", s.lr_peak)?,
            warmup_epochs: c.get_or("train.warmup_epochs", s.warmup_epochs)?,
            hold_epochs: c.get_or("train.hold_epochs", s.hold_epochs)?,
            decay_factor: c.get_or("train.decay_factor", s.decay_factor)?,
            total_epochs: c.get_or("train.epochs", s.total_epochs)?,
        };
        let o = d.optimizer;
        let optimizer = AdamWConfig {
            beta1: c.get_or("train.beta1", o.beta1)?,
            beta2: c.get_or("train.beta2", o.beta2)?,
            epsilon: c.get_or("train.epsilon", o.epsilon)?,
            weight_decay: c.get_or("train.weight_decay", o.weight_decay)?,
        };
        let p = d.perturb;
        let perturb = PerturbPolicy {
            kind: c.get_or("perturb.kind", p.kind)?,
            tau: c.get_or("perturb.tau", p.tau)?,
            teacher_p: c.get_or("perturb.teacher_p", p.teacher_p)?,
            top_k: c.get_or("perturb.top_k", p.top_k)?,
            anneal_epoch: c.get("perturb.anneal_epoch")?,
            post_anneal_lr: c.get("perturb.post_anneal_lr")?,
        };
        Ok(TrainConfig {
            model,
            schedule,
            optimizer,
            batch_size: c.get_or("train.batch_size", d.batch_size)?,
            perturb,
            curriculum: c.get_or("train.curriculum", d.curriculum)?,
            seed: c.get_or("train.seed", d.seed)?,
            checkpoint_dir: c.get::<String>("train.checkpoint_dir")?.map(PathBuf::from),
            dump_perturbations: c.get_or("train.dump_perturbations", d.dump_perturbations)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(domain("batch_size must be at least 1"));
        }
        if self.schedule.total_epochs < 1 {
            return Err(domain("epochs must be at least 1"));
        }
        self.schedule.validate()
    }

    /// The schedule's rate, except after an anneal boundary with a
    /// `post_anneal_lr`: that rate for the first epoch after the boundary,
    /// then decayed by the schedule's factor each epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> Result<f64> {
        let base = self.schedule.lr_at_epoch(epoch)?;
        match (
            self.perturb.kind,
            self.perturb.anneal_epoch,
            self.perturb.post_anneal_lr,
        ) {
            (k, Some(a), Some(lr)) if k != PerturbKind::None && epoch > a => {
                Ok(lr * self.schedule.decay_factor.powi((epoch - a - 1) as i32))
            }
            _ => Ok(base),
        }
    }
}

const LM_KEYS: &[&str] = &[
    "embed_dim",
    "hidden",
    "corpus",
    "batch_size",
    "epochs",
    "lr_start",
    "lr_peak",
    "seed",
];

/// Token-LM training settings from `lm.*`.
pub fn lm_config_from(c: &KvConfig) -> Result<LmTrainConfig> {
    c.check_known("lm", LM_KEYS)?;
    let d = LmTrainConfig::default();
    Ok(LmTrainConfig {
        embed_dim: c.get_or("lm.embed_dim", d.embed_dim)?,
        hidden: c.get_or("lm.hidden", d.hidden)?,
        corpus_tag: c.get_or("lm.corpus", d.corpus_tag)?,
        batch_size: c.get_or("lm.batch_size", d.batch_size)?,
        schedule: LrSchedule {
            lr_start: c.get_or("lm.lr_start", d.schedule.lr_start)?,
            lr_peak: c.get_or("lm.lr_peak", d.schedule.lr_peak)?,
            total_epochs: c.get_or("lm.epochs", d.schedule.total_epochs)?,
            ..d.schedule
        },
        seed: c.get_or("lm.seed", d.seed)?,
        ..d
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_neg_log_lik: f64,
    pub learning_rate: f64,
    pub perturbation_active: bool,
    pub wall_time_s: f64,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_neg_log_lik,learning_rate,perturbation_active,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch,
            self.mean_neg_log_lik,
            self.learning_rate,
            self.perturbation_active,
            self.wall_time_s
        )
    }
}

pub fn epoch_reports_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from(EpochReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// SHA-256 over every tensor's name, shape and little-endian data.
pub fn model_digest<P: ParamSet>(params: &P) -> String {
    let mut h = Sha256::new();
    for (name, m) in params.names().iter().zip(params.tensors()) {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for x in m.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RnntModel,
    pub reports: Vec<EpochReport>,
    pub digest: String,
}

/// Utterance indices in presentation order for one epoch.
pub fn epoch_order(data: &Dataset, config: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if config.curriculum {
        order.sort_by(|&a, &b| {
            let (ua, ub) = (&data.utterances[a], &data.utterances[b]);
            ua.acoustics
                .len()
                .cmp(&ub.acoustics.len())
                .then_with(|| ua.id().cmp(ub.id()))
        });
    } else {
        SeededRng::for_stream(config.seed, "train.shuffle", epoch as u64, "").shuffle(&mut order);
    }
    order
}

#[derive(Serialize)]
struct DumpLine<'a> {
    epoch: usize,
    utterance_id: &'a str,
    #[serde(flatten)]
    record: &'a crate::perturb::PerturbRecord,
}

/// Maximum-likelihood training with on-the-fly perturbation of the
/// prediction-network inputs. The loss always targets the dataset labels.
pub fn train(config: &TrainConfig, data: &Dataset, lm: Option<&TokenLm>) -> Result<TrainOutcome> {
    train_from(
        config,
        data,
        lm,
        RnntModel::init(config.model, data.vocab.clone(), config.seed),
    )
}

pub fn train_from(
    config: &TrainConfig,
    data: &Dataset,
    lm: Option<&TokenLm>,
    mut model: RnntModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    config.perturb.validate(&data.vocab)?;
    if data.is_empty() {
        return Err(domain("training set is empty"));
    }
    if model.vocab != data.vocab {
        return Err(Error::VocabMismatch(
            "model and training data use different vocabularies".into(),
        ));
    }
    if config.perturb.kind == PerturbKind::ScheduledSampling && lm.is_none() {
        return Err(Error::Config("scheduled sampling needs a token LM".into()));
    }
    let mut opt = OptimizerState::new(&model, config.optimizer);
    let mut reports = Vec::new();
    let mut dump = String::new();
    for epoch in 1..=config.schedule.total_epochs {
        let started = Instant::now();
        let lr = config.lr_for_epoch(epoch)?;
        let order = epoch_order(data, config, epoch);
        let mut total = 0.0;
        let mut dumped = 0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zeros_like();
            for &i in batch {
                let utt = &data.utterances[i];
                let mut rng = SeededRng::for_stream(config.seed, "perturb", epoch as u64, utt.id());
                let rec = apply_policy(
                    &utt.tokens,
                    &config.perturb,
                    epoch,
                    &data.vocab,
                    lm,
                    &mut rng,
                )?;
                let (loss, g) =
                    transducer_loss(&model, &utt.acoustics, &utt.tokens, &rec.perturbed)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        utterance_id: utt.id().to_string(),
                        epoch,
                    });
                }
                if dumped < config.dump_perturbations {
                    dump.push_str(&serde_json::to_string(&DumpLine {
                        epoch,
                        utterance_id: utt.id(),
                        record: &rec,
                    })?);
                    dump.push('\n');
                    dumped += 1;
                }
                total += loss;
                for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.axpy(1.0, part);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for m in grads.tensors_mut() {
                m.scale(inv);
            }
            adamw_step(&mut model, &grads, &mut opt, lr)?;
        }
        let report = EpochReport {
            epoch,
            mean_neg_log_lik: total / data.len() as f64,
            learning_rate: lr,
            perturbation_active: config.perturb.active_at(epoch),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &config.checkpoint_dir {
            let mut ckpt = model.to_checkpoint();
            ckpt.meta.insert("epoch".into(), epoch.to_string());
            ckpt.meta.insert("seed".into(), config.seed.to_string());
            ckpt.save(&dir.join(format!("epoch_{epoch:03}.json")))?;
            ckpt.save(&dir.join("final.json"))?;
            reports.push(report);
            write_atomic(
                &dir.join("epochs.csv"),
                epoch_reports_csv(&reports).as_bytes(),
            )?;
            if config.dump_perturbations > 0 {
                write_atomic(&dir.join("perturbations.jsonl"), dump.as_bytes())?;
            }
        } else {
            reports.push(report);
        }
    }
    let digest = model_digest(&model);
    Ok(TrainOutcome {
        model,
        reports,
        digest,
    })
}
