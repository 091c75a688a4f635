//! Label-preserving perturbation of the prediction network's input history.
//!
//! Every policy maps `y` to a `ỹ` of the same length. The training loss is
//! still computed against `y`; only the conditioning changes.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::networks::{TokenId, TokenSequence, Vocabulary};
use crate::numerics::SeededRng;
use crate::tokenlm::{lm_topk, TokenLm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    None,
    Switchout,
    ScheduledSampling,
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PerturbKind::None),
            "switchout" => Ok(PerturbKind::Switchout),
            "scheduled_sampling" => Ok(PerturbKind::ScheduledSampling),
            other => Err(Error::Config(format!(
                "unknown perturbation kind {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbPolicy {
    pub kind: PerturbKind,
    /// SwitchOut temperature.
    pub tau: f64,
    /// Teacher-forcing probability.
    pub teacher_p: f64,
    pub top_k: usize,
    /// Last epoch with perturbation; later epochs train on `y` itself.
    pub anneal_epoch: Option<usize>,
    /// Learning rate of the first epoch after the anneal boundary.
    pub post_anneal_lr: Option<f64>,
}

impl Default for PerturbPolicy {
    fn default() -> Self {
        PerturbPolicy {
            kind: PerturbKind::None,
            tau: 0.1,
            teacher_p: 0.9,
            top_k: 3,
            anneal_epoch: None,
            post_anneal_lr: None,
        }
    }
}

impl PerturbPolicy {
    pub fn none() -> Self {
        PerturbPolicy::default()
    }

    pub fn switchout(tau: f64) -> Self {
        PerturbPolicy {
            kind: PerturbKind::Switchout,
            tau,
            ..PerturbPolicy::default()
        }
    }

    pub fn scheduled_sampling(teacher_p: f64, top_k: usize) -> Self {
        PerturbPolicy {
            kind: PerturbKind::ScheduledSampling,
            teacher_p,
            top_k,
            ..PerturbPolicy::default()
        }
    }

    pub fn with_anneal(mut self, epoch: usize, post_anneal_lr: Option<f64>) -> Self {
        self.anneal_epoch = Some(epoch);
        self.post_anneal_lr = post_anneal_lr;
        self
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        match self.kind {
            PerturbKind::None => {}
            PerturbKind::Switchout => {
                if !(self.tau > 0.0) {
                    return Err(domain(format!("switchout needs tau > 0, got {}", self.tau)));
                }
            }
            PerturbKind::ScheduledSampling => {
                if !(0.0..=1.0).contains(&self.teacher_p) {
                    return Err(domain(format!(
                        "teacher_p {} outside [0, 1]",
                        self.teacher_p
                    )));
                }
                if self.top_k < 1 || self.top_k > vocab.size() {
                    return Err(domain(format!(
                        "top_k {} outside 1..={}",
                        self.top_k,
                        vocab.size()
                    )));
                }
            }
        }
        if let Some(lr) = self.post_anneal_lr {
            if !(lr > 0.0) {
                return Err(domain("post_anneal_lr must be positive"));
            }
        }
        Ok(())
    }

    /// Whether `epoch` perturbs anything.
    pub fn active_at(&self, epoch: usize) -> bool {
        self.kind != PerturbKind::None && self.anneal_epoch.is_none_or(|a| epoch <= a)
    }
}

/// One application of a policy.
///
/// For SwitchOut `sampled_count` is the drawn `n̂`; for scheduled sampling it
/// is the number of positions where the teacher-forcing draw failed (the
/// sampled token can still coincide with `y_u`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbRecord {
    pub original: TokenSequence,
    pub perturbed: TokenSequence,
    pub corrupted_positions: Vec<usize>,
    pub sampled_count: usize,
}

impl PerturbRecord {
    fn identity(y: &TokenSequence) -> Self {
        PerturbRecord {
            original: y.clone(),
            perturbed: y.clone(),
            corrupted_positions: Vec::new(),
            sampled_count: 0,
        }
    }
}

/// `p(n) ∝ e^{-n/τ}` for `n = 0..=U`, normalized.
pub fn corruption_count_distribution(u: usize, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(domain(format!("corruption count needs tau > 0, got {tau}")));
    }
    let w: Vec<f64> = (0..=u).map(|n| (-(n as f64) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

pub fn sample_corruption_count(u: usize, tau: f64, rng: &mut SeededRng) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(domain(format!("corruption count needs tau > 0, got {tau}")));
    }
    // The largest weight is e^0 = 1, so these are already max-shifted.
    let w: Vec<f64> = (0..=u).map(|n| (-(n as f64) / tau).exp()).collect();
    Ok(rng.categorical(&w))
}

/// SwitchOut with a given `n̂`: each position flips with probability `n̂/U`
/// and takes a uniform token other than `y_u`.
pub fn switchout_with_count(
    y: &TokenSequence,
    n_hat: usize,
    vocab: &Vocabulary,
    rng: &mut SeededRng,
) -> PerturbRecord {
    let u_len = y.len();
    if u_len == 0 {
        return PerturbRecord::identity(y);
    }
    let rate = n_hat as f64 / u_len as f64;
    let v = vocab.size() as TokenId;
    let mut perturbed = y.to_vec();
    let mut corrupted = Vec::new();
    for (u, tok) in perturbed.iter_mut().enumerate() {
        if !rng.bernoulli(rate) || v < 2 {
            continue;
        }
        let mut r = 1 + rng.below(v as usize - 1) as TokenId;
        if r >= *tok {
            r += 1;
        }
        *tok = r;
        corrupted.push(u);
    }
    PerturbRecord {
        original: y.clone(),
        perturbed: perturbed.into(),
        corrupted_positions: corrupted,
        sampled_count: n_hat,
    }
}

pub fn switchout(
    y: &TokenSequence,
    tau: f64,
    vocab: &Vocabulary,
    rng: &mut SeededRng,
) -> Result<PerturbRecord> {
    let n_hat = sample_corruption_count(y.len(), tau, rng)?;
    Ok(switchout_with_count(y, n_hat, vocab, rng))
}

/// Left-to-right token-LM scheduled sampling. The LM state advances over
/// the perturbed history.
pub fn scheduled_sample(
    y: &TokenSequence,
    policy: &PerturbPolicy,
    lm: &TokenLm,
    rng: &mut SeededRng,
) -> Result<PerturbRecord> {
    let mut state = lm.start();
    let mut perturbed = Vec::with_capacity(y.len());
    let mut corrupted = Vec::new();
    let mut sampled = 0;
    for (u, &truth) in y.iter().enumerate() {
        let tok = if rng.bernoulli(policy.teacher_p) {
            truth
        } else {
            sampled += 1;
            let cands = lm_topk(lm, &state, policy.top_k)?;
            cands[rng.below(cands.len())]
        };
        if tok != truth {
            corrupted.push(u);
        }
        state = lm.advance(&state, tok)?;
        perturbed.push(tok);
    }
    Ok(PerturbRecord {
        original: y.clone(),
        perturbed: perturbed.into(),
        corrupted_positions: corrupted,
        sampled_count: sampled,
    })
}

pub fn apply_policy(
    y: &TokenSequence,
    policy: &PerturbPolicy,
    epoch: usize,
    vocab: &Vocabulary,
    lm: Option<&TokenLm>,
    rng: &mut SeededRng,
) -> Result<PerturbRecord> {
    if epoch < 1 {
        return Err(domain("epochs are numbered from 1"));
    }
    if !policy.active_at(epoch) {
        return Ok(PerturbRecord::identity(y));
    }
    match policy.kind {
        PerturbKind::None => Ok(PerturbRecord::identity(y)),
        PerturbKind::Switchout => switchout(y, policy.tau, vocab, rng),
        PerturbKind::ScheduledSampling => {
            let lm =
                lm.ok_or_else(|| Error::Config("scheduled sampling needs a token LM".into()))?;
            if lm.vocab != *vocab {
                return Err(Error::VocabMismatch(
                    "perturbation LM and model use different vocabularies".into(),
                ));
            }
            scheduled_sample(y, policy, lm, rng)
        }
    }
}
