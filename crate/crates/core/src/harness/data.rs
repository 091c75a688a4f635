//! Synthetic transduction task.
//!
//! Each token owns a fixed prototype vector. An utterance is a token
//! sequence drawn from the token prior; every token contributes a run of
//! frames equal to its prototype plus Gaussian noise.
//!
//! On disk a dataset is a directory:
//!
//! - `meta.json`: `{"spec": {...}, "vocabulary": [...]}`
//! - `train.jsonl`, `dev.jsonl`, `test_clean.jsonl`, `test_noisy.jsonl`: one
//!   utterance per line, `{"id": "...", "frames": [[...], ...], "tokens": [...]}`
//! - `target_domain.jsonl`: token-only lines, `{"id": "...", "tokens": [...]}`
//!
//! `test_noisy` holds the token sequences and frame counts of `test_clean`
//! with fresh noise at `noise_sigma_test`.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::KvConfig;
use crate::error::{domain, Error, Result};
use crate::networks::{write_atomic, AcousticSequence, TokenId, TokenSequence, Vocabulary};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPrior {
    Uniform,
    /// First-order chain with random, peaked transition rows.
    Markov,
}

impl std::str::FromStr for TokenPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TokenPrior::Uniform),
            "markov" => Ok(TokenPrior::Markov),
            other => Err(Error::Config(format!("unknown token prior {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: (usize, usize),
    pub noise_sigma_train: f64,
    pub noise_sigma_test: f64,
    /// Training utterances.
    pub utterance_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    /// Token sequences in the external-LM corpus.
    pub target_domain_count: usize,
    pub token_length: (usize, usize),
    pub seed: u64,
    pub token_prior: TokenPrior,
    /// Scale of the log-weights in each Markov transition row.
    pub prior_sharpness: f64,
    /// One-hot prototypes (needs `feature_dim >= vocab_size`); otherwise
    /// each prototype component is `N(0, 1/d)`.
    pub one_hot_prototypes: bool,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 8,
            feature_dim: 16,
            frames_per_token: (2, 4),
            noise_sigma_train: 0.25,
            noise_sigma_test: 0.75,
            utterance_count: 600,
            dev_count: 40,
            test_count: 100,
            target_domain_count: 2000,
            token_length: (3, 8),
            seed: 1,
            token_prior: TokenPrior::Markov,
            prior_sharpness: 2.0,
            one_hot_prototypes: false,
        }
    }
}

const DATA_KEYS: &[&str] = &[
    "vocab_size",
    "feature_dim",
    "frames_per_token_min",
    "frames_per_token_max",
    "noise_sigma_train",
    "noise_sigma_test",
    "utterance_count",
    "dev_count",
    "test_count",
    "target_domain_count",
    "token_length_min",
    "token_length_max",
    "seed",
    "token_prior",
    "prior_sharpness",
    "one_hot_prototypes",
];

impl SyntheticTaskSpec {
    pub fn from_config(c: &KvConfig) -> Result<Self> {
        c.check_known("data", DATA_KEYS)?;
        let d = SyntheticTaskSpec::default();
        let spec = SyntheticTaskSpec {
            vocab_size: c.get_or("data.vocab_size", d.vocab_size)?,
            feature_dim: c.get_or("data.feature_dim", d.feature_dim)?,
            frames_per_token: (
                c.get_or("data.frames_per_token_min", d.frames_per_token.0)?,
                c.get_or("data.frames_per_token_max", d.frames_per_token.1)?,
            ),
            noise_sigma_train: c.get_or("data.noise_sigma_train", d.noise_sigma_train)?,
            noise_sigma_test: match c.get("data.noise_sigma_test")? {
                Some(s) => s,
                None => 3.0 * c.get_or("data.noise_sigma_train", d.noise_sigma_train)?,
            },
            utterance_count: c.get_or("data.utterance_count", d.utterance_count)?,
            dev_count: c.get_or("data.dev_count", d.dev_count)?,
            test_count: c.get_or("data.test_count", d.test_count)?,
            target_domain_count: c.get_or("data.target_domain_count", d.target_domain_count)?,
            token_length: (
                c.get_or("data.token_length_min", d.token_length.0)?,
                c.get_or("data.token_length_max", d.token_length.1)?,
            ),
            seed: c.get_or("data.seed", d.seed)?,
            token_prior: c.get_or("data.token_prior", d.token_prior)?,
            prior_sharpness: c.get_or("data.prior_sharpness", d.prior_sharpness)?,
            one_hot_prototypes: c.get_or("data.one_hot_prototypes", d.one_hot_prototypes)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(domain("synthetic task needs V >= 2"));
        }
        if self.feature_dim < 1 {
            return Err(domain("synthetic task needs d >= 1"));
        }
        let (fmin, fmax) = self.frames_per_token;
        if fmin < 1 || fmin > fmax {
            return Err(domain(
                "frames_per_token range must satisfy 1 <= min <= max",
            ));
        }
        let (lmin, lmax) = self.token_length;
        if lmin < 1 || lmin > lmax {
            return Err(domain("token_length range must satisfy 1 <= min <= max"));
        }
        if !(self.noise_sigma_train >= 0.0 && self.noise_sigma_test >= 0.0) {
            return Err(domain("noise sigmas must be non-negative"));
        }
        if self.one_hot_prototypes && self.feature_dim < self.vocab_size {
            return Err(domain("one-hot prototypes need feature_dim >= vocab_size"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::letters(self.vocab_size)
    }

    /// Mean tokens per frame, for the decoder's default alignment cap.
    pub fn expected_token_rate(&self) -> f64 {
        2.0 / (self.frames_per_token.0 + self.frames_per_token.1) as f64
    }
}

/// A recording with its ground-truth transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub acoustics: AcousticSequence,
    pub tokens: TokenSequence,
}

impl Utterance {
    pub fn id(&self) -> &str {
        &self.acoustics.utterance_id
    }
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    id: String,
    frames: Vec<Vec<f64>>,
    tokens: Vec<TokenId>,
}

#[derive(Serialize, Deserialize)]
struct TokenLine {
    id: String,
    tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn transcripts(&self) -> Vec<TokenSequence> {
        self.utterances.iter().map(|u| u.tokens.clone()).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            let f = &u.acoustics.frames;
            let line = UtteranceLine {
                id: u.id().to_string(),
                frames: (0..f.rows()).map(|t| f.row(t).to_vec()).collect(),
                tokens: u.tokens.to_vec(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut utterances = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let d = rec.frames.first().map_or(0, Vec::len);
            if rec.frames.iter().any(|f| f.len() != d) {
                return Err(Error::Format(format!(
                    "{}:{}: ragged frames",
                    path.display(),
                    n + 1
                )));
            }
            let frames = Matrix::from_vec(rec.frames.len(), d, rec.frames.concat())?;
            let tokens: TokenSequence = rec.tokens.into();
            tokens.check(vocab)?;
            utterances.push(Utterance {
                acoustics: AcousticSequence::new(rec.id, frames)?,
                tokens,
            });
        }
        Ok(Dataset {
            vocab: vocab.clone(),
            utterances,
        })
    }
}

pub fn corpus_to_jsonl(prefix: &str, corpus: &[TokenSequence]) -> Result<String> {
    let mut out = String::new();
    for (i, y) in corpus.iter().enumerate() {
        let line = TokenLine {
            id: format!("{prefix}-{i:05}"),
            tokens: y.to_vec(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads token sequences from JSON lines; any `frames` field is ignored.
pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let tokens: Vec<TokenId> = serde_json::from_value(v["tokens"].clone())
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let y: TokenSequence = tokens.into();
        y.check(vocab)?;
        out.push(y);
    }
    Ok(out)
}

/// The fixed parts of a task: prototypes and the token chain.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub prototypes: Matrix,
    /// `V × V` row-stochastic transition matrix; row `i` is the distribution
    /// after token `i + 1`.
    pub transitions: Matrix,
}

impl TaskModel {
    pub fn new(spec: &SyntheticTaskSpec) -> Self {
        let (v, d) = (spec.vocab_size, spec.feature_dim);
        let mut rng = SeededRng::for_stream(spec.seed, "data.prototypes", 0, "");
        let scale = 1.0 / (d as f64).sqrt();
        let prototypes = if spec.one_hot_prototypes {
            Matrix::from_fn(v, d, |r, c| if r == c { 1.0 } else { 0.0 })
        } else {
            Matrix::from_fn(v, d, |_, _| scale * rng.normal())
        };
        let mut rng = SeededRng::for_stream(spec.seed, "data.prior", 0, "");
        let transitions = match spec.token_prior {
            TokenPrior::Uniform => Matrix::from_fn(v, v, |_, _| 1.0 / v as f64),
            TokenPrior::Markov => {
                let mut m =
                    Matrix::from_fn(v, v, |_, _| (spec.prior_sharpness * rng.normal()).exp());
                for r in 0..v {
                    let s: f64 = m.row(r).iter().sum();
                    for x in m.row_mut(r) {
                        *x /= s;
                    }
                }
                m
            }
        };
        TaskModel {
            prototypes,
            transitions,
        }
    }

    pub fn sample_tokens(&self, spec: &SyntheticTaskSpec, rng: &mut SeededRng) -> TokenSequence {
        let (lmin, lmax) = spec.token_length;
        let len = lmin + rng.below(lmax - lmin + 1);
        let v = spec.vocab_size;
        let mut out = Vec::with_capacity(len);
        let mut prev: Option<usize> = None;
        for _ in 0..len {
            let k = match prev {
                None => rng.below(v),
                Some(p) => rng.categorical(self.transitions.row(p)),
            };
            out.push(k as TokenId + 1);
            prev = Some(k);
        }
        out.into()
    }

    pub fn sample_durations(
        &self,
        spec: &SyntheticTaskSpec,
        len: usize,
        rng: &mut SeededRng,
    ) -> Vec<usize> {
        let (fmin, fmax) = spec.frames_per_token;
        (0..len)
            .map(|_| fmin + rng.below(fmax - fmin + 1))
            .collect()
    }

    /// Frames for `tokens` with the given durations; also returns the token
    /// behind every frame.
    pub fn render(
        &self,
        id: &str,
        tokens: &[TokenId],
        durations: &[usize],
        sigma: f64,
        rng: &mut SeededRng,
    ) -> Result<(AcousticSequence, Vec<TokenId>)> {
        let d = self.prototypes.cols();
        let total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        for (&tok, &n) in tokens.iter().zip(durations) {
            let proto = self.prototypes.row(tok as usize - 1);
            for _ in 0..n {
                data.extend(proto.iter().map(|p| p + sigma * rng.normal()));
                labels.push(tok);
            }
        }
        Ok((
            AcousticSequence::new(id, Matrix::from_vec(total, d, data)?)?,
            labels,
        ))
    }
}

/// All splits of one generated task.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub train: Dataset,
    pub dev: Dataset,
    pub test_clean: Dataset,
    pub test_noisy: Dataset,
    pub target_domain: Vec<TokenSequence>,
}

fn split(
    spec: &SyntheticTaskSpec,
    task: &TaskModel,
    prefix: &str,
    count: usize,
    sigma: f64,
) -> Result<Dataset> {
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{prefix}-{i:05}");
        let mut rng = SeededRng::for_stream(spec.seed, "data.utterance", 0, &id);
        let tokens = task.sample_tokens(spec, &mut rng);
        let durations = task.sample_durations(spec, tokens.len(), &mut rng);
        let (acoustics, _) = task.render(&id, &tokens, &durations, sigma, &mut rng)?;
        utterances.push(Utterance { acoustics, tokens });
    }
    Ok(Dataset {
        vocab: spec.vocabulary(),
        utterances,
    })
}

pub fn gen_synthetic_dataset(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let task = TaskModel::new(spec);
    let train = split(
        spec,
        &task,
        "train",
        spec.utterance_count,
        spec.noise_sigma_train,
    )?;
    let dev = split(spec, &task, "dev", spec.dev_count, spec.noise_sigma_train)?;
    let mut clean = Vec::with_capacity(spec.test_count);
    let mut noisy = Vec::with_capacity(spec.test_count);
    for i in 0..spec.test_count {
        let base = format!("test-{i:05}");
        let mut rng = SeededRng::for_stream(spec.seed, "data.utterance", 0, &base);
        let tokens = task.sample_tokens(spec, &mut rng);
        let durations = task.sample_durations(spec, tokens.len(), &mut rng);
        let id_c = format!("test_clean-{i:05}");
        let id_n = format!("test_noisy-{i:05}");
        let mut rc = SeededRng::for_stream(spec.seed, "data.noise", 0, &id_c);
        let mut rn = SeededRng::for_stream(spec.seed, "data.noise", 0, &id_n);
        let (ac, _) = task.render(&id_c, &tokens, &durations, spec.noise_sigma_train, &mut rc)?;
        let (an, _) = task.render(&id_n, &tokens, &durations, spec.noise_sigma_test, &mut rn)?;
        clean.push(Utterance {
            acoustics: ac,
            tokens: tokens.clone(),
        });
        noisy.push(Utterance {
            acoustics: an,
            tokens,
        });
    }
    let target_domain = (0..spec.target_domain_count)
        .map(|i| {
            let mut rng = SeededRng::for_stream(spec.seed, "data.target_domain", 0, &i.to_string());
            task.sample_tokens(spec, &mut rng)
        })
        .collect();
    let vocab = spec.vocabulary();
    Ok(SyntheticTask {
        spec: spec.clone(),
        train,
        dev,
        test_clean: Dataset {
            vocab: vocab.clone(),
            utterances: clean,
        },
        test_noisy: Dataset {
            vocab,
            utterances: noisy,
        },
        target_domain,
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: SyntheticTaskSpec,
    vocabulary: Vocabulary,
}

pub const SPLITS: [&str; 4] = ["train", "dev", "test_clean", "test_noisy"];

impl SyntheticTask {
    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test_clean" => Ok(&self.test_clean),
            "test_noisy" => Ok(&self.test_noisy),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = Meta {
            spec: self.spec.clone(),
            vocabulary: self.spec.vocabulary(),
        };
        write_atomic(
            &dir.join("meta.json"),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )?;
        for name in SPLITS {
            write_atomic(
                &dir.join(format!("{name}.jsonl")),
                self.split(name)?.to_jsonl()?.as_bytes(),
            )?;
        }
        write_atomic(
            &dir.join("target_domain.jsonl"),
            corpus_to_jsonl("target_domain", &self.target_domain)?.as_bytes(),
        )?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let v = &meta.vocabulary;
        Ok(SyntheticTask {
            train: Dataset::read_jsonl(&dir.join("train.jsonl"), v)?,
            dev: Dataset::read_jsonl(&dir.join("dev.jsonl"), v)?,
            test_clean: Dataset::read_jsonl(&dir.join("test_clean.jsonl"), v)?,
            test_noisy: Dataset::read_jsonl(&dir.join("test_noisy.jsonl"), v)?,
            target_domain: read_corpus(&dir.join("target_domain.jsonl"), v)?,
            spec: meta.spec,
        })
    }
}

/// Vocabulary stored in a dataset directory.
pub fn read_vocabulary(dir: &Path) -> Result<Vocabulary> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    Ok(meta.vocabulary)
}
