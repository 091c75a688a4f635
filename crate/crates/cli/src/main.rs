use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rnnt_core::decode::{decode_utterance, word_error_rate, Fusion};
use rnnt_core::harness::data::{
    gen_synthetic_dataset, read_corpus, read_vocabulary, Dataset, SyntheticTaskSpec,
};
use rnnt_core::harness::eval::{evaluate, metrics_csv, EvalOptions, MetricsRow};
use rnnt_core::harness::experiment::{run_experiment, ExperimentConfig};
use rnnt_core::harness::gradcheck::{grad_check, GradCheckConfig};
use rnnt_core::harness::train::{epoch_reports_csv, lm_config_from, train, TrainConfig};
use rnnt_core::harness::KvConfig;
use rnnt_core::networks::{write_atomic, RnntModel, TokenSequence};
use rnnt_core::perturb::PerturbKind;
use rnnt_core::tokenlm::{lm_train, CorpusTag, TokenLm};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "rnnt",
    about = "RNN transducer training with perturbed prediction-network inputs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<KvConfig> {
        Ok(match &self.config {
            Some(p) => KvConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => KvConfig::default(),
        })
    }
}

#[derive(Args)]
struct FusionArgs {
    #[arg(long)]
    src_lm: Option<PathBuf>,
    #[arg(long)]
    ext_lm: Option<PathBuf>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Apply fusion while pruning, not only to finished hypotheses.
    #[arg(long)]
    fuse_in_beam: bool,
    #[arg(long)]
    beam: Option<usize>,
}

impl FusionArgs {
    fn apply(&self, c: &mut KvConfig) {
        for (k, v) in [
            ("fusion.mu", self.mu),
            ("fusion.lambda", self.lambda),
            ("fusion.rho", self.rho),
        ] {
            if let Some(v) = v {
                c.set(k, v);
            }
        }
        if self.fuse_in_beam {
            c.set("fusion.in_beam", true);
        }
        if let Some(b) = self.beam {
            c.set("decode.beam", b);
        }
    }

    fn lms(&self) -> Result<(Option<TokenLm>, Option<TokenLm>)> {
        let load = |p: &Option<PathBuf>| p.as_deref().map(TokenLm::load).transpose();
        Ok((load(&self.src_lm)?, load(&self.ext_lm)?))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a transducer; writes per-epoch checkpoints and epochs.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Token LM for scheduled sampling.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Perturbation records to dump per epoch.
        #[arg(long)]
        dump_perturbations: Option<usize>,
    },
    /// Train a token LM on the training transcripts or the target-domain corpus.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `train_transcripts` or `target_domain`.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// Beam-search a split; one JSON line per utterance.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_noisy")]
        split: String,
        #[command(flatten)]
        fusion: FusionArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics CSV for a split, from a model or from decode output.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_noisy")]
        split: String,
        #[arg(long, conflicts_with = "hyps")]
        model: Option<PathBuf>,
        /// JSON lines written by `decode`.
        #[arg(long)]
        hyps: Option<PathBuf>,
        #[command(flatten)]
        fusion: FusionArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the transducer gradients on a tiny model.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Baseline, scheduled sampling and SwitchOut over several seeds.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn split_of(dir: &Path, split: &str) -> Result<Dataset> {
    let vocab = read_vocabulary(dir)?;
    Ok(Dataset::read_jsonl(
        &dir.join(format!("{split}.jsonl")),
        &vocab,
    )?)
}

fn token_rate(dir: &Path) -> Result<f64> {
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let spec: SyntheticTaskSpec = serde_json::from_value(meta["spec"].clone())?;
    Ok(spec.expected_token_rate())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let mut c = common.load()?;
            if let Some(s) = common.seed {
                c.set("data.seed", s);
            }
            let task = gen_synthetic_dataset(&SyntheticTaskSpec::from_config(&c)?)?;
            task.write(&out)?;
            eprintln!(
                "wrote {} train, {} dev, {} test utterances to {}",
                task.train.len(),
                task.dev.len(),
                task.test_clean.len(),
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            out,
            lm,
            dump_perturbations,
        } => {
            let mut c = common.load()?;
            if let Some(s) = common.seed {
                c.set("train.seed", s);
            }
            if let Some(n) = dump_perturbations {
                c.set("train.dump_perturbations", n);
            }
            c.set("train.checkpoint_dir", out.display());
            let train_set = split_of(&data, "train")?;
            let feature_dim = train_set
                .utterances
                .first()
                .map_or(0, |u| u.acoustics.feature_dim());
            let cfg = TrainConfig::from_config(&c, feature_dim)?;
            let lm_path = lm.or_else(|| c.raw("perturb.lm").map(PathBuf::from));
            let lm = lm_path.as_deref().map(TokenLm::load).transpose()?;
            if cfg.perturb.kind == PerturbKind::ScheduledSampling && lm.is_none() {
                bail!("scheduled sampling needs --lm");
            }
            let outcome = train(&cfg, &train_set, lm.as_ref())?;
            print!("{}", epoch_reports_csv(&outcome.reports));
            eprintln!(
                "final checkpoint {} (sha256 {})",
                out.join("final.json").display(),
                outcome.digest
            );
        }
        Command::TrainLm {
            common,
            data,
            out,
            corpus,
        } => {
            let mut c = common.load()?;
            if let Some(s) = common.seed {
                c.set("lm.seed", s);
            }
            if let Some(tag) = corpus {
                c.set("lm.corpus", tag);
            }
            let cfg = lm_config_from(&c)?;
            let vocab = read_vocabulary(&data)?;
            let text = match cfg.corpus_tag {
                CorpusTag::TrainTranscripts => split_of(&data, "train")?.transcripts(),
                CorpusTag::TargetDomain => read_corpus(&data.join("target_domain.jsonl"), &vocab)?,
            };
            let (lm, report) = lm_train(&text, &vocab, &cfg)?;
            lm.save(&out)?;
            if report.schedule_warning {
                eprintln!("warning: LM loss did not fall over the first epochs");
            }
            eprintln!(
                "perplexity {:.4} after {} epochs; wrote {}",
                report.perplexities.last().copied().unwrap_or(f64::NAN),
                report.perplexities.len(),
                out.display()
            );
        }
        Command::Decode {
            common,
            model,
            data,
            split,
            fusion,
            out,
        } => {
            let mut c = common.load()?;
            fusion.apply(&mut c);
            let opts = EvalOptions::from_config(&c, token_rate(&data)?)?;
            let model = RnntModel::load(&model)?;
            let set = split_of(&data, &split)?;
            if set.vocab != model.vocab {
                bail!(rnnt_core::Error::VocabMismatch(
                    "model and data use different vocabularies".into()
                ));
            }
            let (src, ext) = fusion.lms()?;
            let active = !opts.weights.is_disabled();
            let fz = Fusion {
                src_lm: src.as_ref(),
                ext_lm: ext.as_ref(),
                weights: opts.weights,
                in_beam: opts.in_beam,
            };
            let mut text = String::new();
            for utt in &set.utterances {
                let res =
                    decode_utterance(&model, &utt.acoustics, &opts.beam, active.then_some(&fz))?;
                let best = res.best();
                let line = json!({
                    "utterance_id": utt.id(),
                    "hypothesis": model.vocab.render(&best.tokens),
                    "rnnt_score": best.rnnt_log_prob,
                    "fused_score": if active { json!(best.score) } else { Value::Null },
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            emit(out.as_deref(), &text)?;
        }
        Command::Eval {
            common,
            data,
            split,
            model,
            hyps,
            fusion,
            out,
        } => {
            let mut c = common.load()?;
            fusion.apply(&mut c);
            let opts = EvalOptions::from_config(&c, token_rate(&data)?)?;
            let set = split_of(&data, &split)?;
            let rows: Vec<MetricsRow> = match (model, hyps) {
                (Some(m), None) => {
                    let model = RnntModel::load(&m)?;
                    let (src, ext) = fusion.lms()?;
                    evaluate(&model, &split, &set, &opts, src.as_ref(), ext.as_ref())?.to_vec()
                }
                (None, Some(h)) => vec![score_hyps(&h, &set, &split, opts.beam.beam_width)?],
                _ => bail!("eval needs exactly one of --model or --hyps"),
            };
            emit(out.as_deref(), &metrics_csv(&rows))?;
        }
        Command::GradCheck { common } => {
            let mut c = common.load()?;
            if let Some(s) = common.seed {
                c.set("gradcheck.seed", s);
            }
            let report = grad_check(&GradCheckConfig::from_config(&c)?)?;
            for g in &report.groups {
                println!("{:<28} {:.3e}", g.group, g.relative_error);
            }
            println!(
                "pass: {} parameters, max relative error {:.3e} ({})",
                report.parameter_count, report.max_relative_error, report.worst_group
            );
        }
        Command::Experiment { common, out } => {
            let c = common.load()?;
            let mut cfg = ExperimentConfig::from_config(&c)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let result = run_experiment(&cfg, |msg| eprintln!("{msg}"))?;
            write_atomic(&out, result.csv().as_bytes())?;
            for system in cfg.systems.iter().map(|s| s.name.as_str()) {
                for split in ["test_clean", "test_noisy"] {
                    for fusion in ["none", "density_ratio"] {
                        let m = result.mean_wer(system, split, fusion).unwrap_or(f64::NAN);
                        println!("{system:<20} {split:<11} {fusion:<14} mean WER {:.4}", m);
                    }
                }
            }
            eprintln!("{:.1}s", result.wall_time_s);
        }
    }
    Ok(())
}

/// Scores `decode` output against a split's transcripts.
fn score_hyps(path: &Path, set: &Dataset, split: &str, beam: usize) -> Result<MetricsRow> {
    let mut by_id = BTreeMap::new();
    let mut fused = false;
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let id = v["utterance_id"]
            .as_str()
            .ok_or_else(|| anyhow!("line {}: no utterance_id", n + 1))?;
        let hyp = v["hypothesis"]
            .as_str()
            .ok_or_else(|| anyhow!("line {}: no hypothesis", n + 1))?;
        fused |= !v["fused_score"].is_null();
        by_id.insert(id.to_string(), set.vocab.parse(hyp)?);
    }
    let mut refs = Vec::new();
    let mut hyps: Vec<TokenSequence> = Vec::new();
    for utt in &set.utterances {
        refs.push(utt.tokens.clone());
        hyps.push(
            by_id
                .remove(utt.id())
                .ok_or_else(|| anyhow!("no hypothesis for {}", utt.id()))?,
        );
    }
    let r = word_error_rate(&refs, &hyps)?;
    Ok(MetricsRow {
        split: split.to_string(),
        beam,
        fusion: if fused { "density_ratio" } else { "none" }.to_string(),
        wer: r.wer,
        sub: r.totals.substitutions,
        del: r.totals.deletions,
        ins: r.totals.insertions,
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
