use serde::Serialize;

use super::config::KvConfig;
use super::data::Dataset;
use crate::decode::{decode_utterance, word_error_rate, BeamConfig, Fusion, FusionWeights};
use crate::error::{Error, Result};
use crate::networks::{RnntModel, TokenSequence, Vocabulary};
use crate::tokenlm::{lm_log_prob, TokenLm};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam: BeamConfig,
    pub weights: FusionWeights,
    pub in_beam: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam: BeamConfig::default(),
            weights: FusionWeights::DISABLED,
            in_beam: false,
        }
    }
}

const DECODE_KEYS: &[&str] = &["beam", "max_alignment_length", "expected_token_rate"];
const FUSION_KEYS: &[&str] = &["mu", "lambda", "rho", "in_beam"];

impl EvalOptions {
    /// Reads `decode.*` and `fusion.*`.
    pub fn from_config(c: &KvConfig, expected_token_rate: f64) -> Result<Self> {
        c.check_known("decode", DECODE_KEYS)?;
        c.check_known("fusion", FUSION_KEYS)?;
        let d = BeamConfig::default();
        Ok(EvalOptions {
            beam: BeamConfig {
                beam_width: c.get_or("decode.beam", d.beam_width)?,
                max_alignment_length: c.get("decode.max_alignment_length")?,
                expected_token_rate: c.get_or("decode.expected_token_rate", expected_token_rate)?,
                n_best: None,
            },
            weights: FusionWeights {
                mu: c.get_or("fusion.mu", 0.0)?,
                lambda: c.get_or("fusion.lambda", 0.0)?,
                rho: c.get_or("fusion.rho", 0.0)?,
            },
            in_beam: c.get_or("fusion.in_beam", false)?,
        })
    }
}

/// One finished hypothesis with every term the fused score needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredHypothesis {
    pub tokens: TokenSequence,
    pub rnnt_log_prob: f64,
    pub src_log_prob: Option<f64>,
    pub ext_log_prob: Option<f64>,
}

impl ScoredHypothesis {
    /// Same arithmetic as `fuse_scores`, on cached LM terms.
    pub fn fused(&self, w: &FusionWeights) -> Result<f64> {
        let mut s = self.rnnt_log_prob;
        if w.mu != 0.0 {
            s -= w.mu
                * self
                    .src_log_prob
                    .ok_or_else(|| Error::Config("mu set but no source LM".into()))?;
        }
        if w.lambda != 0.0 {
            s += w.lambda
                * self
                    .ext_log_prob
                    .ok_or_else(|| Error::Config("lambda set but no external LM".into()))?;
        }
        if w.rho != 0.0 {
            s += w.rho * self.tokens.len() as f64;
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedUtterance {
    pub utterance_id: String,
    pub reference: TokenSequence,
    /// Best raw score first.
    pub nbest: Vec<ScoredHypothesis>,
}

impl DecodedUtterance {
    /// Index of the best hypothesis under `w`; ties keep the raw ranking.
    pub fn best_index(&self, w: &FusionWeights) -> Result<usize> {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, h) in self.nbest.iter().enumerate() {
            let s = h.fused(w)?;
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        Ok(best)
    }
}

fn check_vocab(what: &str, got: &Vocabulary, want: &Vocabulary) -> Result<()> {
    if got != want {
        return Err(Error::VocabMismatch(format!(
            "{what} vocabulary differs from the model's"
        )));
    }
    Ok(())
}

/// Beam search without fusion over a split, keeping every finished
/// hypothesis so fusion can rescore them.
pub fn decode_split(
    model: &RnntModel,
    data: &Dataset,
    beam: &BeamConfig,
    src_lm: Option<&TokenLm>,
    ext_lm: Option<&TokenLm>,
) -> Result<Vec<DecodedUtterance>> {
    check_vocab("data", &data.vocab, &model.vocab)?;
    for lm in src_lm.iter().chain(ext_lm.iter()) {
        check_vocab("LM", &lm.vocab, &model.vocab)?;
    }
    let beam = BeamConfig {
        n_best: Some(usize::MAX),
        ..beam.clone()
    };
    let mut out = Vec::with_capacity(data.len());
    for utt in &data.utterances {
        let res = decode_utterance(model, &utt.acoustics, &beam, None)?;
        let mut nbest = Vec::with_capacity(res.hypotheses.len());
        for h in res.hypotheses {
            nbest.push(ScoredHypothesis {
                src_log_prob: src_lm.map(|lm| lm_log_prob(lm, &h.tokens)).transpose()?,
                ext_log_prob: ext_lm.map(|lm| lm_log_prob(lm, &h.tokens)).transpose()?,
                tokens: h.tokens,
                rnnt_log_prob: h.rnnt_log_prob,
            });
        }
        out.push(DecodedUtterance {
            utterance_id: utt.id().to_string(),
            reference: utt.tokens.clone(),
            nbest,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub split: String,
    pub beam: usize,
    pub fusion: String,
    pub wer: f64,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "split,beam,fusion,wer,sub,del,ins";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{},{}",
            self.split, self.beam, self.fusion, self.wer, self.sub, self.del, self.ins
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Corpus WER of the hypotheses picked under `w`.
pub fn score_decoded(
    decoded: &[DecodedUtterance],
    w: &FusionWeights,
) -> Result<crate::decode::WerReport> {
    let mut refs = Vec::with_capacity(decoded.len());
    let mut hyps = Vec::with_capacity(decoded.len());
    for d in decoded {
        refs.push(d.reference.clone());
        hyps.push(match d.nbest.get(d.best_index(w)?) {
            Some(h) => h.tokens.clone(),
            None => TokenSequence::empty(),
        });
    }
    word_error_rate(&refs, &hyps)
}

fn row(split: &str, beam: usize, fusion: &str, r: &crate::decode::WerReport) -> MetricsRow {
    MetricsRow {
        split: split.to_string(),
        beam,
        fusion: fusion.to_string(),
        wer: r.wer,
        sub: r.totals.substitutions,
        del: r.totals.deletions,
        ins: r.totals.insertions,
    }
}

/// The split scored without and with density-ratio fusion, against the
/// dataset transcripts.
pub fn evaluate(
    model: &RnntModel,
    split: &str,
    data: &Dataset,
    options: &EvalOptions,
    src_lm: Option<&TokenLm>,
    ext_lm: Option<&TokenLm>,
) -> Result<[MetricsRow; 2]> {
    let decoded = decode_split(model, data, &options.beam, src_lm, ext_lm)?;
    let raw = score_decoded(&decoded, &FusionWeights::DISABLED)?;
    let fused = if options.in_beam && !options.weights.is_disabled() {
        let fusion = Fusion {
            src_lm,
            ext_lm,
            weights: options.weights,
            in_beam: true,
        };
        let mut refs = Vec::with_capacity(data.len());
        let mut hyps = Vec::with_capacity(data.len());
        for utt in &data.utterances {
            refs.push(utt.tokens.clone());
            hyps.push(
                decode_utterance(model, &utt.acoustics, &options.beam, Some(&fusion))?
                    .best()
                    .tokens
                    .clone(),
            );
        }
        word_error_rate(&refs, &hyps)?
    } else {
        score_decoded(&decoded, &options.weights)?
    };
    let w = options.beam.beam_width;
    Ok([
        row(split, w, "none", &raw),
        row(split, w, "density_ratio", &fused),
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrid {
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Default for FusionGrid {
    fn default() -> Self {
        FusionGrid {
            mu: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            lambda: vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.7],
            rho: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

/// Grid search for the fusion weights with the lowest WER on `decoded`.
/// Ties go to the earliest grid point, which favors small weights.
pub fn sweep_fusion(
    decoded: &[DecodedUtterance],
    grid: &FusionGrid,
) -> Result<(FusionWeights, f64)> {
    let mut best = (
        FusionWeights::DISABLED,
        score_decoded(decoded, &FusionWeights::DISABLED)?.wer,
    );
    for &mu in &grid.mu {
        for &lambda in &grid.lambda {
            for &rho in &grid.rho {
                let w = FusionWeights { mu, lambda, rho };
                let wer = score_decoded(decoded, &w)?.wer;
                if wer < best.1 {
                    best = (w, wer);
                }
            }
        }
    }
    Ok(best)
}
