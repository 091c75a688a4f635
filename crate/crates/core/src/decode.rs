//! Greedy and alignment-length synchronous beam decoding, density-ratio
//! fusion and token error rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::networks::{AcousticSequence, LstmState, RnntModel, TokenId, TokenSequence, NULL_ID};
use crate::numerics::log_add;
use crate::tokenlm::{lm_log_prob, TokenLm};
use crate::transducer::LogProbGrid;

/// Anything that yields node distributions for a prefix state at a frame.
pub trait TransducerScorer {
    type State: Clone;

    fn frames(&self) -> usize;
    fn start(&self) -> Self::State;
    fn advance(&self, state: &Self::State, token: TokenId) -> Self::State;
    fn log_probs(&self, t: usize, state: &Self::State) -> Vec<f64>;
}

/// Prediction-network state with its joint projection.
#[derive(Clone, Debug)]
pub struct PredState {
    pub lstm: LstmState,
    proj: Vec<f64>,
}

/// Scores one utterance with a model; acoustic projections are computed once.
pub struct ModelScorer<'a> {
    model: &'a RnntModel,
    enc_proj: Vec<Vec<f64>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a RnntModel, x: &AcousticSequence) -> Result<Self> {
        let enc = model.transcription_forward(x)?;
        let enc_proj = enc.iter().map(|f| model.joint.project_enc(f)).collect();
        Ok(ModelScorer { model, enc_proj })
    }
}

impl TransducerScorer for ModelScorer<'_> {
    type State = PredState;

    fn frames(&self) -> usize {
        self.enc_proj.len()
    }

    fn start(&self) -> PredState {
        let (g, lstm) = self.model.prediction.start();
        PredState {
            proj: self.model.joint.project_pred(&g),
            lstm,
        }
    }

    fn advance(&self, state: &PredState, token: TokenId) -> PredState {
        let (g, lstm) = self.model.prediction.step(token, &state.lstm);
        PredState {
            proj: self.model.joint.project_pred(&g),
            lstm,
        }
    }

    fn log_probs(&self, t: usize, state: &PredState) -> Vec<f64> {
        self.model.joint.node(&self.enc_proj[t], &state.proj).1
    }
}

/// A fixed lattice whose node distributions depend only on `(t, u)`.
/// Beyond row `U` every node is certain ∅.
pub struct GridScorer<'a> {
    pub grid: &'a LogProbGrid,
}

impl TransducerScorer for GridScorer<'_> {
    type State = usize;

    fn frames(&self) -> usize {
        self.grid.frames()
    }

    fn start(&self) -> usize {
        0
    }

    fn advance(&self, state: &usize, _token: TokenId) -> usize {
        state + 1
    }

    fn log_probs(&self, t: usize, u: &usize) -> Vec<f64> {
        if *u <= self.grid.labels() {
            self.grid.node(t, *u).to_vec()
        } else {
            let mut lp = vec![f64::NEG_INFINITY; self.grid.outputs()];
            lp[NULL_ID as usize] = 0.0;
            lp
        }
    }
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in lp.iter().enumerate() {
        if *v > lp[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutput {
    pub tokens: TokenSequence,
    /// Log-probability of the single alignment taken.
    pub path_log_prob: f64,
}

/// Frame-synchronous argmax decoding. After `max_symbols_per_frame` tokens
/// on one frame, ∅ is forced (and scored).
pub fn greedy_decode<S: TransducerScorer>(
    scorer: &S,
    max_symbols_per_frame: usize,
) -> Result<GreedyOutput> {
    if max_symbols_per_frame == 0 {
        return Err(contract("greedy decoding needs max_symbols_per_frame >= 1"));
    }
    let mut state = scorer.start();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for t in 0..scorer.frames() {
        let mut emitted = 0;
        loop {
            let lp = scorer.log_probs(t, &state);
            let k = argmax(&lp);
            if k == NULL_ID as usize || emitted == max_symbols_per_frame {
                score += lp[NULL_ID as usize];
                break;
            }
            score += lp[k];
            tokens.push(k as TokenId);
            state = scorer.advance(&state, k as TokenId);
            emitted += 1;
        }
    }
    Ok(GreedyOutput {
        tokens: tokens.into(),
        path_log_prob: score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub mu: f64,
    pub lambda: f64,
    pub rho: f64,
}

impl FusionWeights {
    pub const DISABLED: FusionWeights = FusionWeights {
        mu: 0.0,
        lambda: 0.0,
        rho: 0.0,
    };

    pub fn is_disabled(&self) -> bool {
        self.mu == 0.0 && self.lambda == 0.0 && self.rho == 0.0
    }
}

/// `log Pr(y|x) − μ log Pr_src(y) + λ log Pr_ext(y) + ρ|y|`. Terms with a
/// zero weight are skipped, so disabled fusion returns its input unchanged.
pub fn fuse_scores(
    rnnt_log_prob: f64,
    y: &[TokenId],
    src_lm: Option<&TokenLm>,
    ext_lm: Option<&TokenLm>,
    w: &FusionWeights,
) -> Result<f64> {
    fuse_with(rnnt_log_prob, y.len(), w, |which| {
        let lm = match which {
            Which::Src => src_lm,
            Which::Ext => ext_lm,
        };
        let lm = lm
            .ok_or_else(|| Error::Config(format!("fusion weight set but no {which:?} LM given")))?;
        lm_log_prob(lm, y)
    })
}

#[derive(Debug, Clone, Copy)]
enum Which {
    Src,
    Ext,
}

fn fuse_with(
    rnnt: f64,
    len: usize,
    w: &FusionWeights,
    mut lm: impl FnMut(Which) -> Result<f64>,
) -> Result<f64> {
    let mut s = rnnt;
    if w.mu != 0.0 {
        s -= w.mu * lm(Which::Src)?;
    }
    if w.lambda != 0.0 {
        s += w.lambda * lm(Which::Ext)?;
    }
    if w.rho != 0.0 {
        s += w.rho * len as f64;
    }
    Ok(s)
}

/// Language models and weights for density-ratio fusion.
#[derive(Clone, Copy, Debug)]
pub struct Fusion<'a> {
    pub src_lm: Option<&'a TokenLm>,
    pub ext_lm: Option<&'a TokenLm>,
    pub weights: FusionWeights,
    /// Apply fusion while pruning instead of only to finished hypotheses.
    pub in_beam: bool,
}

impl Fusion<'_> {
    fn score(&self, rnnt: f64, y: &[TokenId]) -> Result<f64> {
        fuse_scores(rnnt, y, self.src_lm, self.ext_lm, &self.weights)
    }

    /// Prefix score: the LM terms without end-of-sequence.
    fn prefix_score(&self, rnnt: f64, y: &[TokenId]) -> Result<f64> {
        fuse_with(rnnt, y.len(), &self.weights, |which| {
            let lm = match which {
                Which::Src => self.src_lm,
                Which::Ext => self.ext_lm,
            }
            .ok_or_else(|| Error::Config(format!("fusion weight set but no {which:?} LM given")))?;
            let steps = lm.step_scores(y)?;
            Ok(steps[..y.len()].iter().sum())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Explicit cap on `T + U`; if absent, `T + 2·⌈T·expected_token_rate⌉`.
    pub max_alignment_length: Option<usize>,
    /// Expected tokens per frame, used for the default cap.
    pub expected_token_rate: f64,
    /// Finished hypotheses returned; `beam_width` if absent.
    pub n_best: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 8,
            max_alignment_length: None,
            expected_token_rate: 0.5,
            n_best: None,
        }
    }
}

impl BeamConfig {
    pub fn with_width(beam_width: usize) -> Self {
        BeamConfig {
            beam_width,
            ..BeamConfig::default()
        }
    }

    pub fn alignment_cap(&self, frames: usize) -> usize {
        self.max_alignment_length
            .unwrap_or(frames + 2 * (frames as f64 * self.expected_token_rate).ceil() as usize)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: TokenSequence,
    pub rnnt_log_prob: f64,
    /// Ranking score: fused if fusion is active, otherwise `rnnt_log_prob`.
    pub score: f64,
    pub pred_state: S,
    pub alignment_length: usize,
    /// Frames consumed.
    pub frame: usize,
}

#[derive(Clone, Debug)]
pub struct BeamOutput<S> {
    /// Best first.
    pub hypotheses: Vec<Hypothesis<S>>,
    /// No hypothesis completed within the alignment cap; `hypotheses` holds
    /// the best partial ones instead.
    pub truncated: bool,
}

impl<S> BeamOutput<S> {
    pub fn best(&self) -> &Hypothesis<S> {
        &self.hypotheses[0]
    }
}

struct Candidate<'p, S> {
    rnnt: f64,
    frame: usize,
    parent: &'p S,
    /// `None` for a ∅ step, which keeps the parent state.
    token: Option<TokenId>,
}

fn rank<S>(hyps: &mut [Hypothesis<S>]) {
    hyps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Alignment-length synchronous beam search.
///
/// Every hypothesis in the beam at step `i` has consumed `i` alignment
/// symbols. Each step extends every hypothesis by ∅ (next frame) and by
/// every real token (same frame), merges extensions with identical token
/// sequences by adding their probabilities, and keeps the `beam_width` best.
/// ∅ on the last frame completes a hypothesis.
pub fn beam_search_alsd<S: TransducerScorer>(
    scorer: &S,
    config: &BeamConfig,
    fusion: Option<&Fusion>,
) -> Result<BeamOutput<S::State>> {
    if config.beam_width == 0 {
        return Err(contract("beam width must be at least 1"));
    }
    let frames = scorer.frames();
    let cap = config.alignment_cap(frames);
    let in_beam = fusion.filter(|f| f.in_beam && !f.weights.is_disabled());
    let prune_score = |rnnt: f64, tokens: &[TokenId]| -> Result<f64> {
        match in_beam {
            Some(f) => f.prefix_score(rnnt, tokens),
            None => Ok(rnnt),
        }
    };

    let mut beam = vec![Hypothesis {
        tokens: TokenSequence::empty(),
        rnnt_log_prob: 0.0,
        score: 0.0,
        pred_state: scorer.start(),
        alignment_length: 0,
        frame: 0,
    }];
    let mut finished: Vec<Hypothesis<S::State>> = Vec::new();
    let mut last_live = Vec::new();

    for step in 0..cap {
        if beam.is_empty() {
            break;
        }
        let mut ended: BTreeMap<Vec<TokenId>, (f64, &S::State)> = BTreeMap::new();
        let mut live: BTreeMap<Vec<TokenId>, Candidate<S::State>> = BTreeMap::new();
        for hyp in &beam {
            let lp = scorer.log_probs(hyp.frame, &hyp.pred_state);
            let null_score = hyp.rnnt_log_prob + lp[NULL_ID as usize];
            if hyp.frame + 1 == frames {
                let e = ended
                    .entry(hyp.tokens.to_vec())
                    .or_insert((f64::NEG_INFINITY, &hyp.pred_state));
                e.0 = log_add(e.0, null_score);
            } else if step + 1 + (frames - hyp.frame - 1) <= cap {
                merge(
                    &mut live,
                    hyp.tokens.to_vec(),
                    Candidate {
                        rnnt: null_score,
                        frame: hyp.frame + 1,
                        parent: &hyp.pred_state,
                        token: None,
                    },
                );
            }
            // A token step leaves `frames - frame` nulls still to come.
            if step + 1 + (frames - hyp.frame) <= cap {
                for (k, &l) in lp.iter().enumerate().skip(1) {
                    let mut tokens = hyp.tokens.to_vec();
                    tokens.push(k as TokenId);
                    merge(
                        &mut live,
                        tokens,
                        Candidate {
                            rnnt: hyp.rnnt_log_prob + l,
                            frame: hyp.frame,
                            parent: &hyp.pred_state,
                            token: Some(k as TokenId),
                        },
                    );
                }
            }
        }
        for (tokens, (rnnt, state)) in ended {
            if rnnt == f64::NEG_INFINITY {
                continue;
            }
            let score = match fusion {
                Some(f) => f.score(rnnt, &tokens)?,
                None => rnnt,
            };
            finished.push(Hypothesis {
                tokens: tokens.into(),
                rnnt_log_prob: rnnt,
                score,
                pred_state: state.clone(),
                alignment_length: step + 1,
                frame: frames,
            });
        }

        let mut scored = Vec::with_capacity(live.len());
        for (tokens, c) in live {
            if c.rnnt == f64::NEG_INFINITY {
                continue;
            }
            let s = prune_score(c.rnnt, &tokens)?;
            scored.push((s, tokens, c));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.truncate(config.beam_width);
        let next: Vec<Hypothesis<S::State>> = scored
            .into_iter()
            .map(|(score, tokens, c)| Hypothesis {
                pred_state: match c.token {
                    Some(k) => scorer.advance(c.parent, k),
                    None => c.parent.clone(),
                },
                tokens: tokens.into(),
                rnnt_log_prob: c.rnnt,
                score,
                alignment_length: step + 1,
                frame: c.frame,
            })
            .collect();
        if next.is_empty() {
            last_live = std::mem::take(&mut beam);
        } else {
            beam = next;
        }
    }

    if finished.is_empty() {
        let mut partial = if beam.is_empty() { last_live } else { beam };
        rank(&mut partial);
        partial.truncate(config.beam_width);
        if partial.is_empty() {
            return Err(contract("beam search produced no hypotheses"));
        }
        return Ok(BeamOutput {
            hypotheses: partial,
            truncated: true,
        });
    }
    rank(&mut finished);
    finished.truncate(config.n_best.unwrap_or(config.beam_width));
    Ok(BeamOutput {
        hypotheses: finished,
        truncated: false,
    })
}

fn merge<'p, S>(
    map: &mut BTreeMap<Vec<TokenId>, Candidate<'p, S>>,
    tokens: Vec<TokenId>,
    c: Candidate<'p, S>,
) {
    match map.get_mut(&tokens) {
        Some(existing) => existing.rnnt = log_add(existing.rnnt, c.rnnt),
        None => {
            map.insert(tokens, c);
        }
    }
}

/// Beam search with a model over one utterance.
pub fn decode_utterance(
    model: &RnntModel,
    x: &AcousticSequence,
    config: &BeamConfig,
    fusion: Option<&Fusion>,
) -> Result<BeamOutput<PredState>> {
    beam_search_alsd(&ModelScorer::new(model, x)?, config, fusion)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_length += o.reference_length;
    }
}

/// Minimal unit-cost edit alignment. Among minimal alignments the backtrace
/// prefers a diagonal step (match or substitution), then a deletion, then an
/// insertion.
pub fn edit_counts(reference: &[TokenId], hypothesis: &[TokenId]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        reference_length: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(differ) {
                c.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub wer: f64,
    pub totals: EditCounts,
    pub per_pair: Vec<EditCounts>,
}

/// Corpus token error rate: summed edits over summed reference lengths.
pub fn word_error_rate(refs: &[TokenSequence], hyps: &[TokenSequence]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let per_pair: Vec<EditCounts> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_counts(r, h))
        .collect();
    let mut totals = EditCounts::default();
    for c in &per_pair {
        totals.add(c);
    }
    if totals.reference_length == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(WerReport {
        wer: totals.errors() as f64 / totals.reference_length as f64,
        totals,
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ModelConfig, Vocabulary};
    use crate::numerics::{Matrix, SeededRng};
    use crate::tokenlm::{CorpusTag, LmShape};
    use crate::transducer::{build_lattice, rnnt_log_likelihood};

    fn tiny_model(seed: u64, v: usize) -> RnntModel {
        let cfg = ModelConfig {
            feature_dim: 2,
            trans_layers: 1,
            trans_hidden: 3,
            pred_hidden: 3,
            embed_dim: 3,
            joint_dim: 4,
        };
        let mut m = RnntModel::init(cfg, Vocabulary::letters(v), seed);
        for x in m.joint.w_out.data_mut() {
            *x *= 3.0;
        }
        m
    }

    /// Every weight uniform in `±2`, so node distributions are far from flat.
    fn random_model(seed: u64, v: usize) -> RnntModel {
        let mut m = tiny_model(seed, v);
        let mut rng = SeededRng::new(seed ^ 0x5eed);
        for t in crate::numerics::ParamSet::tensors_mut(&mut m) {
            for x in t.data_mut() {
                *x = rng.uniform(-2.0, 2.0);
            }
        }
        m
    }

    fn frames(rng: &mut SeededRng, t: usize, d: usize) -> AcousticSequence {
        AcousticSequence::new("x", Matrix::from_fn(t, d, |_, _| rng.uniform(-1.0, 1.0))).unwrap()
    }

    fn one_hot_grid() -> LogProbGrid {
        // T = 2, encodes "ab": a then b on frame 0, then ∅, ∅.
        let z = f64::NEG_INFINITY;
        let row = |k: usize| -> Vec<f64> { (0..3).map(|i| if i == k { 0.0 } else { z }).collect() };
        let mut data = Vec::new();
        for (_t, u) in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
            data.extend(row([1, 2, 0][u]));
        }
        LogProbGrid::new(2, 2, 3, data).unwrap()
    }

    #[test]
    fn certain_null_model_decodes_nothing() {
        let mut m = RnntModel::zeros(tiny_model(1, 3).config, Vocabulary::letters(3));
        m.joint.b.fill(1.0);
        for c in 0..4 {
            m.joint.w_out.set(0, c, 1000.0);
        }
        let x = frames(&mut SeededRng::new(1), 4, 2);
        let scorer = ModelScorer::new(&m, &x).unwrap();
        assert!(greedy_decode(&scorer, 3).unwrap().tokens.is_empty());
        let out = beam_search_alsd(&scorer, &BeamConfig::default(), None).unwrap();
        assert!(out.best().tokens.is_empty());
    }

    #[test]
    fn one_hot_lattice_forces_the_sequence() {
        let grid = one_hot_grid();
        let scorer = GridScorer { grid: &grid };
        let g = greedy_decode(&scorer, 4).unwrap();
        assert_eq!(g.tokens.to_vec(), vec![1, 2]);
        assert_eq!(g.path_log_prob, 0.0);
        let out = beam_search_alsd(&scorer, &BeamConfig::with_width(4), None).unwrap();
        assert!(!out.truncated);
        assert_eq!(out.best().tokens.to_vec(), vec![1, 2]);
        assert_eq!(out.best().rnnt_log_prob, 0.0);
        assert_eq!(out.best().alignment_length, 4);
    }

    #[test]
    fn symbol_cap_forces_null() {
        let grid = one_hot_grid();
        let g = greedy_decode(&GridScorer { grid: &grid }, 1).unwrap();
        assert_eq!(g.tokens.to_vec(), vec![1, 2]);
        assert_eq!(g.path_log_prob, f64::NEG_INFINITY);
        assert!(greedy_decode(&GridScorer { grid: &grid }, 0).is_err());
    }

    /// Every token sequence up to `u_max`, scored by the lattice objective.
    fn exhaustive_best(
        model: &RnntModel,
        x: &AcousticSequence,
        u_max: usize,
    ) -> (Vec<TokenId>, f64) {
        let v = model.vocab.size() as TokenId;
        let mut seqs: Vec<Vec<TokenId>> = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..u_max {
            let mut next = Vec::new();
            for s in &frontier {
                for k in 1..=v {
                    let mut e: Vec<TokenId> = s.clone();
                    e.push(k);
                    next.push(e);
                }
            }
            seqs.extend(next.iter().cloned());
            frontier = next;
        }
        let mut best = (vec![], f64::NEG_INFINITY);
        for s in seqs {
            let y: TokenSequence = s.clone().into();
            let (lat, _) = build_lattice(model, x, &y, &y).unwrap();
            let ll = rnnt_log_likelihood(&lat);
            if ll > best.1 {
                best = (s, ll);
            }
        }
        best
    }

    #[test]
    fn exhaustive_beam_finds_the_global_argmax() {
        let mut rng = SeededRng::new(3);
        for seed in 0..10 {
            let model = random_model(seed, 2);
            let x = frames(&mut rng, 3, 2);
            let cfg = BeamConfig {
                beam_width: 64,
                max_alignment_length: Some(3 + 2),
                ..BeamConfig::default()
            };
            let out = decode_utterance(&model, &x, &cfg, None).unwrap();
            let (tokens, ll) = exhaustive_best(&model, &x, 2);
            assert_eq!(out.best().tokens.to_vec(), tokens);
            assert!((out.best().rnnt_log_prob - ll).abs() < 1e-10);
        }
    }

    #[test]
    fn merged_scores_are_total_sequence_probabilities() {
        let mut rng = SeededRng::new(4);
        let model = tiny_model(5, 2);
        let x = frames(&mut rng, 3, 2);
        let cfg = BeamConfig {
            beam_width: 64,
            max_alignment_length: Some(5),
            ..BeamConfig::default()
        };
        let out = decode_utterance(&model, &x, &cfg, None).unwrap();
        for h in &out.hypotheses {
            let (lat, _) = build_lattice(&model, &x, &h.tokens, &h.tokens).unwrap();
            assert!((h.rnnt_log_prob - rnnt_log_likelihood(&lat)).abs() < 1e-10);
            assert!(h.rnnt_log_prob <= 0.0);
            assert_eq!(h.alignment_length, h.tokens.len() + 3);
        }
    }

    #[test]
    fn no_width_beats_the_exhaustive_beam() {
        // Pruned search is not monotone in width in general, but every
        // finished score is bounded by the best total sequence probability.
        let mut rng = SeededRng::new(6);
        for seed in 0..20 {
            let model = random_model(seed, 2);
            let x = frames(&mut rng, 3, 2);
            let scorer = ModelScorer::new(&model, &x).unwrap();
            let cap = BeamConfig {
                beam_width: 4096,
                max_alignment_length: Some(3 + 6),
                ..BeamConfig::default()
            };
            let top = beam_search_alsd(&scorer, &cap, None)
                .unwrap()
                .best()
                .rnnt_log_prob;
            for w in [1, 2, 4, 8, 16] {
                let c = BeamConfig {
                    beam_width: w,
                    ..cap.clone()
                };
                let out = beam_search_alsd(&scorer, &c, None).unwrap();
                for h in &out.hypotheses {
                    assert!(h.rnnt_log_prob <= top + 1e-12, "width {w}");
                }
            }
            let g = greedy_decode(&scorer, 2).unwrap();
            assert!(g.path_log_prob <= top + 1e-12);
        }
    }

    #[test]
    fn tight_cap_truncates() {
        let grid = one_hot_grid();
        let cfg = BeamConfig {
            beam_width: 2,
            max_alignment_length: Some(1),
            ..BeamConfig::default()
        };
        let out = beam_search_alsd(&GridScorer { grid: &grid }, &cfg, None).unwrap();
        assert!(out.truncated);
        assert!(out.best().tokens.is_empty());
        let cfg = BeamConfig {
            max_alignment_length: Some(3),
            ..cfg
        };
        let out = beam_search_alsd(&GridScorer { grid: &grid }, &cfg, None).unwrap();
        assert!(out.truncated);
        assert_eq!(out.best().tokens.to_vec(), vec![1]);
    }

    fn lm(v: usize, seed: u64) -> TokenLm {
        TokenLm::init(
            Vocabulary::letters(v),
            LmShape {
                embed_dim: 2,
                hidden: 3,
                corpus_tag: CorpusTag::TrainTranscripts,
            },
            seed,
        )
    }

    #[test]
    fn disabled_fusion_is_exact() {
        let src = lm(3, 1);
        for r in [-0.0, 0.0, -1.25, -7.0e-9] {
            let s =
                fuse_scores(r, &[1, 2], Some(&src), Some(&src), &FusionWeights::DISABLED).unwrap();
            assert_eq!(s.to_bits(), r.to_bits());
        }
        assert!(fuse_scores(
            -1.0,
            &[1],
            None,
            None,
            &FusionWeights {
                mu: 0.5,
                lambda: 0.0,
                rho: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn length_reward_isolated() {
        let w = FusionWeights {
            mu: 0.0,
            lambda: 0.0,
            rho: 0.7,
        };
        let a = fuse_scores(-3.0, &[1, 2, 3], None, None, &w).unwrap();
        let b = fuse_scores(-3.0, &[1], None, None, &w).unwrap();
        assert!((a - b - 0.7 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_ranks_by_hand_formula() {
        let src = lm(3, 2);
        let ext = lm(3, 3);
        let w = FusionWeights {
            mu: 0.3,
            lambda: 0.6,
            rho: 0.2,
        };
        let hyps: [(f64, Vec<TokenId>); 3] =
            [(-1.0, vec![1]), (-1.2, vec![2, 3]), (-0.9, vec![3, 3, 1])];
        let mut by_hand: Vec<(f64, usize)> = hyps
            .iter()
            .enumerate()
            .map(|(i, (r, y))| {
                let s = src.step_scores(y).unwrap().iter().sum::<f64>();
                let e = ext.step_scores(y).unwrap().iter().sum::<f64>();
                (r - 0.3 * s + 0.6 * e + 0.2 * y.len() as f64, i)
            })
            .collect();
        let mut fused: Vec<(f64, usize)> = hyps
            .iter()
            .enumerate()
            .map(|(i, (r, y))| (fuse_scores(*r, y, Some(&src), Some(&ext), &w).unwrap(), i))
            .collect();
        by_hand.sort_by(|a, b| b.0.total_cmp(&a.0));
        fused.sort_by(|a, b| b.0.total_cmp(&a.0));
        assert_eq!(
            by_hand.iter().map(|p| p.1).collect::<Vec<_>>(),
            fused.iter().map(|p| p.1).collect::<Vec<_>>()
        );
        for (h, f) in by_hand.iter().zip(&fused) {
            assert!((h.0 - f.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_modes_share_raw_scores() {
        let mut rng = SeededRng::new(7);
        let model = tiny_model(8, 3);
        let src = lm(3, 4);
        let ext = lm(3, 5);
        let x = frames(&mut rng, 4, 2);
        let w = FusionWeights {
            mu: 0.2,
            lambda: 0.5,
            rho: 0.1,
        };
        for in_beam in [false, true] {
            let f = Fusion {
                src_lm: Some(&src),
                ext_lm: Some(&ext),
                weights: w,
                in_beam,
            };
            let out = decode_utterance(&model, &x, &BeamConfig::default(), Some(&f)).unwrap();
            for h in &out.hypotheses {
                let want =
                    fuse_scores(h.rnnt_log_prob, &h.tokens, Some(&src), Some(&ext), &w).unwrap();
                assert!((h.score - want).abs() < 1e-12);
            }
            for pair in out.hypotheses.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
        }
        let f0 = Fusion {
            src_lm: Some(&src),
            ext_lm: Some(&ext),
            weights: FusionWeights::DISABLED,
            in_beam: true,
        };
        let plain = decode_utterance(&model, &x, &BeamConfig::default(), None).unwrap();
        let fused = decode_utterance(&model, &x, &BeamConfig::default(), Some(&f0)).unwrap();
        for (a, b) in plain.hypotheses.iter().zip(&fused.hypotheses) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn wer_examples() {
        let r: Vec<TokenSequence> = vec![vec![1, 2, 3].into()];
        let h: Vec<TokenSequence> = vec![vec![1, 4, 3].into()];
        let rep = word_error_rate(&r, &h).unwrap();
        assert_eq!(rep.totals.substitutions, 1);
        assert!((rep.wer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(word_error_rate(&r, &r).unwrap().wer, 0.0);
        assert!(matches!(
            word_error_rate(&[TokenSequence::empty()], &[vec![1].into()]),
            Err(Error::UndefinedRate)
        ));
        assert!(word_error_rate(&r, &[]).is_err());
    }

    #[test]
    fn wer_tie_breaking() {
        // "a b" vs "b": deleting a is the only minimal alignment.
        let c = edit_counts(&[1, 2], &[2]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 1, 0));
        // "a b" vs "c": one substitution plus one deletion either way; the
        // diagonal step is taken first from the end.
        let c = edit_counts(&[1, 2], &[3]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 1, 0));
        let c = edit_counts(&[], &[1, 2]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 0, 2));
    }

    fn plain_levenshtein(a: &[TokenId], b: &[TokenId]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y))
                    .min(prev[j + 1] + 1)
                    .min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn edit_counts_match_independent_distance() {
        let mut rng = SeededRng::new(9);
        for _ in 0..200 {
            let a: Vec<TokenId> = (0..rng.below(8))
                .map(|_| 1 + rng.below(4) as TokenId)
                .collect();
            let b: Vec<TokenId> = (0..rng.below(8))
                .map(|_| 1 + rng.below(4) as TokenId)
                .collect();
            let c = edit_counts(&a, &b);
            assert_eq!(c.errors(), plain_levenshtein(&a, &b));
            assert_eq!(c.reference_length + c.insertions - c.deletions, b.len());
        }
    }
}
