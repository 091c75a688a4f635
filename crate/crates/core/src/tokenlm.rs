//! LSTM token language models over the RNNT vocabulary.
//!
//! Inputs are `[bos, y_1, …, y_U]` (embedding rows as in the prediction
//! network); outputs are distributions over `V + 1` symbols where index 0 is
//! end-of-sequence and `1..=V` are the real tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, domain, Result};
use crate::networks::{
    Checkpoint, CheckpointKind, LstmState, LstmStepCache, LstmWeights, TokenId, TokenSequence,
    Vocabulary,
};
use crate::numerics::{
    adamw_step, log_softmax_in_place, AdamWConfig, LrSchedule, Matrix, OptimizerState, ParamSet,
    SeededRng,
};

/// Output index of end-of-sequence.
pub const EOS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusTag {
    TrainTranscripts,
    TargetDomain,
}

impl std::str::FromStr for CorpusTag {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_transcripts" => Ok(CorpusTag::TrainTranscripts),
            "target_domain" => Ok(CorpusTag::TargetDomain),
            other => Err(crate::Error::Config(format!(
                "unknown corpus tag {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmShape {
    pub embed_dim: usize,
    pub hidden: usize,
    pub corpus_tag: CorpusTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLm {
    pub vocab: Vocabulary,
    pub shape: LmShape,
    pub embedding: Matrix,
    pub lstm: LstmWeights,
    pub w_out: Matrix,
    pub bias: Matrix,
}

/// Recurrent state plus the next-symbol log-distribution it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub lstm: LstmState,
    pub log_probs: Vec<f64>,
}

impl TokenLm {
    pub fn zeros(vocab: Vocabulary, shape: LmShape) -> Self {
        TokenLm {
            embedding: Matrix::zeros(vocab.embedding_rows(), shape.embed_dim),
            lstm: LstmWeights::zeros(shape.embed_dim, shape.hidden),
            w_out: Matrix::zeros(vocab.output_size(), shape.hidden),
            bias: Matrix::zeros(vocab.output_size(), 1),
            vocab,
            shape,
        }
    }

    pub fn init(vocab: Vocabulary, shape: LmShape, seed: u64) -> Self {
        let mut rng = SeededRng::for_stream(seed, "init.tokenlm", 0, "");
        let e_bound = 1.0 / (shape.embed_dim as f64).sqrt();
        let embedding = Matrix::from_fn(vocab.embedding_rows(), shape.embed_dim, |r, _| {
            if r == 0 {
                0.0
            } else {
                rng.uniform(-e_bound, e_bound)
            }
        });
        let lstm = LstmWeights::init(shape.embed_dim, shape.hidden, &mut rng);
        let o_bound = 1.0 / (shape.hidden as f64).sqrt();
        let w_out = Matrix::from_fn(vocab.output_size(), shape.hidden, |_, _| {
            rng.uniform(-o_bound, o_bound)
        });
        TokenLm {
            bias: Matrix::zeros(vocab.output_size(), 1),
            embedding,
            lstm,
            w_out,
            vocab,
            shape,
        }
    }

    pub fn zeros_like(&self) -> Self {
        TokenLm::zeros(self.vocab.clone(), self.shape)
    }

    fn distribution(&self, hidden: &[f64]) -> Vec<f64> {
        let mut z = self.bias.data().to_vec();
        self.w_out.matvec_acc(hidden, &mut z);
        log_softmax_in_place(&mut z);
        z
    }

    fn feed(&self, token: TokenId, state: &LstmState) -> LmState {
        let (next, _) = self
            .lstm
            .forward_step(self.embedding.row(token as usize), state);
        LmState {
            log_probs: self.distribution(&next.hidden),
            lstm: next,
        }
    }

    /// State after consuming only the start marker.
    pub fn start(&self) -> LmState {
        self.feed(self.vocab.bos_id(), &LstmState::zeros(self.shape.hidden))
    }

    pub fn advance(&self, state: &LmState, token: TokenId) -> Result<LmState> {
        if !self.vocab.is_real_token(token) {
            return Err(contract(format!(
                "lm input token {token} is not a real token"
            )));
        }
        Ok(self.feed(token, &state.lstm))
    }

    pub fn state_after(&self, history: &[TokenId]) -> Result<LmState> {
        let mut s = self.start();
        for &y in history {
            s = self.advance(&s, y)?;
        }
        Ok(s)
    }

    /// `[log p(y_1 | bos), …, log p(y_U | y_{<U}), log p(eos | y)]`.
    pub fn step_scores(&self, y: &[TokenId]) -> Result<Vec<f64>> {
        let mut s = self.start();
        let mut out = Vec::with_capacity(y.len() + 1);
        for &tok in y {
            if !self.vocab.is_real_token(tok) {
                return Err(contract(format!(
                    "lm input token {tok} is not a real token"
                )));
            }
            out.push(s.log_probs[tok as usize]);
            s = self.feed(tok, &s.lstm);
        }
        out.push(s.log_probs[EOS]);
        Ok(out)
    }

    /// Negative log-likelihood of one sequence (with eos) and its gradient.
    pub fn loss_and_grad(&self, y: &[TokenId]) -> Result<(f64, TokenLm)> {
        let bos = self.vocab.bos_id();
        if let Some(bad) = y.iter().find(|&&t| !self.vocab.is_real_token(t)) {
            return Err(contract(format!(
                "lm training token {bad} is not a real token"
            )));
        }
        let mut inputs = Vec::with_capacity(y.len() + 1);
        inputs.push(bos);
        inputs.extend_from_slice(y);
        let refs: Vec<&[f64]> = inputs
            .iter()
            .map(|&t| self.embedding.row(t as usize))
            .collect();
        let (hiddens, caches): (Vec<Vec<f64>>, Vec<LstmStepCache>) = self.lstm.run_sequence(&refs);
        let mut grads = self.zeros_like();
        let mut nll = 0.0;
        let mut d_hidden = Vec::with_capacity(hiddens.len());
        for (s, h) in hiddens.iter().enumerate() {
            let target = if s < y.len() { y[s] as usize } else { EOS };
            let lp = self.distribution(h);
            nll -= lp[target];
            let mut dz: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            dz[target] -= 1.0;
            grads.w_out.add_outer(&dz, h);
            for (b, d) in grads.bias.data_mut().iter_mut().zip(&dz) {
                *b += d;
            }
            let mut dh = vec![0.0; self.shape.hidden];
            self.w_out.tmatvec_acc(&dz, &mut dh);
            d_hidden.push(dh);
        }
        let d_inputs = self
            .lstm
            .backward_sequence(&caches, &d_hidden, &mut grads.lstm);
        for (&tok, d) in inputs.iter().zip(&d_inputs) {
            for (e, g) in grads.embedding.row_mut(tok as usize).iter_mut().zip(d) {
                *e += g;
            }
        }
        Ok((nll, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(self.shape).expect("lm shape serializes");
        Checkpoint::capture(CheckpointKind::TokenLm, &self.vocab, config, self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::TokenLm)?;
        let shape: LmShape = serde_json::from_value(ckpt.config.clone())?;
        let mut lm = TokenLm::zeros(ckpt.vocabulary.clone(), shape);
        ckpt.restore_into(&mut lm)?;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TokenLm::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl ParamSet for TokenLm {
    fn tensors(&self) -> Vec<&Matrix> {
        let [a, b, c] = self.lstm.tensors();
        vec![&self.embedding, a, b, c, &self.w_out, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let [a, b, c] = self.lstm.tensors_mut();
        vec![
            &mut self.embedding,
            a,
            b,
            c,
            &mut self.w_out,
            &mut self.bias,
        ]
    }

    fn names(&self) -> Vec<String> {
        [
            "lm.embedding",
            "lm.lstm.w_ih",
            "lm.lstm.w_hh",
            "lm.lstm.bias",
            "lm.W_out",
            "lm.b",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }
}

/// `Σ_u log p(y_u | y_{<u}) + log p(eos | y)`.
pub fn lm_log_prob(lm: &TokenLm, y: &[TokenId]) -> Result<f64> {
    Ok(lm.step_scores(y)?.iter().sum())
}

/// The `k` most probable next real tokens, descending, ties to the lower id.
pub fn lm_topk(lm: &TokenLm, state: &LmState, k: usize) -> Result<Vec<TokenId>> {
    let v = lm.vocab.size();
    if k < 1 || k > v {
        return Err(domain(format!("top-k needs 1 <= k <= {v}, got {k}")));
    }
    let mut ids: Vec<TokenId> = (1..=v as TokenId).collect();
    ids.sort_by(|&a, &b| {
        state.log_probs[b as usize]
            .total_cmp(&state.log_probs[a as usize])
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    Ok(ids)
}

/// Per-symbol perplexity of `corpus` (eos counted as a symbol).
pub fn lm_perplexity(lm: &TokenLm, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(domain("perplexity of an empty corpus"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for y in corpus {
        nll -= lm_log_prob(lm, y)?;
        count += y.len() + 1;
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub corpus_tag: CorpusTag,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            embed_dim: 16,
            hidden: 32,
            corpus_tag: CorpusTag::TrainTranscripts,
            batch_size: 16,
            schedule: LrSchedule {
                lr_start: 5e-3,
                lr_peak: 1e-2,
                warmup_epochs: 2,
                hold_epochs: 8,
                decay_factor: std::f64::consts::FRAC_1_SQRT_2,
                total_epochs: 20,
            },
            optimizer: AdamWConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmTrainReport {
    /// Mean per-sequence negative log-likelihood over each epoch's updates.
    pub losses: Vec<f64>,
    /// Training-corpus perplexity after each epoch.
    pub perplexities: Vec<f64>,
    /// Set when the loss failed to fall in each of the first three epochs.
    pub schedule_warning: bool,
}

pub fn lm_train(
    corpus: &[TokenSequence],
    vocab: &Vocabulary,
    config: &LmTrainConfig,
) -> Result<(TokenLm, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(domain("cannot train a language model on an empty corpus"));
    }
    if config.batch_size == 0 {
        return Err(domain("lm batch size must be at least 1"));
    }
    config.schedule.validate()?;
    for y in corpus {
        y.check(vocab)?;
    }
    let shape = LmShape {
        embed_dim: config.embed_dim,
        hidden: config.hidden,
        corpus_tag: config.corpus_tag,
    };
    let mut lm = TokenLm::init(vocab.clone(), shape, config.seed);
    let mut opt = OptimizerState::new(&lm, config.optimizer);
    let mut losses = Vec::new();
    let mut perplexities = Vec::new();
    for epoch in 1..=config.schedule.total_epochs {
        let lr = config.schedule.lr_at_epoch(epoch)?;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        SeededRng::for_stream(config.seed, "lm.shuffle", epoch as u64, "").shuffle(&mut order);
        let mut epoch_nll = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = lm.zeros_like();
            for &i in batch {
                let (nll, g) = lm.loss_and_grad(&corpus[i])?;
                epoch_nll += nll;
                for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.axpy(1.0, part);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for m in grads.tensors_mut() {
                m.scale(inv);
            }
            adamw_step(&mut lm, &grads, &mut opt, lr)?;
        }
        losses.push(epoch_nll / corpus.len() as f64);
        perplexities.push(lm_perplexity(&lm, corpus)?);
    }
    let schedule_warning = losses.len() >= 3 && !(losses[1] < losses[0] && losses[2] < losses[1]);
    Ok((
        lm,
        LmTrainReport {
            losses,
            perplexities,
            schedule_warning,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::lstm_step;
    use proptest::prelude::*;

    fn shape(e: usize, h: usize) -> LmShape {
        LmShape {
            embed_dim: e,
            hidden: h,
            corpus_tag: CorpusTag::TrainTranscripts,
        }
    }

    fn random_lm(v: usize, seed: u64) -> TokenLm {
        let mut lm = TokenLm::init(Vocabulary::letters(v), shape(3, 4), seed);
        let mut rng = SeededRng::new(seed + 100);
        for x in lm.bias.data_mut() {
            *x = rng.uniform(-1.0, 1.0);
        }
        lm
    }

    #[test]
    fn empty_sequence_scores_eos_after_bos() {
        let lm = random_lm(4, 1);
        let want = lm.start().log_probs[EOS];
        assert_eq!(lm_log_prob(&lm, &[]).unwrap(), want);
    }

    #[test]
    fn chain_rule_decomposition() {
        let lm = random_lm(4, 2);
        let steps = lm.step_scores(&[1, 2]).unwrap();
        let prefix = lm.step_scores(&[1]).unwrap();
        assert_eq!(steps[0], prefix[0]);
        let s1 = lm.state_after(&[1]).unwrap();
        assert_eq!(steps[1], s1.log_probs[2]);
        let full = lm_log_prob(&lm, &[1, 2]).unwrap();
        assert!((full - (prefix[0] + steps[1] + steps[2])).abs() < 1e-15);
        assert!(full <= 0.0);
    }

    #[test]
    fn matches_manual_recurrence() {
        let mut lm = TokenLm::init(Vocabulary::letters(3), shape(2, 2), 3);
        let mut rng = SeededRng::new(4);
        for x in lm.bias.data_mut() {
            *x = rng.uniform(-1.0, 1.0);
        }
        let y = [2, 1, 3];
        let mut state = LstmState::zeros(2);
        let mut total = 0.0;
        let mut inputs = vec![lm.vocab.bos_id()];
        inputs.extend_from_slice(&y);
        for (s, &inp) in inputs.iter().enumerate() {
            let (h, next) = lstm_step(&lm.lstm, lm.embedding.row(inp as usize), &state).unwrap();
            state = next;
            let logits: Vec<f64> = (0..4)
                .map(|r| lm.bias.get(r, 0) + lm.w_out.get(r, 0) * h[0] + lm.w_out.get(r, 1) * h[1])
                .collect();
            let norm = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            let target = if s < y.len() { y[s] as usize } else { 0 };
            total += logits[target] - norm;
        }
        assert!((lm_log_prob(&lm, &y).unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lm = random_lm(3, 5);
        let y = [1, 3, 2];
        let (_, grads) = lm.loss_and_grad(&y).unwrap();
        let num = crate::numerics::finite_diff_grad(
            |p: &TokenLm| -lm_log_prob(p, &y).unwrap(),
            &lm,
            1e-5,
        )
        .unwrap();
        for ((name, a), n) in lm.names().iter().zip(grads.tensors()).zip(&num) {
            let diff: f64 = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, z)| (x - z).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = a.norm().max(n.norm());
            let err = if scale < 1e-8 { diff } else { diff / scale };
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn topk_on_uniform_lm_breaks_ties_by_id() {
        let lm = TokenLm::zeros(Vocabulary::letters(6), shape(2, 2));
        let s = lm.start();
        assert_eq!(lm_topk(&lm, &s, 3).unwrap(), vec![1, 2, 3]);
        let mut all = lm_topk(&lm, &s, 6).unwrap();
        all.sort();
        assert_eq!(all, vec![1, 2, 3, 4, 5, 6]);
        assert!(lm_topk(&lm, &s, 0).is_err());
        assert!(lm_topk(&lm, &s, 7).is_err());
    }

    #[test]
    fn topk_matches_full_sort() {
        for seed in 0..20 {
            let lm = random_lm(6, seed);
            let s = lm.state_after(&[1, 4]).unwrap();
            let mut pairs: Vec<(f64, TokenId)> =
                (1..=6).map(|i| (s.log_probs[i as usize], i)).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for k in 1..=6 {
                let want: Vec<TokenId> = pairs.iter().take(k).map(|p| p.1).collect();
                assert_eq!(lm_topk(&lm, &s, k).unwrap(), want);
            }
        }
    }

    fn quick_config(epochs: usize) -> LmTrainConfig {
        LmTrainConfig {
            embed_dim: 8,
            hidden: 16,
            schedule: LrSchedule {
                lr_start: 1e-2,
                lr_peak: 1e-2,
                warmup_epochs: 1,
                hold_epochs: epochs,
                decay_factor: 0.5,
                total_epochs: epochs,
            },
            ..LmTrainConfig::default()
        }
    }

    #[test]
    fn repeated_token_language_is_learned() {
        let vocab = Vocabulary::letters(4);
        let corpus: Vec<TokenSequence> = (0..100).map(|_| vec![1, 1, 1, 1].into()).collect();
        let (lm, report) = lm_train(&corpus, &vocab, &quick_config(20)).unwrap();
        let ppl = *report.perplexities.last().unwrap();
        assert!(ppl >= 1.0);
        assert!(ppl < 1.05, "perplexity {ppl}");
        assert!(!report.schedule_warning);
        let held_out: Vec<TokenSequence> = vec![vec![1, 1].into(), vec![2, 3, 1].into()];
        assert!(lm_perplexity(&lm, &held_out).unwrap() >= 1.0);
    }

    #[test]
    fn alternating_language_reaches_the_analytic_optimum() {
        // Half the sequences start with a, half with b, then alternate for
        // four tokens. The optimal predictor gives 1/2 to each first token
        // and probability 1 to every later token and to eos.
        let vocab = Vocabulary::letters(3);
        let corpus: Vec<TokenSequence> = (0..100)
            .map(|i| {
                if i % 2 == 0 {
                    vec![1, 2, 1, 2]
                } else {
                    vec![2, 1, 2, 1]
                }
                .into()
            })
            .collect();
        let (lm, _) = lm_train(&corpus, &vocab, &quick_config(20)).unwrap();
        let steps = lm.step_scores(&[1, 2, 1, 2]).unwrap();
        assert!(
            (steps[0].exp() - 0.5).abs() < 0.05,
            "first {}",
            steps[0].exp()
        );
        for s in &steps[1..] {
            assert!(s.exp() > 0.95, "forced step {}", s.exp());
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(lm_train(&[], &Vocabulary::letters(3), &LmTrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = random_lm(4, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        lm.save(&path).unwrap();
        let back = TokenLm::load(&path).unwrap();
        assert_eq!(back, lm);
        assert!(crate::networks::RnntModel::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn topk_sets_are_nested(seed in 0u64..1000, hist in proptest::collection::vec(1u32..=5, 0..4)) {
            let lm = random_lm(5, seed);
            let s = lm.state_after(&hist).unwrap();
            for k in 1..5 {
                let small = lm_topk(&lm, &s, k).unwrap();
                let big = lm_topk(&lm, &s, k + 1).unwrap();
                prop_assert!(small.iter().all(|t| big.contains(t)));
            }
        }

        #[test]
        fn scoring_is_a_pure_function(seed in 0u64..1000, y in proptest::collection::vec(1u32..=5, 0..6)) {
            let lm = random_lm(5, seed);
            let a = lm_log_prob(&lm, &y).unwrap();
            let _ = lm_log_prob(&lm, &[1, 2, 3]).unwrap();
            prop_assert_eq!(a, lm_log_prob(&lm, &y).unwrap());
            prop_assert!(a <= 0.0);
        }
    }
}
