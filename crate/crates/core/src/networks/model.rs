use serde::{Deserialize, Serialize};

use super::lstm::{LstmState, LstmStepCache, LstmWeights};
use super::vocab::{AcousticSequence, TokenId, Vocabulary};
use crate::error::{contract, Result};
use crate::numerics::{log_softmax_in_place, Matrix, ParamSet, SeededRng};

/// Shape knobs of an RNNT model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub trans_layers: usize,
    /// Cells per direction.
    pub trans_hidden: usize,
    pub pred_hidden: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            trans_layers: 2,
            trans_hidden: 32,
            pred_hidden: 32,
            embed_dim: 32,
            joint_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn enc_dim(&self) -> usize {
        2 * self.trans_hidden
    }
}

/// Identity point where activation regularizers (dropout and the like)
/// would be inserted. Implementations must leave `values` unchanged for the
/// hand-written backward pass to stay exact.
pub trait ActivationHook {
    fn apply(&self, _site: &str, _values: &mut [f64]) {}
}

pub struct NoHook;

impl ActivationHook for NoHook {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstmLayer {
    pub forward: LstmWeights,
    pub backward: LstmWeights,
}

/// Stacked bidirectional LSTM producing `f_1..f_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionNet {
    pub layers: Vec<BiLstmLayer>,
}

#[derive(Clone, Debug)]
pub struct TranscriptionCache {
    fwd: Vec<Vec<LstmStepCache>>,
    /// Reverse-direction caches, in processing order (last frame first).
    bwd: Vec<Vec<LstmStepCache>>,
    pub outputs: Vec<Vec<f64>>,
}

impl TranscriptionNet {
    fn shapes(cfg: &ModelConfig) -> Vec<usize> {
        (0..cfg.trans_layers)
            .map(|l| {
                if l == 0 {
                    cfg.feature_dim
                } else {
                    cfg.enc_dim()
                }
            })
            .collect()
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layers = Self::shapes(cfg)
            .into_iter()
            .map(|input| BiLstmLayer {
                forward: LstmWeights::zeros(input, cfg.trans_hidden),
                backward: LstmWeights::zeros(input, cfg.trans_hidden),
            })
            .collect();
        TranscriptionNet { layers }
    }

    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let layers = Self::shapes(cfg)
            .into_iter()
            .map(|input| BiLstmLayer {
                forward: LstmWeights::init(input, cfg.trans_hidden, rng),
                backward: LstmWeights::init(input, cfg.trans_hidden, rng),
            })
            .collect();
        TranscriptionNet { layers }
    }

    pub fn forward(
        &self,
        x: &AcousticSequence,
        hook: &dyn ActivationHook,
    ) -> Result<TranscriptionCache> {
        let t_len = x.len();
        if let Some(first) = self.layers.first() {
            if first.forward.input_size() != x.feature_dim() {
                return Err(contract(format!(
                    "frames have {} features, transcription expects {}",
                    x.feature_dim(),
                    first.forward.input_size()
                )));
            }
        }
        let mut current: Vec<Vec<f64>> = (0..t_len).map(|t| x.frame(t).to_vec()).collect();
        let mut fwd_caches = Vec::with_capacity(self.layers.len());
        let mut bwd_caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let refs: Vec<&[f64]> = current.iter().map(Vec::as_slice).collect();
            let (fwd_out, fwd_cache) = layer.forward.run_sequence(&refs);
            let rev: Vec<&[f64]> = refs.iter().rev().cloned().collect();
            let (bwd_out, bwd_cache) = layer.backward.run_sequence(&rev);
            let mut next = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let mut v = fwd_out[t].clone();
                v.extend_from_slice(&bwd_out[t_len - 1 - t]);
                hook.apply(&format!("transcription.l{l}"), &mut v);
                next.push(v);
            }
            fwd_caches.push(fwd_cache);
            bwd_caches.push(bwd_cache);
            current = next;
        }
        Ok(TranscriptionCache {
            fwd: fwd_caches,
            bwd: bwd_caches,
            outputs: current,
        })
    }

    fn backward(
        &self,
        cache: &TranscriptionCache,
        d_outputs: Vec<Vec<f64>>,
        grads: &mut TranscriptionNet,
    ) {
        let t_len = d_outputs.len();
        let mut d_current = d_outputs;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let h = layer.forward.hidden_size();
            let d_fwd: Vec<Vec<f64>> = d_current.iter().map(|d| d[..h].to_vec()).collect();
            let d_bwd: Vec<Vec<f64>> = (0..t_len)
                .rev()
                .map(|t| d_current[t][h..].to_vec())
                .collect();
            let dx_fwd = layer.forward.backward_sequence(
                &cache.fwd[l],
                &d_fwd,
                &mut grads.layers[l].forward,
            );
            let dx_bwd = layer.backward.backward_sequence(
                &cache.bwd[l],
                &d_bwd,
                &mut grads.layers[l].backward,
            );
            if l == 0 {
                break;
            }
            d_current = (0..t_len)
                .map(|t| {
                    dx_fwd[t]
                        .iter()
                        .zip(&dx_bwd[t_len - 1 - t])
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect();
        }
    }
}

/// Unidirectional LSTM over `[bos, ỹ_1, …, ỹ_U]`, producing `g_0..g_U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionNet {
    /// `V + 2` rows; row 0 (∅) is never read.
    pub embedding: Matrix,
    pub lstm: LstmWeights,
}

#[derive(Clone, Debug)]
pub struct PredictionCache {
    inputs: Vec<TokenId>,
    steps: Vec<LstmStepCache>,
    pub outputs: Vec<Vec<f64>>,
}

impl PredictionNet {
    pub fn zeros(cfg: &ModelConfig, vocab: &Vocabulary) -> Self {
        PredictionNet {
            embedding: Matrix::zeros(vocab.embedding_rows(), cfg.embed_dim),
            lstm: LstmWeights::zeros(cfg.embed_dim, cfg.pred_hidden),
        }
    }

    pub fn init(cfg: &ModelConfig, vocab: &Vocabulary, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (cfg.embed_dim as f64).sqrt();
        let embedding = Matrix::from_fn(vocab.embedding_rows(), cfg.embed_dim, |r, _| {
            if r == 0 {
                0.0
            } else {
                rng.uniform(-bound, bound)
            }
        });
        PredictionNet {
            embedding,
            lstm: LstmWeights::init(cfg.embed_dim, cfg.pred_hidden, rng),
        }
    }

    fn bos_id(&self) -> TokenId {
        (self.embedding.rows() - 1) as TokenId
    }

    /// `g_0` and the state after the start marker.
    pub fn start(&self) -> (Vec<f64>, LstmState) {
        self.step(self.bos_id(), &LstmState::zeros(self.lstm.hidden_size()))
    }

    /// Feeds one token; returns the new embedding and state.
    pub fn step(&self, token: TokenId, state: &LstmState) -> (Vec<f64>, LstmState) {
        let (next, _) = self
            .lstm
            .forward_step(self.embedding.row(token as usize), state);
        (next.hidden.clone(), next)
    }

    pub fn forward(
        &self,
        tokens: &[TokenId],
        hook: &dyn ActivationHook,
    ) -> Result<PredictionCache> {
        let v = self.embedding.rows() - 2;
        if let Some(bad) = tokens.iter().find(|&&t| t == 0 || t as usize > v) {
            return Err(contract(format!(
                "prediction input token {bad} outside 1..={v}"
            )));
        }
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(self.bos_id());
        inputs.extend_from_slice(tokens);
        let refs: Vec<&[f64]> = inputs
            .iter()
            .map(|&t| self.embedding.row(t as usize))
            .collect();
        let (mut outputs, steps) = self.lstm.run_sequence(&refs);
        for g in &mut outputs {
            hook.apply("prediction", g);
        }
        Ok(PredictionCache {
            inputs,
            steps,
            outputs,
        })
    }

    fn backward(
        &self,
        cache: &PredictionCache,
        d_outputs: Vec<Vec<f64>>,
        grads: &mut PredictionNet,
    ) {
        let d_inputs = self
            .lstm
            .backward_sequence(&cache.steps, &d_outputs, &mut grads.lstm);
        for (&tok, d) in cache.inputs.iter().zip(&d_inputs) {
            for (e, g) in grads.embedding.row_mut(tok as usize).iter_mut().zip(d) {
                *e += g;
            }
        }
    }
}

/// `log softmax(W_out tanh(W_enc f ⊙ W_pred g + b))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointNet {
    pub w_enc: Matrix,
    pub w_pred: Matrix,
    pub b: Matrix,
    pub w_out: Matrix,
}

impl JointNet {
    pub fn zeros(cfg: &ModelConfig, vocab: &Vocabulary) -> Self {
        JointNet {
            w_enc: Matrix::zeros(cfg.joint_dim, cfg.enc_dim()),
            w_pred: Matrix::zeros(cfg.joint_dim, cfg.pred_hidden),
            b: Matrix::zeros(cfg.joint_dim, 1),
            w_out: Matrix::zeros(vocab.output_size(), cfg.joint_dim),
        }
    }

    pub fn init(cfg: &ModelConfig, vocab: &Vocabulary, rng: &mut SeededRng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
        };
        JointNet {
            w_enc: uniform(cfg.joint_dim, cfg.enc_dim()),
            w_pred: uniform(cfg.joint_dim, cfg.pred_hidden),
            b: Matrix::zeros(cfg.joint_dim, 1),
            w_out: uniform(vocab.output_size(), cfg.joint_dim),
        }
    }

    pub fn project_enc(&self, f: &[f64]) -> Vec<f64> {
        self.w_enc.matvec(f)
    }

    pub fn project_pred(&self, g: &[f64]) -> Vec<f64> {
        self.w_pred.matvec(g)
    }

    /// Node distribution from already-projected embeddings. Returns
    /// `(hidden activation, log-probabilities)`.
    pub fn node(&self, enc_proj: &[f64], pred_proj: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = enc_proj
            .iter()
            .zip(pred_proj)
            .zip(self.b.data())
            .map(|((a, c), b)| (a * c + b).tanh())
            .collect();
        let mut logits = self.w_out.matvec(&z);
        log_softmax_in_place(&mut logits);
        (z, logits)
    }

    pub fn joint_distribution(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.w_enc.cols() || g.len() != self.w_pred.cols() {
            return Err(contract(format!(
                "joint expects f of {} and g of {}, got {} and {}",
                self.w_enc.cols(),
                self.w_pred.cols(),
                f.len(),
                g.len()
            )));
        }
        Ok(self.node(&self.project_enc(f), &self.project_pred(g)).1)
    }
}

/// All trainable weights of the transducer plus its vocabulary and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnntModel {
    pub vocab: Vocabulary,
    pub config: ModelConfig,
    pub transcription: TranscriptionNet,
    pub prediction: PredictionNet,
    pub joint: JointNet,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub frames: usize,
    pub labels: usize,
    trans: TranscriptionCache,
    pred: PredictionCache,
    enc_proj: Vec<Vec<f64>>,
    pred_proj: Vec<Vec<f64>>,
    /// Joint hidden activation per node, `(t, u)` row-major.
    hidden: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn enc_embeddings(&self) -> &[Vec<f64>] {
        &self.trans.outputs
    }

    pub fn pred_embeddings(&self) -> &[Vec<f64>] {
        &self.pred.outputs
    }
}

impl RnntModel {
    pub fn zeros(config: ModelConfig, vocab: Vocabulary) -> Self {
        RnntModel {
            transcription: TranscriptionNet::zeros(&config),
            prediction: PredictionNet::zeros(&config, &vocab),
            joint: JointNet::zeros(&config, &vocab),
            vocab,
            config,
        }
    }

    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = SeededRng::for_stream(seed, "init.rnnt", 0, "");
        RnntModel {
            transcription: TranscriptionNet::init(&config, &mut rng),
            prediction: PredictionNet::init(&config, &vocab, &mut rng),
            joint: JointNet::init(&config, &vocab, &mut rng),
            vocab,
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        RnntModel::zeros(self.config, self.vocab.clone())
    }

    pub fn transcription_forward(&self, x: &AcousticSequence) -> Result<Vec<Vec<f64>>> {
        Ok(self.transcription.forward(x, &NoHook)?.outputs)
    }

    pub fn prediction_forward(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        Ok(self.prediction.forward(tokens, &NoHook)?.outputs)
    }

    /// Node log-probabilities over the `T × (U+1)` grid, laid out
    /// `[(t * (U+1) + u) * (V+1) + k]`, with embeddings from `pred_inputs`.
    pub fn forward(
        &self,
        x: &AcousticSequence,
        pred_inputs: &[TokenId],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_with_hook(x, pred_inputs, &NoHook)
    }

    pub fn forward_with_hook(
        &self,
        x: &AcousticSequence,
        pred_inputs: &[TokenId],
        hook: &dyn ActivationHook,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let trans = self.transcription.forward(x, hook)?;
        let pred = self.prediction.forward(pred_inputs, hook)?;
        let enc_proj: Vec<Vec<f64>> = trans
            .outputs
            .iter()
            .map(|f| self.joint.project_enc(f))
            .collect();
        let pred_proj: Vec<Vec<f64>> = pred
            .outputs
            .iter()
            .map(|g| self.joint.project_pred(g))
            .collect();
        let (t_len, u1) = (enc_proj.len(), pred_proj.len());
        let v1 = self.vocab.output_size();
        let mut log_probs = Vec::with_capacity(t_len * u1 * v1);
        let mut hidden = Vec::with_capacity(t_len * u1);
        for a in &enc_proj {
            for c in &pred_proj {
                let (z, lp) = self.joint.node(a, c);
                log_probs.extend_from_slice(&lp);
                hidden.push(z);
            }
        }
        Ok((
            log_probs,
            ForwardCache {
                frames: t_len,
                labels: u1 - 1,
                trans,
                pred,
                enc_proj,
                pred_proj,
                hidden,
            },
        ))
    }

    /// Reverse-mode gradients of a loss given its gradient with respect to
    /// the pre-softmax logits of every node (same layout as
    /// [`forward`](Self::forward)).
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64]) -> Result<RnntModel> {
        let v1 = self.vocab.output_size();
        let (t_len, u1) = (cache.frames, cache.labels + 1);
        if d_logits.len() != t_len * u1 * v1 || cache.hidden.len() != t_len * u1 {
            return Err(contract(
                "upstream gradient does not match the cached forward pass",
            ));
        }
        let mut grads = self.zeros_like();
        let j = self.config.joint_dim;
        let mut d_enc_proj = vec![vec![0.0; j]; t_len];
        let mut d_pred_proj = vec![vec![0.0; j]; u1];
        let mut dz = vec![0.0; j];
        for t in 0..t_len {
            for u in 0..u1 {
                let node = t * u1 + u;
                let dl = &d_logits[node * v1..(node + 1) * v1];
                if dl.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let z = &cache.hidden[node];
                grads.joint.w_out.add_outer(dl, z);
                dz.fill(0.0);
                self.joint.w_out.tmatvec_acc(dl, &mut dz);
                let a = &cache.enc_proj[t];
                let c = &cache.pred_proj[u];
                let db = grads.joint.b.data_mut();
                for k in 0..j {
                    let dh = dz[k] * (1.0 - z[k] * z[k]);
                    db[k] += dh;
                    d_enc_proj[t][k] += dh * c[k];
                    d_pred_proj[u][k] += dh * a[k];
                }
            }
        }
        let mut d_f = vec![vec![0.0; self.config.enc_dim()]; t_len];
        for t in 0..t_len {
            grads
                .joint
                .w_enc
                .add_outer(&d_enc_proj[t], &cache.trans.outputs[t]);
            self.joint.w_enc.tmatvec_acc(&d_enc_proj[t], &mut d_f[t]);
        }
        let mut d_g = vec![vec![0.0; self.config.pred_hidden]; u1];
        for u in 0..u1 {
            grads
                .joint
                .w_pred
                .add_outer(&d_pred_proj[u], &cache.pred.outputs[u]);
            self.joint.w_pred.tmatvec_acc(&d_pred_proj[u], &mut d_g[u]);
        }
        self.transcription
            .backward(&cache.trans, d_f, &mut grads.transcription);
        self.prediction
            .backward(&cache.pred, d_g, &mut grads.prediction);
        Ok(grads)
    }
}

impl ParamSet for RnntModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.transcription.layers {
            out.extend(layer.forward.tensors());
            out.extend(layer.backward.tensors());
        }
        out.push(&self.prediction.embedding);
        out.extend(self.prediction.lstm.tensors());
        out.extend([
            &self.joint.w_enc,
            &self.joint.w_pred,
            &self.joint.b,
            &self.joint.w_out,
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.transcription.layers {
            out.extend(layer.forward.tensors_mut());
            out.extend(layer.backward.tensors_mut());
        }
        out.push(&mut self.prediction.embedding);
        out.extend(self.prediction.lstm.tensors_mut());
        let j = &mut self.joint;
        out.extend([&mut j.w_enc, &mut j.w_pred, &mut j.b, &mut j.w_out]);
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.transcription.layers.len() {
            for dir in ["fwd", "bwd"] {
                for w in ["w_ih", "w_hh", "bias"] {
                    out.push(format!("transcription.l{l}.{dir}.{w}"));
                }
            }
        }
        out.push("prediction.embedding".to_string());
        for w in ["w_ih", "w_hh", "bias"] {
            out.push(format!("prediction.lstm.{w}"));
        }
        for w in ["W_enc", "W_pred", "b", "W_out"] {
            out.push(format!("joint.{w}"));
        }
        out
    }
}
