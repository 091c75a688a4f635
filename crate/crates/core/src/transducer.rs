//! The transducer objective on the `T × (U+1)` lattice.
//!
//! Coordinates are 0-based internally: frame `t ∈ 0..T`, label position
//! `u ∈ 0..=U`. A complete alignment starts at `(0, 0)`, moves right on ∅
//! (`t + 1`) and up on the next target token (`u + 1`), and ends with a
//! mandatory ∅ emitted from `(T-1, U)`. Every alignment has length `T + U`;
//! there are `C(T+U-1, U)` of them.
//!
//! Node distributions are computed from the prediction-network inputs
//! (`pred_inputs`), while the transitions that are summed over always emit
//! the ground-truth `targets`. When the two differ the result is the
//! likelihood of the targets under a perturbed history.

use std::path::Path;

use serde::Serialize;

use crate::error::{contract, Error, Result};
use crate::networks::{
    write_atomic, AcousticSequence, ForwardCache, RnntModel, TokenId, TokenSequence, NULL_ID,
};
use crate::numerics::{log_add, log_softmax_in_place, LOG_ZERO};

/// Enumeration is refused beyond this `T + U`.
pub const ENUMERATION_LIMIT: usize = 12;

/// Per-node log-probabilities over the extended vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbGrid {
    frames: usize,
    labels: usize,
    outputs: usize,
    data: Vec<f64>,
}

impl LogProbGrid {
    /// `data` is laid out `[(t * (U+1) + u) * outputs + k]`; each node must
    /// already be normalized.
    pub fn new(frames: usize, labels: usize, outputs: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || outputs < 2 {
            return Err(contract("lattice needs T >= 1 and at least one real token"));
        }
        if data.len() != frames * (labels + 1) * outputs {
            return Err(contract(format!(
                "lattice data has {} entries, expected {frames}x{}x{outputs}",
                data.len(),
                labels + 1
            )));
        }
        for node in data.chunks(outputs) {
            if node.iter().any(|x| x.is_nan() || *x > 0.0) {
                return Err(contract("lattice node holds an invalid log-probability"));
            }
            let s: f64 = node.iter().map(|x| x.exp()).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(contract(format!("lattice node sums to {s}, not 1")));
            }
        }
        Ok(LogProbGrid {
            frames,
            labels,
            outputs,
            data,
        })
    }

    /// Log-softmax of raw logits, node by node.
    pub fn from_logits(
        frames: usize,
        labels: usize,
        outputs: usize,
        mut logits: Vec<f64>,
    ) -> Result<Self> {
        if logits.len() != frames * (labels + 1) * outputs {
            return Err(contract("logit count does not match the lattice shape"));
        }
        for node in logits.chunks_mut(outputs) {
            log_softmax_in_place(node);
        }
        LogProbGrid::new(frames, labels, outputs, logits)
    }

    /// `T`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U`.
    pub fn labels(&self) -> usize {
        self.labels
    }

    /// `V + 1`.
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn index(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    #[inline]
    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let n = self.index(t, u);
        &self.data[n * self.outputs..(n + 1) * self.outputs]
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: TokenId) -> f64 {
        self.node(t, u)[k as usize]
    }
}

fn check_targets(grid: &LogProbGrid, targets: &[TokenId]) -> Result<()> {
    if targets.len() != grid.labels {
        return Err(contract(format!(
            "lattice has U = {}, targets have {} tokens",
            grid.labels,
            targets.len()
        )));
    }
    if let Some(bad) = targets
        .iter()
        .find(|&&y| y == NULL_ID || y as usize >= grid.outputs)
    {
        return Err(contract(format!("target token {bad} is not a real token")));
    }
    Ok(())
}

/// `α(t, u)`: log-probability of all partial alignments reaching `(t, u)`
/// before anything is emitted there. Row-major `T × (U+1)`.
pub fn forward_variables(grid: &LogProbGrid, targets: &[TokenId]) -> Result<Vec<f64>> {
    check_targets(grid, targets)?;
    let (t_len, u_len) = (grid.frames, grid.labels);
    let mut alpha = vec![LOG_ZERO; t_len * (u_len + 1)];
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                alpha[0] = 0.0;
                continue;
            }
            let mut a = LOG_ZERO;
            if t > 0 {
                a = alpha[grid.index(t - 1, u)] + grid.at(t - 1, u, NULL_ID);
            }
            if u > 0 {
                a = log_add(
                    a,
                    alpha[grid.index(t, u - 1)] + grid.at(t, u - 1, targets[u - 1]),
                );
            }
            alpha[grid.index(t, u)] = a;
        }
    }
    Ok(alpha)
}

/// `β(t, u)`: log-probability of completing the alignment from `(t, u)`,
/// including the final ∅. `β(0, 0)` is the total log-likelihood.
pub fn backward_variables(grid: &LogProbGrid, targets: &[TokenId]) -> Result<Vec<f64>> {
    check_targets(grid, targets)?;
    let (t_len, u_len) = (grid.frames, grid.labels);
    let mut beta = vec![LOG_ZERO; t_len * (u_len + 1)];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let b = if t == t_len - 1 && u == u_len {
                grid.at(t, u, NULL_ID)
            } else {
                let mut b = LOG_ZERO;
                if t + 1 < t_len {
                    b = beta[grid.index(t + 1, u)] + grid.at(t, u, NULL_ID);
                }
                if u < u_len {
                    b = log_add(b, beta[grid.index(t, u + 1)] + grid.at(t, u, targets[u]));
                }
                b
            };
            beta[grid.index(t, u)] = b;
        }
    }
    Ok(beta)
}

/// A lattice with its forward and backward variables.
#[derive(Clone, Debug)]
pub struct TransducerLattice {
    pub log_probs: LogProbGrid,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub targets: TokenSequence,
    pub pred_inputs: TokenSequence,
}

impl TransducerLattice {
    pub fn new(
        log_probs: LogProbGrid,
        targets: TokenSequence,
        pred_inputs: TokenSequence,
    ) -> Result<Self> {
        if pred_inputs.len() != targets.len() {
            return Err(contract(format!(
                "prediction inputs have {} tokens, targets {}",
                pred_inputs.len(),
                targets.len()
            )));
        }
        let alpha = forward_variables(&log_probs, &targets)?;
        let beta = backward_variables(&log_probs, &targets)?;
        Ok(TransducerLattice {
            log_probs,
            alpha,
            beta,
            targets,
            pred_inputs,
        })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.frames
    }

    pub fn labels(&self) -> usize {
        self.log_probs.labels
    }

    pub fn alpha_at(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.log_probs.index(t, u)]
    }

    pub fn beta_at(&self, t: usize, u: usize) -> f64 {
        self.beta[self.log_probs.index(t, u)]
    }

    /// Total via the forward variables: `α(T-1, U) + log p_∅(T-1, U)`.
    pub fn forward_log_likelihood(&self) -> f64 {
        let (t, u) = (self.frames() - 1, self.labels());
        self.alpha_at(t, u) + self.log_probs.at(t, u, NULL_ID)
    }

    /// `log Σ_{t+u=n} α(t,u) β(t,u)` for every anti-diagonal `n = 0..T+U`.
    pub fn antidiagonal_log_sums(&self) -> Vec<f64> {
        let (t_len, u_len) = (self.frames(), self.labels());
        (0..t_len + u_len)
            .map(|n| {
                let mut acc = LOG_ZERO;
                for t in n.saturating_sub(u_len)..t_len.min(n + 1) {
                    let u = n - t;
                    acc = log_add(acc, self.alpha_at(t, u) + self.beta_at(t, u));
                }
                acc
            })
            .collect()
    }
}

/// Runs the networks over `(x, pred_inputs)` and lays the result out as a
/// lattice whose transitions emit `targets`.
pub fn build_lattice(
    model: &RnntModel,
    x: &AcousticSequence,
    targets: &TokenSequence,
    pred_inputs: &TokenSequence,
) -> Result<(TransducerLattice, ForwardCache)> {
    if targets.len() != pred_inputs.len() {
        return Err(contract(format!(
            "prediction inputs have {} tokens, targets {}",
            pred_inputs.len(),
            targets.len()
        )));
    }
    targets.check(&model.vocab)?;
    pred_inputs.check(&model.vocab)?;
    let (log_probs, cache) = model.forward(x, pred_inputs)?;
    let grid = LogProbGrid::new(x.len(), targets.len(), model.vocab.output_size(), log_probs)?;
    let lattice = TransducerLattice::new(grid, targets.clone(), pred_inputs.clone())?;
    Ok((lattice, cache))
}

/// `log Pr(y | x)` from the first anti-diagonal, i.e. `β(0, 0)`.
pub fn rnnt_log_likelihood(lattice: &TransducerLattice) -> f64 {
    lattice.beta_at(0, 0)
}

/// Gradient of the log-likelihood with respect to the pre-softmax logits of
/// every node, same layout as the log-probabilities.
pub fn lattice_grad(lattice: &TransducerLattice) -> Vec<f64> {
    let grid = &lattice.log_probs;
    let (t_len, u_len, v1) = (grid.frames, grid.labels, grid.outputs);
    let total = rnnt_log_likelihood(lattice);
    let mut grad = vec![0.0; grid.data.len()];
    if !total.is_finite() {
        return grad;
    }
    for t in 0..t_len {
        for u in 0..=u_len {
            let alpha = lattice.alpha_at(t, u);
            if alpha == LOG_ZERO {
                continue;
            }
            let node = grid.node(t, u);
            let after_null = if t + 1 < t_len {
                lattice.beta_at(t + 1, u)
            } else if u == u_len {
                0.0
            } else {
                LOG_ZERO
            };
            let via_null = (alpha + node[NULL_ID as usize] + after_null - total).exp();
            let (label, via_label) = if u < u_len {
                let y = lattice.targets[u] as usize;
                (
                    Some(y),
                    (alpha + node[y] + lattice.beta_at(t, u + 1) - total).exp(),
                )
            } else {
                (None, 0.0)
            };
            let occupancy = via_null + via_label;
            let base = grid.index(t, u) * v1;
            for k in 0..v1 {
                grad[base + k] = -node[k].exp() * occupancy;
            }
            grad[base + NULL_ID as usize] += via_null;
            if let Some(y) = label {
                grad[base + y] += via_label;
            }
        }
    }
    grad
}

/// Negative log-likelihood of one utterance and its parameter gradient.
pub fn transducer_loss(
    model: &RnntModel,
    x: &AcousticSequence,
    targets: &TokenSequence,
    pred_inputs: &TokenSequence,
) -> Result<(f64, RnntModel)> {
    let (lattice, cache) = build_lattice(model, x, targets, pred_inputs)?;
    let loss = -rnnt_log_likelihood(&lattice);
    let mut d_logits = lattice_grad(&lattice);
    for g in &mut d_logits {
        *g = -*g;
    }
    let grads = model.backward(&cache, &d_logits)?;
    Ok((loss, grads))
}

/// A complete alignment over the extended vocabulary (∅ = 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub symbols: Vec<TokenId>,
}

impl Alignment {
    /// Removes the nulls.
    pub fn collapse(&self) -> Vec<TokenId> {
        self.symbols
            .iter()
            .copied()
            .filter(|&s| s != NULL_ID)
            .collect()
    }

    pub fn log_prob(&self, grid: &LogProbGrid) -> f64 {
        let (mut t, mut u) = (0, 0);
        let mut lp = 0.0;
        for &s in &self.symbols {
            lp += grid.at(t, u, s);
            if s == NULL_ID {
                t += 1;
            } else {
                u += 1;
            }
        }
        lp
    }
}

/// All `C(T+U-1, U)` alignments of `targets` against `frames` frames.
pub fn enumerate_alignments(frames: usize, targets: &[TokenId]) -> Result<Vec<Alignment>> {
    let u_len = targets.len();
    if frames + u_len > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            size: frames + u_len,
            limit: ENUMERATION_LIMIT,
        });
    }
    if frames == 0 {
        return Err(contract("alignment needs at least one frame"));
    }
    fn walk(
        nulls_left: usize,
        targets: &[TokenId],
        prefix: &mut Vec<TokenId>,
        out: &mut Vec<Alignment>,
    ) {
        if nulls_left == 0 && targets.is_empty() {
            let mut symbols = prefix.clone();
            symbols.push(NULL_ID);
            out.push(Alignment { symbols });
            return;
        }
        if nulls_left > 0 {
            prefix.push(NULL_ID);
            walk(nulls_left - 1, targets, prefix, out);
            prefix.pop();
        }
        if let Some((&y, rest)) = targets.split_first() {
            prefix.push(y);
            walk(nulls_left, rest, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(frames - 1, targets, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Direct sum over every alignment; the oracle for the forward-backward
/// recursions.
pub fn brute_force_log_likelihood(grid: &LogProbGrid, targets: &[TokenId]) -> Result<f64> {
    check_targets(grid, targets)?;
    let alignments = enumerate_alignments(grid.frames, targets)?;
    Ok(alignments
        .iter()
        .map(|a| a.log_prob(grid))
        .fold(LOG_ZERO, log_add))
}

#[derive(Serialize)]
struct LatticeDump<'a> {
    frames: usize,
    labels: usize,
    outputs: usize,
    targets: &'a [TokenId],
    pred_inputs: &'a [TokenId],
    log_probs: Vec<Vec<Vec<Option<f64>>>>,
    alpha: Vec<Vec<Option<f64>>>,
    beta: Vec<Vec<Option<f64>>>,
    antidiagonal_log_sums: Vec<Option<f64>>,
    log_likelihood: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl TransducerLattice {
    /// JSON view for inspection. Log-zero entries become `null`.
    ///
    /// Fields: `frames`, `labels`, `outputs`, `targets`, `pred_inputs`,
    /// `log_probs[t][u][k]`, `alpha[t][u]`, `beta[t][u]`,
    /// `antidiagonal_log_sums[n]`, `log_likelihood`.
    pub fn debug_json(&self) -> Result<String> {
        let g = &self.log_probs;
        let grid2 = |v: &[f64]| -> Vec<Vec<Option<f64>>> {
            (0..g.frames)
                .map(|t| (0..=g.labels).map(|u| finite(v[g.index(t, u)])).collect())
                .collect()
        };
        let dump = LatticeDump {
            frames: g.frames,
            labels: g.labels,
            outputs: g.outputs,
            targets: &self.targets,
            pred_inputs: &self.pred_inputs,
            log_probs: (0..g.frames)
                .map(|t| {
                    (0..=g.labels)
                        .map(|u| g.node(t, u).iter().map(|&x| finite(x)).collect())
                        .collect()
                })
                .collect(),
            alpha: grid2(&self.alpha),
            beta: grid2(&self.beta),
            antidiagonal_log_sums: self
                .antidiagonal_log_sums()
                .into_iter()
                .map(finite)
                .collect(),
            log_likelihood: finite(rnnt_log_likelihood(self)),
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    pub fn write_debug_dump(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.debug_json()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ModelConfig, Vocabulary};
    use crate::numerics::{Matrix, SeededRng};

    fn random_logits(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()
    }

    fn random_lattice(rng: &mut SeededRng, t: usize, u: usize, v: usize) -> TransducerLattice {
        let grid = LogProbGrid::from_logits(t, u, v + 1, random_logits(rng, t * (u + 1) * (v + 1)))
            .unwrap();
        let targets: Vec<TokenId> = (0..u).map(|_| 1 + rng.below(v) as TokenId).collect();
        TransducerLattice::new(grid, targets.clone().into(), targets.into()).unwrap()
    }

    fn uniform_lattice(t: usize, targets: Vec<TokenId>, v: usize) -> TransducerLattice {
        let v1 = v + 1;
        let data = vec![-(v1 as f64).ln(); t * (targets.len() + 1) * v1];
        let grid = LogProbGrid::new(t, targets.len(), v1, data).unwrap();
        TransducerLattice::new(grid, targets.clone().into(), targets.into()).unwrap()
    }

    #[test]
    fn single_node_lattice() {
        let mut rng = SeededRng::new(1);
        let lat = random_lattice(&mut rng, 1, 0, 3);
        let lp_null = lat.log_probs.at(0, 0, NULL_ID);
        assert!((rnnt_log_likelihood(&lat) - lp_null).abs() < 1e-15);
        assert!((lat.forward_log_likelihood() - lp_null).abs() < 1e-15);
        assert!((brute_force_log_likelihood(&lat.log_probs, &[]).unwrap() - lp_null).abs() < 1e-15);

        let grad = lattice_grad(&lat);
        for k in 0..4 {
            let onehot = if k == 0 { 1.0 } else { 0.0 };
            let p = lat.log_probs.at(0, 0, k as TokenId).exp();
            assert!((grad[k] - (onehot - p)).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_two_by_one_counts_two_alignments() {
        let lat = uniform_lattice(2, vec![1], 2);
        let want = (2.0f64 / 27.0).ln();
        assert!((rnnt_log_likelihood(&lat) - want).abs() < 1e-14);
        assert!((lat.forward_log_likelihood() - want).abs() < 1e-14);
        assert!((rnnt_log_likelihood(&lat) - (-2.6027)).abs() < 1e-4);
        let alignments = enumerate_alignments(2, &[1]).unwrap();
        assert_eq!(
            alignments
                .iter()
                .map(|a| a.symbols.clone())
                .collect::<Vec<_>>(),
            vec![vec![0, 1, 0], vec![1, 0, 0]]
        );
    }

    #[test]
    fn alignment_counts_are_binomial() {
        assert_eq!(enumerate_alignments(4, &[1, 2, 1]).unwrap().len(), 20);
        assert_eq!(enumerate_alignments(5, &[]).unwrap().len(), 1);
        for a in enumerate_alignments(4, &[1, 2, 1]).unwrap() {
            assert_eq!(a.symbols.len(), 7);
            assert_eq!(a.symbols.iter().filter(|&&s| s == NULL_ID).count(), 4);
            assert_eq!(*a.symbols.last().unwrap(), NULL_ID);
            assert_eq!(a.collapse(), vec![1, 2, 1]);
        }
    }

    #[test]
    fn enumeration_guard() {
        let grid = LogProbGrid::new(10, 3, 2, vec![-(2f64).ln(); 10 * 4 * 2]).unwrap();
        match brute_force_log_likelihood(&grid, &[1, 1, 1]) {
            Err(Error::TooLarge { size, limit }) => {
                assert_eq!(size, 13);
                assert_eq!(limit, ENUMERATION_LIMIT);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_lattice_has_zero_log_likelihood() {
        // T = 2, U = 1, V = 2, certain alignment [a, ∅, ∅].
        let z = LOG_ZERO;
        let data = vec![
            z, 0.0, z, // (0,0): emit a
            0.0, z, z, // (0,1): ∅
            0.0, z, z, // (1,0): unreachable in the certain path
            0.0, z, z, // (1,1): final ∅
        ];
        let grid = LogProbGrid::new(2, 1, 3, data).unwrap();
        let lat = TransducerLattice::new(grid, vec![1].into(), vec![1].into()).unwrap();
        assert_eq!(rnnt_log_likelihood(&lat), 0.0);
        let grad = lattice_grad(&lat);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn dp_matches_enumeration_on_random_lattices() {
        let mut rng = SeededRng::new(2);
        for _ in 0..100 {
            let t = 1 + rng.below(4);
            let u = rng.below(4);
            let v = 1 + rng.below(4);
            let lat = random_lattice(&mut rng, t, u, v);
            let bf = brute_force_log_likelihood(&lat.log_probs, &lat.targets).unwrap();
            assert!((rnnt_log_likelihood(&lat) - bf).abs() < 1e-10);
            assert!((lat.forward_log_likelihood() - bf).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_and_backward_agree() {
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let lat = random_lattice(&mut rng, 3, 2, 3);
            assert!((lat.forward_log_likelihood() - lat.beta_at(0, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn antidiagonals_are_constant() {
        let mut rng = SeededRng::new(4);
        for _ in 0..50 {
            let (t, u, v) = (1 + rng.below(5), rng.below(4), 1 + rng.below(4));
            let lat = random_lattice(&mut rng, t, u, v);
            let sums = lat.antidiagonal_log_sums();
            assert_eq!(sums.len(), lat.frames() + lat.labels());
            for s in &sums {
                assert!((s - sums[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero_and_match_finite_differences() {
        let mut rng = SeededRng::new(5);
        for _ in 0..10 {
            let (t, u, v) = (3, 2, 3);
            let logits = random_logits(&mut rng, t * (u + 1) * (v + 1));
            let targets: Vec<TokenId> = (0..u).map(|_| 1 + rng.below(v) as TokenId).collect();
            let ll = |lg: &[f64]| {
                let grid = LogProbGrid::from_logits(t, u, v + 1, lg.to_vec()).unwrap();
                let lat =
                    TransducerLattice::new(grid, targets.clone().into(), targets.clone().into())
                        .unwrap();
                rnnt_log_likelihood(&lat)
            };
            let grid = LogProbGrid::from_logits(t, u, v + 1, logits.clone()).unwrap();
            let lat = TransducerLattice::new(grid, targets.clone().into(), targets.clone().into())
                .unwrap();
            let grad = lattice_grad(&lat);
            for node in grad.chunks(v + 1) {
                assert!(node.iter().sum::<f64>().abs() < 1e-12);
            }
            let h = 1e-5;
            let mut num = vec![0.0; logits.len()];
            for i in 0..logits.len() {
                let mut p = logits.clone();
                p[i] += h;
                let mut m = logits.clone();
                m[i] -= h;
                num[i] = (ll(&p) - ll(&m)) / (2.0 * h);
            }
            let diff: f64 = grad
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
        }
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        // With T = 1 only the column t = 0 is reachable, and ∅ at u < U
        // leads off the grid, so those ∅ entries carry only the softmax term.
        let mut rng = SeededRng::new(6);
        let lat = random_lattice(&mut rng, 1, 2, 2);
        let grad = lattice_grad(&lat);
        let total: f64 = grad.iter().map(|g| g.abs()).sum();
        assert!(total > 0.0);
        for node in grad.chunks(3) {
            assert!(node.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn making_one_alignment_certain_maximizes_likelihood() {
        // Mixing every node on one alignment toward a one-hot raises that
        // alignment's probability and ends at log-likelihood 0. The total
        // is not monotone in between (other alignments lose mass), so only
        // the path probability and the endpoint are checked.
        let mut rng = SeededRng::new(7);
        for _ in 0..20 {
            let lat = random_lattice(&mut rng, 3, 2, 3);
            let alignments = enumerate_alignments(3, &lat.targets).unwrap();
            let chosen = &alignments[rng.below(alignments.len())];
            let mut prev_path = f64::NEG_INFINITY;
            let mut last_total = 0.0;
            for step in 0..=10 {
                let lam = step as f64 / 10.0;
                let mut data = lat.log_probs.data().to_vec();
                let (mut t, mut u) = (0, 0);
                for &s in &chosen.symbols {
                    let base = (t * 3 + u) * 4;
                    for k in 0..4 {
                        let p = data[base + k].exp();
                        let target = if k as TokenId == s { 1.0 } else { 0.0 };
                        data[base + k] = ((1.0 - lam) * p + lam * target).ln();
                    }
                    if s == NULL_ID {
                        t += 1;
                    } else {
                        u += 1;
                    }
                }
                let grid = LogProbGrid::new(3, 2, 4, data).unwrap();
                let path = chosen.log_prob(&grid);
                assert!(path >= prev_path - 1e-12);
                prev_path = path;
                let l =
                    TransducerLattice::new(grid, lat.targets.clone(), lat.targets.clone()).unwrap();
                last_total = rnnt_log_likelihood(&l);
            }
            assert!(last_total.abs() < 1e-12);
            assert!(last_total >= rnnt_log_likelihood(&lat));
        }
    }

    fn small_model() -> RnntModel {
        let cfg = ModelConfig {
            feature_dim: 2,
            trans_layers: 1,
            trans_hidden: 3,
            pred_hidden: 3,
            embed_dim: 2,
            joint_dim: 4,
        };
        RnntModel::init(cfg, Vocabulary::letters(3), 21)
    }

    fn frames(rng: &mut SeededRng, t: usize) -> AcousticSequence {
        AcousticSequence::new("x", Matrix::from_fn(t, 2, |_, _| rng.uniform(-1.0, 1.0))).unwrap()
    }

    #[test]
    fn teacher_forced_and_perturbed_lattices() {
        let mut rng = SeededRng::new(8);
        let model = small_model();
        let x = frames(&mut rng, 4);
        let y: TokenSequence = vec![1, 2, 3].into();
        let (tf, _) = build_lattice(&model, &x, &y, &y).unwrap();
        let bf = brute_force_log_likelihood(&tf.log_probs, &y).unwrap();
        assert!((rnnt_log_likelihood(&tf) - bf).abs() < 1e-10);

        for u_star in 1..=3 {
            let mut noisy = y.clone().into_inner();
            noisy[u_star - 1] = if noisy[u_star - 1] == 1 { 2 } else { 1 };
            let noisy: TokenSequence = noisy.into();
            let (pl, _) = build_lattice(&model, &x, &y, &noisy).unwrap();
            assert_eq!(pl.targets, y);
            for t in 0..4 {
                for u in 0..=3 {
                    let same = tf.log_probs.node(t, u) == pl.log_probs.node(t, u);
                    assert_eq!(same, u < u_star, "t={t} u={u} u*={u_star}");
                }
            }
            // Summed over the alignments of y, not of the perturbed input.
            let bf = brute_force_log_likelihood(&pl.log_probs, &y).unwrap();
            assert!((rnnt_log_likelihood(&pl) - bf).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_model_lattice_is_uniform() {
        let cfg = small_model().config;
        let model = RnntModel::zeros(cfg, Vocabulary::letters(3));
        let mut rng = SeededRng::new(9);
        let x = frames(&mut rng, 3);
        let y: TokenSequence = vec![2].into();
        let (lat, _) = build_lattice(&model, &x, &y, &y).unwrap();
        for lp in lat.log_probs.data() {
            assert!((lp + (4f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut rng = SeededRng::new(10);
        let model = small_model();
        let x = frames(&mut rng, 3);
        let a: TokenSequence = vec![1, 2].into();
        let b: TokenSequence = vec![1].into();
        assert!(build_lattice(&model, &x, &a, &b).is_err());
        let bad: TokenSequence = vec![1, 7].into();
        assert!(build_lattice(&model, &x, &a, &bad).is_err());
    }

    #[test]
    fn debug_dump_has_expected_fields() {
        let mut rng = SeededRng::new(11);
        let lat = random_lattice(&mut rng, 2, 1, 2);
        let v: serde_json::Value = serde_json::from_str(&lat.debug_json().unwrap()).unwrap();
        assert_eq!(v["frames"], 2);
        assert_eq!(v["log_probs"].as_array().unwrap().len(), 2);
        assert_eq!(v["alpha"][0].as_array().unwrap().len(), 2);
        assert_eq!(v["antidiagonal_log_sums"].as_array().unwrap().len(), 3);
        // α(1, 1) is reachable; nothing off-grid is dumped.
        assert!(v["alpha"][1][1].is_number());
        let dir = tempfile::tempdir().unwrap();
        lat.write_debug_dump(&dir.path().join("lat.json")).unwrap();
    }
}
