use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{sigmoid, Matrix, SeededRng};

/// Weights of one LSTM cell. Gate rows are stacked as input, forget,
/// candidate, output, each `hidden` rows tall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub w_ih: Matrix,
    pub w_hh: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            hidden: vec![0.0; hidden],
            cell: vec![0.0; hidden],
        }
    }
}

/// Activations kept from one forward step for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    input: Vec<f64>,
    prev: LstmState,
    gates: Vec<f64>,
    tanh_cell: Vec<f64>,
}

impl LstmWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmWeights {
            w_ih: Matrix::zeros(4 * hidden, input),
            w_hh: Matrix::zeros(4 * hidden, hidden),
            bias: Matrix::zeros(4 * hidden, 1),
        }
    }

    /// Uniform in `±1/√(input + hidden)`, forget bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / ((input + hidden) as f64).sqrt();
        let w_ih = Matrix::from_fn(4 * hidden, input, |_, _| rng.uniform(-bound, bound));
        let w_hh = Matrix::from_fn(4 * hidden, hidden, |_, _| rng.uniform(-bound, bound));
        let bias = Matrix::from_fn(4 * hidden, 1, |r, _| {
            if (hidden..2 * hidden).contains(&r) {
                1.0
            } else {
                0.0
            }
        });
        LstmWeights { w_ih, w_hh, bias }
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 3] {
        [&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }

    fn check(&self, input: &[f64], state: &LstmState) -> Result<()> {
        let h = self.hidden_size();
        if self.w_ih.rows() != 4 * h || self.w_hh.rows() != 4 * h || self.bias.len() != 4 * h {
            return Err(contract("lstm weights have inconsistent gate rows"));
        }
        if input.len() != self.input_size() {
            return Err(contract(format!(
                "lstm input has {} entries, expected {}",
                input.len(),
                self.input_size()
            )));
        }
        if state.hidden.len() != h || state.cell.len() != h {
            return Err(contract("lstm state size does not match the cell"));
        }
        Ok(())
    }

    /// One cell update; returns the new state and what backward needs.
    pub fn forward_step(&self, input: &[f64], state: &LstmState) -> (LstmState, LstmStepCache) {
        let h = self.hidden_size();
        let mut gates = self.bias.data().to_vec();
        self.w_ih.matvec_acc(input, &mut gates);
        self.w_hh.matvec_acc(&state.hidden, &mut gates);
        for (r, z) in gates.iter_mut().enumerate() {
            *z = if (2 * h..3 * h).contains(&r) {
                z.tanh()
            } else {
                sigmoid(*z)
            };
        }
        let mut cell = vec![0.0; h];
        let mut hidden = vec![0.0; h];
        let mut tanh_cell = vec![0.0; h];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            cell[j] = f * state.cell[j] + i * g;
            tanh_cell[j] = cell[j].tanh();
            hidden[j] = o * tanh_cell[j];
        }
        let cache = LstmStepCache {
            input: input.to_vec(),
            prev: state.clone(),
            gates,
            tanh_cell,
        };
        (LstmState { hidden, cell }, cache)
    }

    /// Reverse of [`forward_step`](Self::forward_step). `d_hidden` and
    /// `d_cell` are the gradients arriving at the step's outputs; returns
    /// `(d_input, d_prev_hidden, d_prev_cell)` and accumulates into `grads`.
    pub fn backward_step(
        &self,
        cache: &LstmStepCache,
        d_hidden: &[f64],
        d_cell: &[f64],
        grads: &mut LstmWeights,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden_size();
        let g = &cache.gates;
        let mut dz = vec![0.0; 4 * h];
        let mut d_prev_cell = vec![0.0; h];
        for j in 0..h {
            let (i, f, c, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = cache.tanh_cell[j];
            let dc = d_cell[j] + d_hidden[j] * o * (1.0 - tc * tc);
            let d_o = d_hidden[j] * tc;
            dz[j] = dc * c * i * (1.0 - i);
            dz[h + j] = dc * cache.prev.cell[j] * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - c * c);
            dz[3 * h + j] = d_o * o * (1.0 - o);
            d_prev_cell[j] = dc * f;
        }
        grads.w_ih.add_outer(&dz, &cache.input);
        grads.w_hh.add_outer(&dz, &cache.prev.hidden);
        for (b, d) in grads.bias.data_mut().iter_mut().zip(&dz) {
            *b += d;
        }
        let mut d_input = vec![0.0; self.input_size()];
        self.w_ih.tmatvec_acc(&dz, &mut d_input);
        let mut d_prev_hidden = vec![0.0; h];
        self.w_hh.tmatvec_acc(&dz, &mut d_prev_hidden);
        (d_input, d_prev_hidden, d_prev_cell)
    }

    /// Runs the cell over `inputs` in the given order from a zero state.
    pub fn run_sequence(&self, inputs: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<LstmStepCache>) {
        let mut state = LstmState::zeros(self.hidden_size());
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (next, cache) = self.forward_step(x, &state);
            outputs.push(next.hidden.clone());
            caches.push(cache);
            state = next;
        }
        (outputs, caches)
    }

    /// BPTT over a sequence produced by [`run_sequence`](Self::run_sequence),
    /// with `d_outputs` in the same order. Returns per-step input gradients.
    pub fn backward_sequence(
        &self,
        caches: &[LstmStepCache],
        d_outputs: &[Vec<f64>],
        grads: &mut LstmWeights,
    ) -> Vec<Vec<f64>> {
        let h = self.hidden_size();
        let mut d_inputs = vec![Vec::new(); caches.len()];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for s in (0..caches.len()).rev() {
            let dh: Vec<f64> = d_outputs[s]
                .iter()
                .zip(&dh_next)
                .map(|(a, b)| a + b)
                .collect();
            let (dx, dh_prev, dc_prev) = self.backward_step(&caches[s], &dh, &dc_next, grads);
            d_inputs[s] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        d_inputs
    }
}

/// Checked single step: `(output, new_state)` where the output is the new
/// hidden vector.
pub fn lstm_step(
    weights: &LstmWeights,
    input: &[f64],
    state: &LstmState,
) -> Result<(Vec<f64>, LstmState)> {
    weights.check(input, state)?;
    let (next, _) = weights.forward_step(input, state);
    Ok((next.hidden.clone(), next))
}
