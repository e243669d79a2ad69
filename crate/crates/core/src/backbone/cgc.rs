//! Customized gate control: task-specific and shared experts mixed per task
//! by a softmax gate.
//!
//! Expert order inside a layer is `[task 0 specific .., task 1 specific ..,
//! .., shared ..]`. Task `k`'s gate only produces logits for its own
//! specific experts followed by the shared ones; the optional shared gate
//! (used between stacked layers) covers every expert.

use rand::Rng;

use crate::error::ModelError;
use crate::nn::ops::{softmax_backward, softmax_in_place};
use crate::nn::{Linear, Mlp, MlpCache, ParamStore};

#[derive(Debug, Clone)]
pub struct CgcLayer {
    num_tasks: usize,
    num_specific: usize,
    num_shared: usize,
    specific: Vec<Mlp>,
    shared: Vec<Mlp>,
    gates: Vec<Linear>,
    shared_gate: Option<Linear>,
    in_dim: usize,
    expert_dim: usize,
}

#[derive(Debug, Clone)]
pub struct CgcCache {
    task_inputs: Vec<Vec<f64>>,
    shared_input: Vec<f64>,
    specific: Vec<MlpCache>,
    shared: Vec<MlpCache>,
    /// Visible-expert weights per task.
    pub gate_weights: Vec<Vec<f64>>,
    shared_gate_weights: Option<Vec<f64>>,
    pub task_outputs: Vec<Vec<f64>>,
    pub shared_output: Option<Vec<f64>>,
}

impl CgcLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        num_tasks: usize,
        num_specific: usize,
        num_shared: usize,
        in_dim: usize,
        hidden: usize,
        expert_dim: usize,
        with_shared_gate: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if num_specific + num_shared == 0 {
            return Err(ModelError::Config("a CGC layer needs at least one expert".into()));
        }
        let dims = [in_dim, hidden, expert_dim];
        let mut specific = Vec::with_capacity(num_tasks * num_specific);
        for k in 0..num_tasks {
            for j in 0..num_specific {
                specific.push(Mlp::new(store, &format!("{name}.task{k}.expert{j}"), &dims, true, rng));
            }
        }
        let shared = (0..num_shared)
            .map(|j| Mlp::new(store, &format!("{name}.shared.expert{j}"), &dims, true, rng))
            .collect();
        let gates = (0..num_tasks)
            .map(|k| {
                Linear::new(
                    store,
                    &format!("{name}.task{k}.gate"),
                    in_dim,
                    num_specific + num_shared,
                    false,
                    rng,
                )
            })
            .collect();
        let shared_gate = with_shared_gate.then(|| {
            Linear::new(
                store,
                &format!("{name}.shared.gate"),
                in_dim,
                num_tasks * num_specific + num_shared,
                false,
                rng,
            )
        });
        Ok(CgcLayer {
            num_tasks,
            num_specific,
            num_shared,
            specific,
            shared,
            gates,
            shared_gate,
            in_dim,
            expert_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn expert_dim(&self) -> usize {
        self.expert_dim
    }

    pub fn num_experts(&self) -> usize {
        self.specific.len() + self.shared.len()
    }

    pub fn has_shared_gate(&self) -> bool {
        self.shared_gate.is_some()
    }

    pub fn gate(&self, task: usize) -> &Linear {
        &self.gates[task]
    }

    /// Expert networks in layer order (specific per task, then shared).
    pub fn experts(&self) -> impl Iterator<Item = &Mlp> {
        self.specific.iter().chain(&self.shared)
    }

    /// Positions (in layer order) of the experts task `k` can see.
    pub fn visible(&self, task: usize) -> Vec<usize> {
        let s = self.num_specific;
        (task * s..(task + 1) * s)
            .chain(self.num_tasks * s..self.num_tasks * s + self.num_shared)
            .collect()
    }

    pub fn forward(&self, p: &[f64], task_inputs: &[Vec<f64>], shared_input: &[f64]) -> CgcCache {
        debug_assert_eq!(task_inputs.len(), self.num_tasks);
        let s = self.num_specific;
        let specific: Vec<MlpCache> = self
            .specific
            .iter()
            .enumerate()
            .map(|(i, e)| e.forward(p, &task_inputs[i / s]))
            .collect();
        let shared: Vec<MlpCache> = self.shared.iter().map(|e| e.forward(p, shared_input)).collect();

        let expert_out = |i: usize| -> &[f64] {
            if i < specific.len() {
                specific[i].output()
            } else {
                shared[i - specific.len()].output()
            }
        };
        let mix = |weights: &[f64], members: &[usize]| {
            let mut out = vec![0.0; self.expert_dim];
            for (&w, &e) in weights.iter().zip(members) {
                for (o, &h) in out.iter_mut().zip(expert_out(e)) {
                    *o += w * h;
                }
            }
            out
        };

        let mut gate_weights = Vec::with_capacity(self.num_tasks);
        let mut task_outputs = Vec::with_capacity(self.num_tasks);
        for k in 0..self.num_tasks {
            let mut w = self.gates[k].forward(p, &task_inputs[k]);
            softmax_in_place(&mut w);
            task_outputs.push(mix(&w, &self.visible(k)));
            gate_weights.push(w);
        }
        let (shared_gate_weights, shared_output) = match &self.shared_gate {
            Some(gate) => {
                let mut w = gate.forward(p, shared_input);
                softmax_in_place(&mut w);
                let all: Vec<usize> = (0..self.num_experts()).collect();
                let out = mix(&w, &all);
                (Some(w), Some(out))
            }
            None => (None, None),
        };

        CgcCache {
            task_inputs: task_inputs.to_vec(),
            shared_input: shared_input.to_vec(),
            specific,
            shared,
            gate_weights,
            shared_gate_weights,
            task_outputs,
            shared_output,
        }
    }

    /// Returns input gradients `(per task, shared)`.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &CgcCache,
        d_task_out: &[Vec<f64>],
        d_shared_out: Option<&[f64]>,
        g: &mut [f64],
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n_exp = self.num_experts();
        let n_spec = self.specific.len();
        let expert_out = |i: usize| -> &[f64] {
            if i < n_spec {
                cache.specific[i].output()
            } else {
                cache.shared[i - n_spec].output()
            }
        };
        let mut d_expert = vec![vec![0.0; self.expert_dim]; n_exp];
        let mut d_task_in = vec![vec![0.0; self.in_dim]; self.num_tasks];
        let mut d_shared_in = vec![0.0; self.in_dim];

        let mut through_gate = |gate: &Linear,
                                weights: &[f64],
                                members: &[usize],
                                d_out: &[f64],
                                input: &[f64],
                                d_in: &mut [f64],
                                d_expert: &mut [Vec<f64>]| {
            let mut dw = vec![0.0; members.len()];
            for (j, &e) in members.iter().enumerate() {
                let h = expert_out(e);
                dw[j] = d_out.iter().zip(h).map(|(a, b)| a * b).sum();
                for (de, &d) in d_expert[e].iter_mut().zip(d_out) {
                    *de += weights[j] * d;
                }
            }
            let mut dz = vec![0.0; members.len()];
            softmax_backward(weights, &dw, &mut dz);
            gate.backward(p, input, &dz, g, Some(d_in));
        };

        for k in 0..self.num_tasks {
            through_gate(
                &self.gates[k],
                &cache.gate_weights[k],
                &self.visible(k),
                &d_task_out[k],
                &cache.task_inputs[k],
                &mut d_task_in[k],
                &mut d_expert,
            );
        }
        if let (Some(gate), Some(weights), Some(d_out)) =
            (&self.shared_gate, &cache.shared_gate_weights, d_shared_out)
        {
            let all: Vec<usize> = (0..n_exp).collect();
            through_gate(
                gate,
                weights,
                &all,
                d_out,
                &cache.shared_input,
                &mut d_shared_in,
                &mut d_expert,
            );
        }

        let s = self.num_specific;
        for (i, expert) in self.specific.iter().enumerate() {
            let dx = expert.backward(p, &cache.specific[i], &d_expert[i], g);
            for (a, b) in d_task_in[i / s].iter_mut().zip(&dx) {
                *a += b;
            }
        }
        for (j, expert) in self.shared.iter().enumerate() {
            let dx = expert.backward(p, &cache.shared[j], &d_expert[n_spec + j], g);
            for (a, b) in d_shared_in.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        (d_task_in, d_shared_in)
    }

    /// Task `k`'s gate weights spread over every expert of the layer, with
    /// exact zeros for experts outside its view.
    pub fn gate_weights_full(&self, p: &[f64], x: &[f64], task: usize) -> Vec<f64> {
        let mut w = self.gates[task].forward(p, x);
        softmax_in_place(&mut w);
        self.spread(task, &w)
    }

    /// Places task `k`'s visible-expert weights at their layer positions.
    pub fn spread(&self, task: usize, visible_weights: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.num_experts()];
        for (&wi, e) in visible_weights.iter().zip(self.visible(task)) {
            full[e] = wi;
        }
        full
    }
}

/// Gated representation `g^k` of a single CGC layer applied to `x`.
pub fn cgc_forward(layer: &CgcLayer, p: &[f64], x: &[f64], task: usize) -> Result<Vec<f64>, ModelError> {
    if x.len() != layer.in_dim {
        return Err(ModelError::Shape(format!(
            "CGC input has length {}, layer expects {}",
            x.len(),
            layer.in_dim
        )));
    }
    if task >= layer.num_tasks {
        return Err(ModelError::Shape(format!(
            "task {task} out of range for {} tasks",
            layer.num_tasks
        )));
    }
    let inputs = vec![x.to_vec(); layer.num_tasks];
    let mut cache = layer.forward(p, &inputs, x);
    Ok(cache.task_outputs.swap_remove(task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_expert_params(store: &mut ParamStore, layer: &CgcLayer, outputs: &[[f64; 2]]) {
        // Each expert is [in=1, hidden=1, out=2]; with zero weights and the
        // final bias set, its ReLU output is that bias.
        let data = store.data_mut();
        for v in data.iter_mut() {
            *v = 0.0;
        }
        for (e, out) in layer.experts().zip(outputs) {
            let last = &e.layers()[1];
            last.bias().unwrap().of_mut(data).copy_from_slice(out);
        }
    }

    #[test]
    fn single_expert_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = CgcLayer::new(&mut store, "c", 1, 0, 1, 1, 1, 2, false, &mut rng).unwrap();
        identity_expert_params(&mut store, &layer, &[[0.3, 0.9]]);
        let g = cgc_forward(&layer, store.data(), &[1.0], 0).unwrap();
        assert_eq!(g, vec![0.3, 0.9]);
    }

    #[test]
    fn zero_logits_average_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = CgcLayer::new(&mut store, "c", 1, 1, 1, 1, 1, 2, false, &mut rng).unwrap();
        identity_expert_params(&mut store, &layer, &[[1.0, 0.0], [0.0, 1.0]]);
        let g = cgc_forward(&layer, store.data(), &[1.0], 0).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn gate_weights_mix_expert_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = CgcLayer::new(&mut store, "c", 1, 1, 1, 1, 1, 2, false, &mut rng).unwrap();
        identity_expert_params(&mut store, &layer, &[[1.0, 0.0], [0.0, 1.0]]);
        // logits ln(0.7), ln(0.3) on input 1.0 give softmax weights 0.7, 0.3
        let gw = layer.gate(0).weight();
        gw.of_mut(store.data_mut()).copy_from_slice(&[0.7f64.ln(), 0.3f64.ln()]);
        let g = cgc_forward(&layer, store.data(), &[1.0], 0).unwrap();
        assert!((g[0] - 0.7).abs() < 1e-15 && (g[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = CgcLayer::new(&mut store, "c", 2, 1, 1, 3, 4, 2, false, &mut rng).unwrap();
        assert!(matches!(cgc_forward(&layer, store.data(), &[1.0], 0), Err(ModelError::Shape(_))));
    }

    #[test]
    fn visible_experts_exclude_other_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = CgcLayer::new(&mut store, "c", 3, 2, 1, 4, 4, 2, true, &mut rng).unwrap();
        assert_eq!(layer.visible(1), vec![2, 3, 6]);
        let w = layer.gate_weights_full(store.data(), &[0.1, -0.2, 0.3, 0.9], 1);
        assert_eq!(w.iter().enumerate().filter(|(i, _)| ![2, 3, 6].contains(i)).map(|(_, v)| *v).sum::<f64>(), 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
