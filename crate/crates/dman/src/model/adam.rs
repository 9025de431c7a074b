//! Adam with the two-phase parameter partition: likelihood steps touch
//! everything except the routing transforms, reconstruction steps touch
//! only them. Each phase keeps its own bias-correction counter.

use std::collections::HashMap;

use super::{GradSet, ModelParams, Phase};
use crate::matrix::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub step_main: u64,
    pub step_routing: u64,
    pub m_dense: Vec<Matrix>,
    pub v_dense: Vec<Matrix>,
    pub m_embedding: Matrix,
    pub v_embedding: Matrix,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .dense_tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            step_main: 0,
            step_routing: 0,
            m_dense: zeros.clone(),
            v_dense: zeros,
            m_embedding: Matrix::zeros(params.embedding.rows(), params.embedding.cols()),
            v_embedding: Matrix::zeros(params.embedding.rows(), params.embedding.cols()),
        }
    }

    /// One update of the given phase. Main-phase steps also apply the dense
    /// embedding update built from the sparse row gradients, keeping the
    /// padding row frozen at zero.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradSet, phase: Phase) {
        let t = match phase {
            Phase::Main => {
                self.step_main += 1;
                self.step_main
            }
            Phase::Routing => {
                self.step_routing += 1;
                self.step_routing
            }
        };
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);

        let update = |m: &mut f64, v: &mut f64, g: f64, x: &mut f64, lr: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        };

        for (idx, (name, tensor)) in params.dense_tensors_mut().into_iter().enumerate() {
            if ModelParams::phase_of(&name) != phase {
                continue;
            }
            let g = &grads.dense[idx];
            for ((x, (m, v)), gv) in tensor
                .as_mut_slice()
                .iter_mut()
                .zip(
                    self.m_dense[idx]
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.v_dense[idx].as_mut_slice().iter_mut()),
                )
                .zip(g.as_slice())
            {
                update(m, v, *gv, x, self.lr);
            }
        }

        if phase == Phase::Main {
            let cols = params.embedding.cols();
            // Dense moment decay over the whole table, gradient only where
            // rows were touched; row 0 stays frozen.
            let mut row_grads: HashMap<usize, &Vec<f64>> = HashMap::new();
            for (row, g) in &grads.embedding_rows {
                if *row != 0 {
                    row_grads.insert(*row, g);
                }
            }
            for row in 1..params.embedding.rows() {
                let g_row = row_grads.get(&row);
                for c in 0..cols {
                    let g = g_row.map_or(0.0, |g| g[c]);
                    let m = &mut self.m_embedding.as_mut_slice()[row * cols + c];
                    let v = &mut self.v_embedding.as_mut_slice()[row * cols + c];
                    let x = &mut params.embedding.as_mut_slice()[row * cols + c];
                    update(m, v, g, x, self.lr);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 4,
            window: 3,
            memory_slots: 2,
            layers: 1,
            seed: 3,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 8)
    }

    #[test]
    fn main_step_leaves_routing_untouched_and_vice_versa() {
        let mut params = tiny_params();
        let mut opt = Adam::new(&params, 0.01);
        let mut grads = GradSet::zeros_like(&params);
        for g in &mut grads.dense {
            *g = g.add_scalar(1.0);
        }
        grads.embedding_rows.insert(2, vec![1.0; 4]);

        let routing_before = params.routing.clone();
        let emb_before = params.embedding.clone();
        opt.step(&mut params, &grads, Phase::Main);
        assert_eq!(params.routing, routing_before, "routing must be bit-identical");
        assert_ne!(params.positional, tiny_params().positional);
        // padding row frozen, touched row moved
        assert_eq!(params.embedding.row(0), emb_before.row(0));
        assert_ne!(params.embedding.row(2), emb_before.row(2));

        let main_snapshot = (
            params.positional.clone(),
            params.layers.clone(),
            params.w_short.clone(),
            params.embedding.clone(),
            params.init_memory.clone(),
        );
        opt.step(&mut params, &grads, Phase::Routing);
        assert_ne!(params.routing, routing_before);
        assert_eq!(params.positional, main_snapshot.0);
        assert_eq!(params.layers, main_snapshot.1);
        assert_eq!(params.w_short, main_snapshot.2);
        assert_eq!(params.embedding, main_snapshot.3);
        assert_eq!(params.init_memory, main_snapshot.4);
    }

    #[test]
    fn first_step_moves_by_lr_under_unit_gradient() {
        // With m=v=0 and g=1: m_hat=1, v_hat=1, so the update is
        // lr / (1 + eps) regardless of the gradient scale.
        let mut params = tiny_params();
        let before = params.w_short.get(0, 0);
        let mut opt = Adam::new(&params, 0.01);
        let mut grads = GradSet::zeros_like(&params);
        let idx = params
            .dense_tensors()
            .iter()
            .position(|(n, _)| n == "gate/short")
            .unwrap();
        grads.dense[idx] = grads.dense[idx].add_scalar(1.0);
        opt.step(&mut params, &grads, Phase::Main);
        let moved = before - params.w_short.get(0, 0);
        assert!((moved - 0.01 / (1.0 + ADAM_EPS)).abs() < 1e-12);
    }
}
