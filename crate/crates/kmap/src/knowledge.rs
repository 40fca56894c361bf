//! Knowledge tracing: the dynamic value memory with its
//! erase-followed-by-add update, the mastery read, and the performance head.
//!
//! The memory is an `n_c x d_v` matrix per student. Each step first gates
//! the previous memory row-wise by a learned transition of the consecutive
//! type embeddings, then attenuates it with an erase vector and adds an add
//! vector, both scaled per concept by the material's concept weights.

use crate::config::ModelDims;
use crate::data::MaterialType;
use crate::embed::INIT_STD;
use crate::error::{KmapError, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::FeedForward;
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct KtParams {
    pub e_q: usize,
    pub e_l: usize,
    pub e_h: usize,
    pub e_s: usize,
    pub b_e: usize,
    pub d_q: usize,
    pub d_l: usize,
    pub d_b: usize,
    pub d_s: usize,
    pub b_d: usize,
    pub w_tr: usize,
    pub perf: FeedForward,
    dims: ModelDims,
}

impl KtParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Self {
        let d_k = dims.d_v;
        let mat = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R| {
            store.register(name, Tensor::randn(vec![rows, cols], 0.0, INIT_STD, rng))
        };
        let e_q = mat(store, "kt.E_q", d_k, dims.d_qk + dims.d_r, rng);
        let e_l = mat(store, "kt.E_l", d_k, dims.d_lk, rng);
        let e_h = mat(store, "kt.E_h", d_k, dims.d_h, rng);
        let e_s = mat(store, "kt.E_s", d_k, dims.d_s, rng);
        let b_e = store.register("kt.b_e", Tensor::zeros(vec![d_k]));
        let d_q = mat(store, "kt.D_q", d_k, dims.d_qk + dims.d_r, rng);
        let d_l = mat(store, "kt.D_l", d_k, dims.d_lk, rng);
        let d_b = mat(store, "kt.D_b", d_k, dims.d_h, rng);
        let d_s = mat(store, "kt.D_s", d_k, dims.d_s, rng);
        let b_d = store.register("kt.b_d", Tensor::zeros(vec![d_k]));
        let w_tr = mat(store, "kt.W_tr", dims.d_v, 2 * dims.d_z, rng);
        let perf = FeedForward::new(
            store,
            "kt.perf",
            d_k + dims.d_qk + dims.d_h,
            dims.d_v,
            1,
            rng,
        );
        KtParams {
            e_q,
            e_l,
            e_h,
            e_s,
            b_e,
            d_q,
            d_l,
            d_b,
            d_s,
            b_d,
            w_tr,
            perf,
            dims: dims.clone(),
        }
    }

    /// Fresh memory for the first segment of a stream.
    pub fn initial_memory<R: Rng>(&self, rng: &mut R) -> Tensor {
        Tensor::randn(vec![self.dims.n_c, self.dims.d_v], 0.0, 0.1, rng)
    }

    /// Row-wise transition gate `tanh(W_tr [z_prev (+) z_next])`.
    fn transition_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_prev: NodeId,
        z_next: NodeId,
    ) -> Result<NodeId> {
        let w_tr = g.param(store, self.w_tr)?;
        let zz = g.concat(&[z_prev, z_next])?;
        let pre = g.matvec(w_tr, zz)?;
        g.tanh(pre)
    }
}

/// Per-step inputs to the memory update.
pub struct KtStepInput {
    pub material_type: MaterialType,
    /// Knowledge-side material embedding of the step.
    pub material: NodeId,
    /// Response embedding; present exactly for assessed steps.
    pub response: Option<NodeId>,
    /// Behavior hidden state from the previous step.
    pub h_prev: NodeId,
    pub student: NodeId,
    /// Type embedding of the previous step (or the learned start stand-in).
    pub z_prev: NodeId,
    /// Type embedding of this step.
    pub z_cur: NodeId,
    /// Concept weights of the material.
    pub concept_weights: NodeId,
}

/// Apply the erase-followed-by-add update and return the new memory node.
pub fn erase_add_update(
    g: &mut Graph,
    store: &ParamStore,
    kt: &KtParams,
    memory: NodeId,
    input: &KtStepInput,
) -> Result<NodeId> {
    // material branch is gated by the step type: only the matching
    // projection is evaluated
    let (erase_branch, add_branch) = match input.material_type {
        MaterialType::Assessed => {
            let response = input.response.ok_or_else(|| {
                KmapError::invalid("assessed step is missing a response embedding")
            })?;
            let qr = g.concat(&[input.material, response])?;
            let e_q = g.param(store, kt.e_q)?;
            let d_q = g.param(store, kt.d_q)?;
            (g.matvec(e_q, qr)?, g.matvec(d_q, qr)?)
        }
        MaterialType::NonAssessed => {
            let e_l = g.param(store, kt.e_l)?;
            let d_l = g.param(store, kt.d_l)?;
            (
                g.matvec(e_l, input.material)?,
                g.matvec(d_l, input.material)?,
            )
        }
    };

    let e_h = g.param(store, kt.e_h)?;
    let e_s = g.param(store, kt.e_s)?;
    let b_e = g.param(store, kt.b_e)?;
    let eh = g.matvec(e_h, input.h_prev)?;
    let es = g.matvec(e_s, input.student)?;
    let e_pre = g.add_n(&[erase_branch, eh, es, b_e])?;
    let erase = g.sigmoid(e_pre)?;

    let d_b = g.param(store, kt.d_b)?;
    let d_s = g.param(store, kt.d_s)?;
    let b_d = g.param(store, kt.b_d)?;
    let dh = g.matvec(d_b, input.h_prev)?;
    let ds = g.matvec(d_s, input.student)?;
    let d_pre = g.add_n(&[add_branch, dh, ds, b_d])?;
    let addvec = g.tanh(d_pre)?;

    let gate = kt.transition_gate(g, store, input.z_prev, input.z_cur)?;
    let gated = g.mul_row_bcast(memory, gate)?;

    let w_e = g.outer(input.concept_weights, erase)?;
    let ones = g.constant(Tensor::filled(
        g.shape(w_e).to_vec(),
        1.0,
    ))?;
    let keep = g.sub(ones, w_e)?;
    let kept = g.mul(gated, keep)?;
    let w_d = g.outer(input.concept_weights, addvec)?;
    g.add(kept, w_d)
}

/// Mastery read: concept-weighted sum of the transition-gated memory rows.
pub fn read_mastery(
    g: &mut Graph,
    store: &ParamStore,
    kt: &KtParams,
    memory: NodeId,
    concept_weights: NodeId,
    z_prev: NodeId,
    z_target: NodeId,
) -> Result<NodeId> {
    let gate = kt.transition_gate(g, store, z_prev, z_target)?;
    let gated = g.mul_row_bcast(memory, gate)?;
    g.vecmat(concept_weights, gated)
}

/// Probability of a correct response on the next assessed material.
/// Returns `(p, logit)`; the logit feeds the numerically stable BCE.
pub fn predict_performance(
    g: &mut Graph,
    store: &ParamStore,
    kt: &KtParams,
    next_type: MaterialType,
    mastery: NodeId,
    question: NodeId,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    if next_type != MaterialType::Assessed {
        return Err(KmapError::invalid(
            "performance prediction is only defined when the next material is assessed",
        ));
    }
    let x = g.concat(&[mastery, question, h])?;
    let logit_vec = kt.perf.apply(g, store, x)?;
    let logit = g.to_scalar(logit_vec)?;
    let p = g.sigmoid(logit)?;
    Ok((p, logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, KtParams, ModelDims) {
        let dims = ModelDims::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kt = KtParams::new(&mut store, &dims, &mut rng);
        (store, kt, dims)
    }

    fn zero_param(store: &mut ParamStore, idx: usize) {
        for v in store.value_mut(idx).data_mut() {
            *v = 0.0;
        }
    }

    fn const_input(g: &mut Graph, dim: usize, v: f64) -> NodeId {
        g.constant(Tensor::filled(vec![dim], v)).unwrap()
    }

    #[test]
    fn zero_inputs_give_half_erase_zero_add() {
        let (mut store, kt, dims) = setup();
        for idx in [kt.b_e, kt.b_d] {
            zero_param(&mut store, idx);
        }
        let mut g = Graph::new();
        let memory = g.constant(Tensor::filled(vec![dims.n_c, dims.d_v], 1.0)).unwrap();
        let input = KtStepInput {
            material_type: MaterialType::NonAssessed,
            material: const_input(&mut g, dims.d_lk, 0.0),
            response: None,
            h_prev: const_input(&mut g, dims.d_h, 0.0),
            student: const_input(&mut g, dims.d_s, 0.0),
            z_prev: const_input(&mut g, dims.d_z, 0.0),
            z_cur: const_input(&mut g, dims.d_z, 0.0),
            concept_weights: {
                let mut w = vec![0.0; dims.n_c];
                w[0] = 1.0;
                g.constant(Tensor::vector(w)).unwrap()
            },
        };
        // with all-zero inputs: e = sigma(0) = 0.5, d = tanh(0) = 0, and the
        // transition gate tanh(0) = 0 zeroes the carried memory, so row 0
        // becomes 0 * (1 - 0.5) + 0 = 0
        let out = erase_add_update(&mut g, &store, &kt, memory, &input).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_erase_replaces_the_attended_row() {
        let (mut store, kt, dims) = setup();
        // a huge erase bias saturates sigma to exactly 1.0 in f64
        for v in store.value_mut(kt.b_e).data_mut() {
            *v = 500.0;
        }
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let memory_t = Tensor::randn(vec![dims.n_c, dims.d_v], 0.0, 1.0, &mut rng);
        let memory = g.constant(memory_t).unwrap();
        let hot = 1; // attended concept
        let mut w = vec![0.0; dims.n_c];
        w[hot] = 1.0;
        let input = KtStepInput {
            material_type: MaterialType::NonAssessed,
            material: const_input(&mut g, dims.d_lk, 0.3),
            response: None,
            h_prev: const_input(&mut g, dims.d_h, 0.1),
            student: const_input(&mut g, dims.d_s, -0.2),
            z_prev: const_input(&mut g, dims.d_z, 0.5),
            z_cur: const_input(&mut g, dims.d_z, -0.5),
            concept_weights: g.constant(Tensor::vector(w)).unwrap(),
        };
        let out = erase_add_update(&mut g, &store, &kt, memory, &input).unwrap();

        // recompute d_t and the transition-gated memory by hand
        let lec: Vec<f64> = vec![0.3; dims.d_lk];
        let h: Vec<f64> = vec![0.1; dims.d_h];
        let s: Vec<f64> = vec![-0.2; dims.d_s];
        let matvec = |t: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..t.rows())
                .map(|i| t.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        };
        let dl = matvec(store.value(kt.d_l), &lec);
        let db = matvec(store.value(kt.d_b), &h);
        let dsv = matvec(store.value(kt.d_s), &s);
        let d_t: Vec<f64> = (0..dims.d_v)
            .map(|i| (dl[i] + db[i] + dsv[i] + store.value(kt.b_d).data()[i]).tanh())
            .collect();
        for (j, &v) in g.value(out).row(hot).iter().enumerate() {
            assert!((v - d_t[j]).abs() < 1e-12, "attended row must equal d_t");
        }
    }

    #[test]
    fn read_mastery_one_hot_and_uniform() {
        let (store, kt, dims) = setup();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let memory = g
            .constant(Tensor::randn(vec![dims.n_c, dims.d_v], 0.0, 1.0, &mut rng))
            .unwrap();
        let z_prev = const_input(&mut g, dims.d_z, 0.2);
        let z_tgt = const_input(&mut g, dims.d_z, -0.1);
        let mut hot = vec![0.0; dims.n_c];
        hot[2] = 1.0;
        let w_hot = g.constant(Tensor::vector(hot)).unwrap();
        let c = read_mastery(&mut g, &store, &kt, memory, w_hot, z_prev, z_tgt).unwrap();
        // equals the gated row 2
        let gate = kt.transition_gate(&mut g, &store, z_prev, z_tgt).unwrap();
        let gated = g.mul_row_bcast(memory, gate).unwrap();
        let row2 = g.select_row(gated, 2).unwrap();
        assert_eq!(g.value(c).data(), g.value(row2).data());

        // uniform weights give the mean of gated rows
        let w_uni = g
            .constant(Tensor::filled(vec![dims.n_c], 1.0 / dims.n_c as f64))
            .unwrap();
        let c_uni = read_mastery(&mut g, &store, &kt, memory, w_uni, z_prev, z_tgt).unwrap();
        let mean: Vec<f64> = (0..dims.d_v)
            .map(|j| {
                (0..dims.n_c)
                    .map(|i| g.value(gated).at(i, j))
                    .sum::<f64>()
                    / dims.n_c as f64
            })
            .collect();
        for (a, b) in g.value(c_uni).data().iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_transition_zeroes_mastery() {
        let (mut store, kt, dims) = setup();
        zero_param(&mut store, kt.w_tr);
        let mut g = Graph::new();
        let memory = g.constant(Tensor::filled(vec![dims.n_c, dims.d_v], 3.0)).unwrap();
        let w = g
            .constant(Tensor::filled(vec![dims.n_c], 1.0 / dims.n_c as f64))
            .unwrap();
        let z = const_input(&mut g, dims.d_z, 1.0);
        let c = read_mastery(&mut g, &store, &kt, memory, w, z, z).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_predicts_half() {
        let (mut store, kt, dims) = setup();
        for idx in [kt.perf.hidden.w, kt.perf.out.w] {
            zero_param(&mut store, idx);
        }
        let mut g = Graph::new();
        let c = const_input(&mut g, dims.d_v, 0.7);
        let q = const_input(&mut g, dims.d_qk, -0.3);
        let h = const_input(&mut g, dims.d_h, 0.2);
        let (p, _) =
            predict_performance(&mut g, &store, &kt, MaterialType::Assessed, c, q, h).unwrap();
        assert_eq!(g.value(p).item(), 0.5);
    }

    #[test]
    fn performance_on_lecture_rejected() {
        let (store, kt, dims) = setup();
        let mut g = Graph::new();
        let c = const_input(&mut g, dims.d_v, 0.0);
        let q = const_input(&mut g, dims.d_qk, 0.0);
        let h = const_input(&mut g, dims.d_h, 0.0);
        assert!(
            predict_performance(&mut g, &store, &kt, MaterialType::NonAssessed, c, q, h).is_err()
        );
    }

    #[test]
    fn performance_stays_in_unit_interval() {
        let (store, kt, dims) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut g = Graph::new();
            let c = g
                .constant(Tensor::randn(vec![dims.d_v], 0.0, 3.0, &mut rng))
                .unwrap();
            let q = g
                .constant(Tensor::randn(vec![dims.d_qk], 0.0, 3.0, &mut rng))
                .unwrap();
            let h = g
                .constant(Tensor::randn(vec![dims.d_h], 0.0, 3.0, &mut rng))
                .unwrap();
            let (p, _) =
                predict_performance(&mut g, &store, &kt, MaterialType::Assessed, c, q, h).unwrap();
            let v = g.value(p).item();
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn memory_stays_bounded_over_long_rollouts() {
        // contraction argument: a bound B survives one update whenever
        // B >= |gate| * B * (1 - w e) + w |d| with |gate| < 1, |d| < 1,
        // so the rollout must stay inside a fixed envelope instead of
        // blowing up
        let (store, kt, dims) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let mut memory = g
            .constant(Tensor::randn(vec![dims.n_c, dims.d_v], 0.0, 0.5, &mut rng))
            .unwrap();
        for step in 0..400 {
            let mtype = if step % 3 == 0 {
                MaterialType::NonAssessed
            } else {
                MaterialType::Assessed
            };
            let mat_dim = match mtype {
                MaterialType::Assessed => dims.d_qk,
                MaterialType::NonAssessed => dims.d_lk,
            };
            let material = g
                .constant(Tensor::randn(vec![mat_dim], 0.0, 1.0, &mut rng))
                .unwrap();
            let response = match mtype {
                MaterialType::Assessed => Some(
                    g.constant(Tensor::randn(vec![dims.d_r], 0.0, 1.0, &mut rng))
                        .unwrap(),
                ),
                MaterialType::NonAssessed => None,
            };
            let mut w = vec![0.0; dims.n_c];
            let hot = (step * 7) % dims.n_c;
            w[hot] = 1.0;
            let input = KtStepInput {
                material_type: mtype,
                material,
                response,
                h_prev: g
                    .constant(Tensor::randn(vec![dims.d_h], 0.0, 1.0, &mut rng))
                    .unwrap(),
                student: g
                    .constant(Tensor::randn(vec![dims.d_s], 0.0, 1.0, &mut rng))
                    .unwrap(),
                z_prev: g
                    .constant(Tensor::randn(vec![dims.d_z], 0.0, 1.0, &mut rng))
                    .unwrap(),
                z_cur: g
                    .constant(Tensor::randn(vec![dims.d_z], 0.0, 1.0, &mut rng))
                    .unwrap(),
                concept_weights: g.constant(Tensor::vector(w)).unwrap(),
            };
            memory = erase_add_update(&mut g, &store, &kt, memory, &input).unwrap();
            for &v in g.value(memory).data() {
                assert!(v.abs() <= 10.0, "memory blew up to {v} at step {step}");
            }
        }
    }
}
