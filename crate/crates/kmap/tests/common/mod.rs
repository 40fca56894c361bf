//! Shared test support: straight-line oracle reimplementations of the model
//! equations in plain f64 slices (no graph involvement), plus a central
//! finite-difference gradient checker.
#![allow(dead_code)]

use kmap::data::MaterialType;
use kmap::graph::{Graph, NodeId};
use kmap::optim::ParamStore;
use kmap::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- plain-slice primitives -------------------------------------------

pub fn o_matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn o_sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
}

pub fn o_tanh(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.tanh()).collect()
}

pub fn o_add(parts: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; parts[0].len()];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p.iter()) {
            *o += x;
        }
    }
    out
}

pub fn o_concat(parts: &[&[f64]]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(p);
    }
    out
}

pub fn o_l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One-hidden-layer tanh network, the layer shape used by every
/// feed-forward block in the model.
pub fn o_ff(w1: &Tensor, b1: &[f64], w2: &Tensor, b2: &[f64], x: &[f64]) -> Vec<f64> {
    let h = o_tanh(&o_add(&[&o_matvec(w1, x), b1]));
    o_add(&[&o_matvec(w2, &h), b2])
}

// ---- equation oracles ---------------------------------------------------

pub struct KtOracleParams {
    pub e_q: Tensor,
    pub e_l: Tensor,
    pub e_h: Tensor,
    pub e_s: Tensor,
    pub b_e: Vec<f64>,
    pub d_q: Tensor,
    pub d_l: Tensor,
    pub d_b: Tensor,
    pub d_s: Tensor,
    pub b_d: Vec<f64>,
    pub w_tr: Tensor,
}

pub struct KtOracleInput {
    pub material_type: MaterialType,
    pub material: Vec<f64>,
    pub response: Option<Vec<f64>>,
    pub h_prev: Vec<f64>,
    pub student: Vec<f64>,
    pub z_prev: Vec<f64>,
    pub z_cur: Vec<f64>,
    pub w: Vec<f64>,
}

/// Erase-followed-by-add memory update, transcribed term by term: the
/// type-gated material projection plus hidden-state, student and bias terms
/// through a sigmoid (erase) and tanh (add); each concept row of the
/// transition-gated memory attenuated by `1 - w_i * e` and shifted by
/// `w_i * d`.
pub fn o_erase_add(
    p: &KtOracleParams,
    memory: &[Vec<f64>],
    input: &KtOracleInput,
) -> Vec<Vec<f64>> {
    let (erase_branch, add_branch) = match input.material_type {
        MaterialType::Assessed => {
            let qr = o_concat(&[&input.material, input.response.as_ref().unwrap()]);
            (o_matvec(&p.e_q, &qr), o_matvec(&p.d_q, &qr))
        }
        MaterialType::NonAssessed => (
            o_matvec(&p.e_l, &input.material),
            o_matvec(&p.d_l, &input.material),
        ),
    };
    let e = o_sigmoid(&o_add(&[
        &erase_branch,
        &o_matvec(&p.e_h, &input.h_prev),
        &o_matvec(&p.e_s, &input.student),
        &p.b_e,
    ]));
    let d = o_tanh(&o_add(&[
        &add_branch,
        &o_matvec(&p.d_b, &input.h_prev),
        &o_matvec(&p.d_s, &input.student),
        &p.b_d,
    ]));
    let gate = o_tanh(&o_matvec(&p.w_tr, &o_concat(&[&input.z_prev, &input.z_cur])));
    memory
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &m)| gate[j] * m * (1.0 - input.w[i] * e[j]) + input.w[i] * d[j])
                .collect()
        })
        .collect()
}

/// Mastery read: concept-weighted sum of the transition-gated memory rows.
pub fn o_read_mastery(
    w_tr: &Tensor,
    memory: &[Vec<f64>],
    w: &[f64],
    z_prev: &[f64],
    z_target: &[f64],
) -> Vec<f64> {
    let gate = o_tanh(&o_matvec(w_tr, &o_concat(&[z_prev, z_target])));
    let d = memory[0].len();
    let mut out = vec![0.0; d];
    for (i, row) in memory.iter().enumerate() {
        for j in 0..d {
            out[j] += w[i] * gate[j] * row[j];
        }
    }
    out
}

/// Exponentiated NT-Xent: sum over negatives of exp(-dist) divided by
/// exp(-dist to positive), one ratio per material type summed by the caller.
pub fn o_ntxent(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> f64 {
    let numer: f64 = negatives
        .iter()
        .map(|n| (-o_l2_dist(anchor, n)).exp())
        .sum();
    numer / (-o_l2_dist(anchor, positive)).exp()
}

// ---- finite-difference gradient checking ---------------------------------

pub struct GradCheckReport {
    pub coords_checked: usize,
    pub coords_nonzero: usize,
    pub max_rel_err: f64,
}

/// Compare reverse-mode gradients against central finite differences on
/// `n_coords` random coordinates of parameters that receive gradient.
/// Relative error uses `|ad - fd| / max(|ad|, |fd|)` with near-zero pairs
/// counting as exact.
pub fn grad_check(
    store: &mut ParamStore,
    n_coords: usize,
    h: f64,
    seed: u64,
    build_loss: impl Fn(&mut Graph, &ParamStore) -> kmap::Result<NodeId>,
) -> GradCheckReport {
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build_loss(&mut g, store).expect("loss builds");
    g.backward(loss, store).expect("backward succeeds");
    let grads: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();

    // pool: parameters that receive any gradient
    let touched: Vec<usize> = (0..grads.len())
        .filter(|&i| grads[i].data().iter().any(|&v| v != 0.0))
        .collect();
    assert!(!touched.is_empty(), "loss touches no parameters");

    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let loss = build_loss(&mut g, store).expect("loss builds");
        g.value(loss).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut nonzero = 0usize;
    for _ in 0..n_coords {
        let pi = touched[rng.random_range(0..touched.len())];
        let ci = rng.random_range(0..grads[pi].numel());
        let orig = store.value(pi).data()[ci];
        store.value_mut(pi).data_mut()[ci] = orig + h;
        let up = eval(store);
        store.value_mut(pi).data_mut()[ci] = orig - h;
        let down = eval(store);
        store.value_mut(pi).data_mut()[ci] = orig;
        let fd = (up - down) / (2.0 * h);
        let ad = grads[pi].data()[ci];
        let scale = ad.abs().max(fd.abs());
        if scale < 1e-10 {
            continue; // both effectively zero
        }
        nonzero += 1;
        let rel = (ad - fd).abs() / scale;
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        coords_checked: n_coords,
        coords_nonzero: nonzero,
        max_rel_err: max_rel,
    }
}

// ---- misc helpers ----------------------------------------------------------

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale).collect()
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    let err = (actual - expected).abs() / expected.abs().max(1.0);
    assert!(
        err <= tol,
        "{what}: actual {actual} vs expected {expected} (rel err {err:.3e} > {tol:.1e})"
    );
}
