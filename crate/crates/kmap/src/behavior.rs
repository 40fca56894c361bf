//! Behavior modeling: the memory-conditioned LSTM, the contrastive
//! encoder/decoder over next materials, L2 candidate ranking, and the
//! cross-attention type head.

use crate::config::ModelDims;
use crate::embed::INIT_STD;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::layers::{FeedForward, Linear};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
struct Gate {
    w: usize,
    u: usize,
    b: usize,
}

impl Gate {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_x: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        Gate {
            w: store.register(
                format!("{name}.w"),
                Tensor::randn(vec![d_h, d_x], 0.0, INIT_STD, rng),
            ),
            u: store.register(
                format!("{name}.u"),
                Tensor::randn(vec![d_h, d_h], 0.0, INIT_STD, rng),
            ),
            b: store.register(format!("{name}.b"), Tensor::zeros(vec![d_h])),
        }
    }

    fn pre(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w)?;
        let u = g.param(store, self.u)?;
        let b = g.param(store, self.b)?;
        let wx = g.matvec(w, x)?;
        let uh = g.matvec(u, h)?;
        g.add_n(&[wx, uh, b])
    }
}

#[derive(Debug, Clone)]
pub struct TypeHeadParams {
    /// Query projection applied to the student profile.
    query: usize,
    /// Per-token key/value projections, in token order
    /// (question, response, lecture, hidden-state).
    keys: [usize; 4],
    values: [usize; 4],
    out: usize,
    final_lin: Linear,
    heads: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct BmParams {
    /// Projection of the concatenated step context into the LSTM input.
    pub w_in: usize,
    pub b_in: usize,
    input_gate: Gate,
    forget_gate: Gate,
    output_gate: Gate,
    cell_gate: Gate,
    pub enc_q: FeedForward,
    pub enc_l: FeedForward,
    pub dec_q: FeedForward,
    pub dec_l: FeedForward,
    pub score_q: FeedForward,
    pub score_l: FeedForward,
    pub type_head: TypeHeadParams,
    dims: ModelDims,
}

impl BmParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Self {
        let d_k = dims.d_v;
        // material (+) type (+) memory summary (+) student
        let concat_dim = dims.d_qb + dims.d_z + d_k + dims.d_s;
        let d_x = dims.d_v;
        let w_in = store.register(
            "bm.W_in",
            Tensor::randn(vec![d_x, concat_dim], 0.0, INIT_STD, rng),
        );
        let b_in = store.register("bm.b_in", Tensor::zeros(vec![d_x]));

        let wc = dims.n_c + d_k;
        let enc_in = dims.d_h + dims.d_qb + 3 * wc;
        let dec_in = dims.d_v + 4 * wc + dims.d_qb + 2 * dims.d_lb;
        let hidden = 2 * dims.d_v;
        let mk_ff = |store: &mut ParamStore, name: &str, i, o, rng: &mut R| {
            FeedForward::new(store, name, i, hidden, o, rng)
        };

        let attn = dims.attn_dim;
        let proj = |store: &mut ParamStore, name: String, in_dim: usize, rng: &mut R| {
            store.register(name, Tensor::randn(vec![attn, in_dim], 0.0, INIT_STD, rng))
        };
        let token_dims = [dims.d_qb, dims.d_r, dims.d_lb, dims.d_h];
        let keys = std::array::from_fn(|i| {
            proj(store, format!("bm.type.k{i}"), token_dims[i], rng)
        });
        let values = std::array::from_fn(|i| {
            proj(store, format!("bm.type.v{i}"), token_dims[i], rng)
        });
        let query = proj(store, "bm.type.query".into(), dims.d_s, rng);
        let out = proj(store, "bm.type.out".into(), attn, rng);
        let final_lin = Linear::new(store, "bm.type.final", attn, 1, rng);

        BmParams {
            w_in,
            b_in,
            input_gate: Gate::new(store, "bm.lstm.i", d_x, dims.d_h, rng),
            forget_gate: Gate::new(store, "bm.lstm.f", d_x, dims.d_h, rng),
            output_gate: Gate::new(store, "bm.lstm.o", d_x, dims.d_h, rng),
            cell_gate: Gate::new(store, "bm.lstm.g", d_x, dims.d_h, rng),
            enc_q: mk_ff(store, "bm.enc_q", enc_in, dims.d_v, rng),
            enc_l: mk_ff(store, "bm.enc_l", enc_in, dims.d_v, rng),
            dec_q: mk_ff(store, "bm.dec_q", dec_in, dims.d_qb, rng),
            dec_l: mk_ff(store, "bm.dec_l", dec_in, dims.d_lb, rng),
            score_q: mk_ff(store, "bm.score_q", 2 * dims.d_v, 1, rng),
            score_l: mk_ff(store, "bm.score_l", 2 * dims.d_v, 1, rng),
            type_head: TypeHeadParams {
                query,
                keys,
                values,
                out,
                final_lin,
                heads: dims.attn_heads,
                dim: attn,
            },
            dims: dims.clone(),
        }
    }
}

/// One LSTM step over the concatenated step context. The knowledge memory
/// enters as its concept-mean; the material embedding is the behavior-side
/// embedding of whichever type this step has.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    bm: &BmParams,
    material: NodeId,
    z_emb: NodeId,
    memory: NodeId,
    student: NodeId,
    h_prev: NodeId,
    m_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n_c = bm.dims.n_c;
    let uniform = g.constant(Tensor::filled(vec![n_c], 1.0 / n_c as f64))?;
    let mem_summary = g.vecmat(uniform, memory)?;
    let ctx = g.concat(&[material, z_emb, mem_summary, student])?;
    let w_in = g.param(store, bm.w_in)?;
    let b_in = g.param(store, bm.b_in)?;
    let proj = g.matvec(w_in, ctx)?;
    let x = g.add(proj, b_in)?;

    let i_pre = bm.input_gate.pre(g, store, x, h_prev)?;
    let f_pre = bm.forget_gate.pre(g, store, x, h_prev)?;
    let o_pre = bm.output_gate.pre(g, store, x, h_prev)?;
    let g_pre = bm.cell_gate.pre(g, store, x, h_prev)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let o = g.sigmoid(o_pre)?;
    let c = g.tanh(g_pre)?;

    let fm = g.mul(f, m_prev)?;
    let ic = g.mul(i, c)?;
    let m = g.add(fm, ic)?;
    let tm = g.tanh(m)?;
    let h = g.mul(o, tm)?;
    Ok((h, m))
}

/// Encoder input layout shared by anchors, positives and candidates:
/// the hidden state, the encoded material's own features, then the
/// same-type and other-type context features of the reference step.
pub struct EncoderInput {
    pub h: NodeId,
    pub material: NodeId,
    pub w_self: NodeId,
    pub c_self: NodeId,
    pub w_same_ctx: NodeId,
    pub c_same_ctx: NodeId,
    pub w_other_ctx: NodeId,
    pub c_other_ctx: NodeId,
}

pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    ff: &FeedForward,
    input: &EncoderInput,
) -> Result<NodeId> {
    let x = g.concat(&[
        input.h,
        input.material,
        input.w_self,
        input.c_self,
        input.w_same_ctx,
        input.c_same_ctx,
        input.w_other_ctx,
        input.c_other_ctx,
    ])?;
    ff.apply(g, store, x)
}

/// Behavior-side features of one material type at one step.
#[derive(Clone, Copy)]
pub struct SideFeats {
    pub b: NodeId,
    pub w: NodeId,
    pub c: NodeId,
}

/// Decoder input layout: the latent, then the target step's features with
/// the reconstructed embedding itself left out, then the full features of
/// the opposite step.
pub struct DecoderInput {
    pub latent: NodeId,
    pub target_w_self: NodeId,
    pub target_c_self: NodeId,
    pub target_other: SideFeats,
    pub other_self: SideFeats,
    pub other_other: SideFeats,
}

pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    ff: &FeedForward,
    input: &DecoderInput,
) -> Result<NodeId> {
    let x = g.concat(&[
        input.latent,
        input.target_w_self,
        input.target_c_self,
        input.target_other.b,
        input.target_other.w,
        input.target_other.c,
        input.other_self.b,
        input.other_self.w,
        input.other_self.c,
        input.other_other.b,
        input.other_other.w,
        input.other_other.c,
    ])?;
    ff.apply(g, store, x)
}

/// Order candidate indices by ascending L2 distance to the anchor, ties
/// broken by candidate index.
pub fn rank_candidates(anchor: &[f64], encodings: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..encodings.len()).collect();
    let dist: Vec<f64> = encodings
        .iter()
        .map(|e| {
            anchor
                .iter()
                .zip(e)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
    order
}

/// Single-query multi-head cross-attention over the four context tokens,
/// followed by a linear sigmoid head. Returns `(p, logit, attention)` where
/// `attention[head][token]` are the softmax weights.
pub fn predict_type(
    g: &mut Graph,
    store: &ParamStore,
    th: &TypeHeadParams,
    student: NodeId,
    tokens: [NodeId; 4],
) -> Result<(NodeId, NodeId, Vec<Vec<f64>>)> {
    let head_dim = th.dim / th.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let wq = g.param(store, th.query)?;
    let query = g.matvec(wq, student)?;
    let mut keys = Vec::with_capacity(4);
    let mut vals = Vec::with_capacity(4);
    for j in 0..4 {
        let wk = g.param(store, th.keys[j])?;
        let wv = g.param(store, th.values[j])?;
        keys.push(g.matvec(wk, tokens[j])?);
        vals.push(g.matvec(wv, tokens[j])?);
    }

    let mut head_outputs = Vec::with_capacity(th.heads);
    let mut attention = Vec::with_capacity(th.heads);
    for hd in 0..th.heads {
        let lo = hd * head_dim;
        let q_h = g.slice(query, lo, head_dim)?;
        let mut scores = Vec::with_capacity(4);
        for key in &keys {
            let k_h = g.slice(*key, lo, head_dim)?;
            let s = g.dot(q_h, k_h)?;
            scores.push(g.scale(s, scale)?);
        }
        let score_vec = g.stack_scalars(&scores)?;
        let alpha = g.softmax(score_vec)?;
        attention.push(g.value(alpha).data().to_vec());
        let mut weighted = Vec::with_capacity(4);
        for (j, val) in vals.iter().enumerate() {
            let v_h = g.slice(*val, lo, head_dim)?;
            let a_j = g.slice(alpha, j, 1)?;
            let a_j = g.to_scalar(a_j)?;
            weighted.push(g.mul_bcast(v_h, a_j)?);
        }
        head_outputs.push(g.add_n(&weighted)?);
    }
    let merged = g.concat(&head_outputs)?;
    let wo = g.param(store, th.out)?;
    let projected = g.matvec(wo, merged)?;
    let logit_vec = th.final_lin.apply(g, store, projected)?;
    let logit = g.to_scalar(logit_vec)?;
    let p = g.sigmoid(logit)?;
    Ok((p, logit, attention))
}
