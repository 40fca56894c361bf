//! Per-segment forward pass wiring the embedding, knowledge and behavior
//! components together.
//!
//! Cross-step features follow a "most recent of each type" convention: the
//! encoder context for a type is the latest material of that type at or
//! before the reference step, and zero vectors before any such material
//! exists. Carried segment boundaries reuse the same convention with the
//! stored values entering as constants.

use crate::behavior::{self, BmParams, DecoderInput, EncoderInput, SideFeats};
use crate::config::ModelDims;
use crate::data::{MaterialType, SegmentBatch};
use crate::embed::{EmbeddingTables, Table};
use crate::error::{KmapError, Result};
use crate::graph::{Graph, NodeId};
use crate::knowledge::{self, KtParams, KtStepInput};
use crate::optim::ParamStore;
use crate::profiling::{CarriedState, SlotState};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct KmapModel {
    pub embed: EmbeddingTables,
    pub kt: KtParams,
    pub bm: BmParams,
    pub dims: ModelDims,
}

impl KmapModel {
    pub fn new(
        store: &mut ParamStore,
        dims: &ModelDims,
        n_students: usize,
        n_questions: usize,
        n_lectures: usize,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed =
            EmbeddingTables::new(store, dims, n_students, n_questions, n_lectures, &mut rng);
        let kt = KtParams::new(store, dims, &mut rng);
        let bm = BmParams::new(store, dims, &mut rng);
        Ok(KmapModel {
            embed,
            kt,
            bm,
            dims: dims.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Build the five training loss terms.
    pub losses: bool,
    /// Training mode: reconstruction decoders run (requires `losses`).
    pub train_mode: bool,
    /// Rank the attached candidates of every prediction step.
    pub rank: bool,
    /// Record per-step state traces.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn training() -> Self {
        ForwardOptions {
            losses: true,
            train_mode: true,
            rank: false,
            trace: false,
        }
    }

    pub fn evaluation() -> Self {
        ForwardOptions {
            losses: false,
            train_mode: false,
            rank: true,
            trace: false,
        }
    }

    pub fn replay() -> Self {
        ForwardOptions {
            losses: false,
            train_mode: false,
            rank: false,
            trace: false,
        }
    }
}

/// Scalar nodes of each loss term, one entry per contributing step.
#[derive(Debug, Default)]
pub struct TermNodes {
    pub contrastive: Vec<NodeId>,
    pub reconstruction: Vec<NodeId>,
    pub ntxent: Vec<NodeId>,
    pub performance: Vec<NodeId>,
    pub material_type: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct RankEvent {
    pub material_type: MaterialType,
    /// 1-based rank of the true next material among the candidates.
    pub rank: usize,
    pub n_candidates: usize,
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub t: usize,
    pub memory: Vec<f64>,
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    pub type_p: Option<f64>,
    pub perf_p: Option<f64>,
    pub anchor: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct SegmentForward {
    pub terms: TermNodes,
    /// Steps with a valid successor, i.e. steps that made predictions.
    pub pred_steps: usize,
    pub carried: CarriedState,
    pub ranks: Vec<RankEvent>,
    /// (predicted probability, true label) pairs for the performance head.
    pub perf_events: Vec<(f64, bool)>,
    /// Same for the type head; label true means non-assessed next.
    pub type_events: Vec<(f64, bool)>,
    pub traces: Vec<StepTrace>,
}

#[derive(Clone, Copy)]
struct Slot {
    b: NodeId,
    w: NodeId,
    c: NodeId,
    present: bool,
}

fn ctx<T>(term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| KmapError::invalid(format!("{term} term failed: {e}")))
}

impl KmapModel {
    fn behavior_table(&self, mtype: MaterialType) -> Table {
        match mtype {
            MaterialType::Assessed => Table::QuestionB,
            MaterialType::NonAssessed => Table::LectureB,
        }
    }

    fn knowledge_table(&self, mtype: MaterialType) -> Table {
        match mtype {
            MaterialType::Assessed => Table::QuestionK,
            MaterialType::NonAssessed => Table::LectureK,
        }
    }

    fn empty_slot(&self, g: &mut Graph) -> Slot {
        Slot {
            b: g.zeros(vec![self.dims.d_qb]),
            w: g.zeros(vec![self.dims.n_c]),
            c: g.zeros(vec![self.dims.d_v]),
            present: false,
        }
    }

    fn slot_from_state(&self, g: &mut Graph, state: &Option<SlotState>) -> Result<Slot> {
        match state {
            None => Ok(self.empty_slot(g)),
            Some(s) => Ok(Slot {
                b: g.constant(s.b.clone())?,
                w: g.constant(s.w.clone())?,
                c: g.constant(s.c.clone())?,
                present: true,
            }),
        }
    }

    /// Encode one candidate material of type `mtype` in the context of the
    /// current step: its own concept weights and mastery read against the
    /// current memory, plus the step's per-type context slots.
    #[allow(clippy::too_many_arguments)]
    fn encode_candidate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mtype: MaterialType,
        material: usize,
        memory: NodeId,
        h: NodeId,
        z_cur: NodeId,
        z_next: NodeId,
        ctx_same: &Slot,
        ctx_other: &Slot,
    ) -> Result<(NodeId, SideFeats)> {
        let b = self
            .embed
            .lookup(g, store, self.behavior_table(mtype), material)?;
        let w = self.embed.concept_weights(g, store, mtype, material)?;
        let c = knowledge::read_mastery(g, store, &self.kt, memory, w, z_cur, z_next)?;
        let ff = match mtype {
            MaterialType::Assessed => &self.bm.enc_q,
            MaterialType::NonAssessed => &self.bm.enc_l,
        };
        let enc = behavior::encode(
            g,
            store,
            ff,
            &EncoderInput {
                h,
                material: b,
                w_self: w,
                c_self: c,
                w_same_ctx: ctx_same.w,
                c_same_ctx: ctx_same.c,
                w_other_ctx: ctx_other.w,
                c_other_ctx: ctx_other.c,
            },
        )?;
        Ok((enc, SideFeats { b, w, c }))
    }

    /// Run one padded segment from a carried state. Returns loss term nodes
    /// and the detached terminal state.
    pub fn forward_segment(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SegmentBatch,
        init: &CarriedState,
        opts: &ForwardOptions,
    ) -> Result<SegmentForward> {
        if opts.train_mode && !opts.losses {
            return Err(KmapError::invalid(
                "train_mode requires loss computation; the decoders only run in training",
            ));
        }
        let dims = &self.dims;
        let student_emb = self.embed.lookup(g, store, Table::Student, batch.student)?;
        let mut memory = g.constant(init.memory.clone())?;
        let mut h = g.constant(init.h.clone())?;
        let mut m = g.constant(init.m.clone())?;
        let mut prev_z = match &init.prev_z {
            Some(t) => g.constant(t.clone())?,
            None => self.embed.start_type_embedding(g, store)?,
        };
        let mut any_step = false;
        let mut q_slot = self.slot_from_state(g, &init.q_slot)?;
        let mut l_slot = self.slot_from_state(g, &init.l_slot)?;
        let mut r_last: Option<NodeId> = match &init.r_last {
            Some(t) => Some(g.constant(t.clone())?),
            None => None,
        };

        let mut out = SegmentForward {
            terms: TermNodes::default(),
            pred_steps: 0,
            carried: init.clone(),
            ranks: Vec::new(),
            perf_events: Vec::new(),
            type_events: Vec::new(),
            traces: Vec::new(),
        };

        let steps = &batch.steps;
        for t in 0..steps.len() {
            let step = &steps[t];
            if !step.valid {
                continue;
            }
            any_step = true;
            let mtype = step.material_type;
            let z_cur = self.embed.type_embedding(g, store, mtype)?;

            // features of the step's own material (mastery read against the
            // pre-update memory)
            let w_t = self
                .embed
                .concept_weights(g, store, mtype, step.material)?;
            let c_t =
                knowledge::read_mastery(g, store, &self.kt, memory, w_t, prev_z, z_cur)?;
            let k_emb = self
                .embed
                .lookup(g, store, self.knowledge_table(mtype), step.material)?;
            let b_emb = self
                .embed
                .lookup(g, store, self.behavior_table(mtype), step.material)?;
            let r_emb = match (mtype, step.response) {
                (MaterialType::Assessed, Some(r)) => {
                    Some(self.embed.lookup(g, store, Table::Response, r as usize)?)
                }
                (MaterialType::Assessed, None) => {
                    return Err(KmapError::invalid("assessed step without a response"))
                }
                (MaterialType::NonAssessed, _) => None,
            };

            // knowledge update then behavior step
            memory = knowledge::erase_add_update(
                g,
                store,
                &self.kt,
                memory,
                &KtStepInput {
                    material_type: mtype,
                    material: k_emb,
                    response: r_emb,
                    h_prev: h,
                    student: student_emb,
                    z_prev: prev_z,
                    z_cur,
                    concept_weights: w_t,
                },
            )?;
            let (h_new, m_new) =
                behavior::lstm_step(g, store, &self.bm, b_emb, z_cur, memory, student_emb, h, m)?;
            h = h_new;
            m = m_new;

            // previous-step views, then refresh the slot of this step's type
            let view_q = q_slot;
            let view_l = l_slot;
            let own_slot = Slot {
                b: b_emb,
                w: w_t,
                c: c_t,
                present: true,
            };
            match mtype {
                MaterialType::Assessed => q_slot = own_slot,
                MaterialType::NonAssessed => l_slot = own_slot,
            }
            if let Some(r) = r_emb {
                r_last = Some(r);
            }

            let mut type_p = None;
            let mut perf_p = None;
            let mut anchor_vals = None;

            let next_valid = t + 1 < steps.len() && steps[t + 1].valid;
            if next_valid && (opts.losses || opts.rank) {
                let next = &steps[t + 1];
                out.pred_steps += 1;
                let nz = next.material_type;
                let nz_emb = self.embed.type_embedding(g, store, nz)?;

                // --- type head ---
                let r_node = match r_last {
                    Some(r) => r,
                    None => g.zeros(vec![dims.d_r]),
                };
                let (y_p, y_logit, _) = behavior::predict_type(
                    g,
                    store,
                    &self.bm.type_head,
                    student_emb,
                    [q_slot.b, r_node, l_slot.b, h],
                )?;
                let label = nz.as_z() as f64;
                if opts.losses {
                    out.terms
                        .material_type
                        .push(ctx("type", g.bce_logits(y_logit, label))?);
                }
                out.type_events
                    .push((g.value(y_p).item(), nz == MaterialType::NonAssessed));
                type_p = Some(g.value(y_p).item());

                // --- material branch: anchor, positive, candidates ---
                let (ctx_same, ctx_other) = match nz {
                    MaterialType::Assessed => (&q_slot, &l_slot),
                    MaterialType::NonAssessed => (&l_slot, &q_slot),
                };
                let (view_same, view_other) = match nz {
                    MaterialType::Assessed => (&view_q, &view_l),
                    MaterialType::NonAssessed => (&view_l, &view_q),
                };
                let enc_ff = match nz {
                    MaterialType::Assessed => &self.bm.enc_q,
                    MaterialType::NonAssessed => &self.bm.enc_l,
                };
                let anchor = behavior::encode(
                    g,
                    store,
                    enc_ff,
                    &EncoderInput {
                        h,
                        material: ctx_same.b,
                        w_self: ctx_same.w,
                        c_self: ctx_same.c,
                        w_same_ctx: view_same.w,
                        c_same_ctx: view_same.c,
                        w_other_ctx: view_other.w,
                        c_other_ctx: view_other.c,
                    },
                )?;
                let (positive, pos_feats) = self.encode_candidate(
                    g, store, nz, next.material, memory, h, z_cur, nz_emb, ctx_same, ctx_other,
                )?;
                let mut candidate_encs = vec![positive];
                for &neg in &step.negatives {
                    let (enc, _) = self.encode_candidate(
                        g, store, nz, neg, memory, h, z_cur, nz_emb, ctx_same, ctx_other,
                    )?;
                    candidate_encs.push(enc);
                }

                if opts.rank && !step.negatives.is_empty() {
                    let anchor_v = g.value(anchor).data().to_vec();
                    let encs: Vec<Vec<f64>> = candidate_encs
                        .iter()
                        .map(|&e| g.value(e).data().to_vec())
                        .collect();
                    let order = behavior::rank_candidates(&anchor_v, &encs);
                    let rank = order.iter().position(|&i| i == 0).unwrap() + 1;
                    out.ranks.push(RankEvent {
                        material_type: nz,
                        rank,
                        n_candidates: encs.len(),
                    });
                }

                if opts.losses && !step.negatives.is_empty() {
                    // contrastive cross-entropy over the k+1 candidates,
                    // truth at index 0
                    let score_ff = match nz {
                        MaterialType::Assessed => &self.bm.score_q,
                        MaterialType::NonAssessed => &self.bm.score_l,
                    };
                    let mut scores = Vec::with_capacity(candidate_encs.len());
                    for &enc in &candidate_encs {
                        let pair = g.concat(&[anchor, enc])?;
                        let s_vec = score_ff.apply(g, store, pair)?;
                        scores.push(g.to_scalar(s_vec)?);
                    }
                    let cont = ctx("contrastive", {
                        let logits = g.stack_scalars(&scores)?;
                        let ls = g.log_softmax(logits)?;
                        let truth = g.slice(ls, 0, 1)?;
                        let truth = g.to_scalar(truth)?;
                        g.neg(truth)
                    })?;
                    out.terms.contrastive.push(cont);

                    // exponentiated NT-Xent ratio
                    let ntx = ctx("ntxent", {
                        let d_pos = g.l2_dist(anchor, positive)?;
                        let neg_d = g.neg(d_pos)?;
                        let denom = g.exp(neg_d)?;
                        let mut numer_terms = Vec::with_capacity(step.negatives.len());
                        for &enc in &candidate_encs[1..] {
                            let d = g.l2_dist(anchor, enc)?;
                            let nd = g.neg(d)?;
                            numer_terms.push(g.exp(nd)?);
                        }
                        let numer = g.add_n(&numer_terms)?;
                        g.div(numer, denom)
                    })?;
                    out.terms.ntxent.push(ntx);
                }

                if opts.losses && opts.train_mode {
                    // reconstruction of the same-type material at t and t+1
                    let dec_ff = match nz {
                        MaterialType::Assessed => &self.bm.dec_q,
                        MaterialType::NonAssessed => &self.bm.dec_l,
                    };
                    let other_now = SideFeats {
                        b: ctx_other.b,
                        w: ctx_other.w,
                        c: ctx_other.c,
                    };
                    let self_now = SideFeats {
                        b: ctx_same.b,
                        w: ctx_same.w,
                        c: ctx_same.c,
                    };
                    let mut rec_terms = Vec::new();
                    if ctx_same.present {
                        let dec_t = behavior::decode(
                            g,
                            store,
                            dec_ff,
                            &DecoderInput {
                                latent: positive,
                                target_w_self: ctx_same.w,
                                target_c_self: ctx_same.c,
                                target_other: other_now,
                                other_self: pos_feats,
                                other_other: other_now,
                            },
                        )?;
                        rec_terms.push(g.mse(dec_t, ctx_same.b)?);
                    }
                    let dec_next = behavior::decode(
                        g,
                        store,
                        dec_ff,
                        &DecoderInput {
                            latent: anchor,
                            target_w_self: pos_feats.w,
                            target_c_self: pos_feats.c,
                            target_other: other_now,
                            other_self: self_now,
                            other_other: other_now,
                        },
                    )?;
                    rec_terms.push(g.mse(dec_next, pos_feats.b)?);
                    out.terms
                        .reconstruction
                        .push(ctx("reconstruction", g.add_n(&rec_terms))?);
                }

                // --- performance head (assessed next only) ---
                if nz == MaterialType::Assessed {
                    let q_next_k =
                        self.embed
                            .lookup(g, store, Table::QuestionK, next.material)?;
                    let (p, logit) = knowledge::predict_performance(
                        g,
                        store,
                        &self.kt,
                        nz,
                        pos_feats.c,
                        q_next_k,
                        h,
                    )?;
                    let label = next.response.ok_or_else(|| {
                        KmapError::invalid("assessed next step without a response")
                    })? as f64;
                    if opts.losses {
                        out.terms
                            .performance
                            .push(ctx("performance", g.bce_logits(logit, label))?);
                    }
                    out.perf_events.push((g.value(p).item(), label == 1.0));
                    perf_p = Some(g.value(p).item());
                }

                if opts.trace {
                    anchor_vals = Some(g.value(anchor).data().to_vec());
                }
            }

            prev_z = z_cur;

            if opts.trace {
                out.traces.push(StepTrace {
                    t: batch.segment_index * steps.len() + t,
                    memory: g.value(memory).data().to_vec(),
                    h: g.value(h).data().to_vec(),
                    m: g.value(m).data().to_vec(),
                    type_p,
                    perf_p,
                    anchor: anchor_vals,
                });
            }
        }

        let slot_state = |g: &Graph, s: &Slot| -> Option<SlotState> {
            if s.present {
                Some(SlotState {
                    b: g.value(s.b).clone(),
                    w: g.value(s.w).clone(),
                    c: g.value(s.c).clone(),
                })
            } else {
                None
            }
        };
        out.carried = CarriedState {
            memory: g.value(memory).clone(),
            h: g.value(h).clone(),
            m: g.value(m).clone(),
            prev_z: if any_step {
                Some(g.value(prev_z).clone())
            } else {
                init.prev_z.clone()
            },
            q_slot: slot_state(g, &q_slot),
            l_slot: slot_state(g, &l_slot),
            r_last: r_last.map(|r| g.value(r).clone()),
            segments_done: init.segments_done + 1,
        };
        Ok(out)
    }
}

/// Convenience wrapper for constant vectors in tests and callers.
pub fn const_vec(g: &mut Graph, data: Vec<f64>) -> Result<NodeId> {
    g.constant(Tensor::vector(data))
}
