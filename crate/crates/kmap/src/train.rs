//! Loss assembly and the two-stage training loop: an inner loop over
//! segment-synchronous batches and an outer profiling step per epoch.
//!
//! The inner loop updates every parameter except the base student table;
//! per batch, each participating student's embedding snapshot
//! `s - lr * grad_s` goes to the ledger and the table's gradient is reset.
//! The outer step clusters behavioral summaries and moves only the student
//! table along the profile losses.

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    self, augment_drop, mix_seed, sample_negatives_capped, SegmentBatch, Split,
    Vocab,
};
use crate::error::{KmapError, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics;
use crate::model::{ForwardOptions, KmapModel, SegmentForward};
use crate::optim::{ParamStore, ADAM_BETAS, ADAM_EPS};
use crate::profiling::{
    build_convergence_loss, build_silhouette_loss, epoch_cluster, ClusterOutcome, ProfileLedger,
    StateStore,
};
use crate::data::MaterialType;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub const STUDENT_TABLE: &str = "embed.A_s";

/// Logged values of one optimization step (or aggregated epoch).
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub ntxent: f64,
    pub performance: f64,
    pub material_type: f64,
    pub total: f64,
    pub valid_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub cutoff: usize,
    pub assessed: Option<RankMetrics>,
    pub non_assessed: Option<RankMetrics>,
    pub auc_perf: Option<f64>,
    pub auc_type: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OuterOutcome {
    pub clusters: ClusterOutcome,
    pub convergence_loss: f64,
    pub silhouette_loss: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: KmapModel,
    pub store: ParamStore,
    pub state: StateStore,
    pub ledger: ProfileLedger,
    frozen: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = KmapModel::new(
            &mut store,
            &config.dims,
            vocab.n_students(),
            vocab.n_questions(),
            vocab.n_lectures(),
            config.seed,
        )?;
        let mut frozen = Vec::new();
        if let Some(path) = &config.freeze_concepts {
            let ckpt = Checkpoint::load(Path::new(path))?;
            for name in ["embed.A_wq", "embed.A_wl"] {
                let idx = store
                    .index_of(name)
                    .expect("concept projections are always registered");
                let tensor = ckpt.param(name).ok_or_else(|| {
                    KmapError::invalid(format!("{path} has no parameter {name}"))
                })?;
                if tensor.shape() != store.value(idx).shape() {
                    return Err(KmapError::invalid(format!(
                        "frozen {name} shape {:?} does not match model {:?}",
                        tensor.shape(),
                        store.value(idx).shape()
                    )));
                }
                *store.value_mut(idx) = tensor.clone();
                frozen.push(name.to_string());
            }
        }
        Ok(Trainer {
            config,
            vocab,
            model,
            store,
            state: StateStore::new(),
            ledger: ProfileLedger::new(),
            frozen,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(ckpt.config.clone(), ckpt.vocab.clone())?;
        trainer.store.import(&ckpt.param_map())?;
        Ok(trainer)
    }

    fn inner_filter(&self) -> impl Fn(&str) -> bool + 'static {
        let frozen = self.frozen.clone();
        move |name: &str| name != STUDENT_TABLE && !frozen.iter().any(|f| f == name)
    }

    /// Process one segment-synchronous batch: forward all segments on one
    /// tape, reduce the five terms, backpropagate, snapshot student
    /// embeddings, and (when `update`) apply the optimizer to everything
    /// except the student table.
    fn run_batch(
        &mut self,
        batch: &[SegmentBatch],
        update: bool,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let mut forwards: Vec<SegmentForward> = Vec::with_capacity(batch.len());
        for seg in batch {
            let init =
                self.state
                    .init_segment_state(seg.student, &self.config.dims, self.config.seed);
            let fwd = self.model.forward_segment(
                &mut g,
                &self.store,
                seg,
                &init,
                &ForwardOptions::training(),
            )?;
            forwards.push(fwd);
        }
        let n_pred: usize = forwards.iter().map(|f| f.pred_steps).sum();

        let mut breakdown = LossBreakdown {
            valid_steps: n_pred,
            ..LossBreakdown::default()
        };
        if n_pred > 0 {
            let w = self.config.loss_weights;
            let reduce = |g: &mut Graph, pick: &dyn Fn(&SegmentForward) -> &[NodeId],
                              weight: f64|
             -> Result<NodeId> {
                let nodes: Vec<NodeId> = forwards.iter().flat_map(|f| pick(f).iter().copied()).collect();
                if nodes.is_empty() {
                    g.scalar(0.0)
                } else {
                    let sum = g.add_n(&nodes)?;
                    g.scale(sum, weight / n_pred as f64)
                }
            };
            let cont = reduce(&mut g, &|f| &f.terms.contrastive, w[0])?;
            let rec = reduce(&mut g, &|f| &f.terms.reconstruction, w[1])?;
            let ntx = reduce(&mut g, &|f| &f.terms.ntxent, w[2])?;
            let perf = reduce(&mut g, &|f| &f.terms.performance, w[3])?;
            let typ = reduce(&mut g, &|f| &f.terms.material_type, w[4])?;
            let total = g.add_n(&[cont, rec, ntx, perf, typ])?;

            breakdown.contrastive = g.value(cont).item();
            breakdown.reconstruction = g.value(rec).item();
            breakdown.ntxent = g.value(ntx).item();
            breakdown.performance = g.value(perf).item();
            breakdown.material_type = g.value(typ).item();
            breakdown.total = g.value(total).item();
            for (name, v) in [
                ("contrastive", breakdown.contrastive),
                ("reconstruction", breakdown.reconstruction),
                ("ntxent", breakdown.ntxent),
                ("performance", breakdown.performance),
                ("material_type", breakdown.material_type),
            ] {
                if !v.is_finite() {
                    return Err(KmapError::invalid(format!(
                        "non-finite loss: the {name} term diverged"
                    )));
                }
            }
            g.backward(total, &mut self.store)?;
        }

        // snapshot student embeddings, then freeze the base table
        let a_s = self.model.embed.a_s;
        let lr = self.config.lr;
        for (seg, fwd) in batch.iter().zip(&forwards) {
            let base = self.store.value(a_s).row(seg.student).to_vec();
            let grad = self.store.grad(a_s).row(seg.student).to_vec();
            let snapshot: Vec<f64> = base
                .iter()
                .zip(&grad)
                .map(|(s, g)| s - lr * g)
                .collect();
            self.ledger
                .record(seg.student, snapshot, fwd.carried.h.data().to_vec());
        }
        self.store.zero_grad(a_s);

        if update && n_pred > 0 {
            let filter = self.inner_filter();
            self.store.clip_grad_norm(self.config.clip_norm, &filter);
            self.store
                .adam_step(self.config.lr, ADAM_BETAS, ADAM_EPS, &filter);
        }
        self.store.zero_grads();

        for (seg, fwd) in batch.iter().zip(forwards.into_iter()) {
            self.state.update(seg.student, fwd.carried);
        }
        Ok(breakdown)
    }

    /// One pass over all training segments in user-shuffled order. States
    /// reset at the epoch boundary; each student's segments run in order.
    pub fn inner_epoch(
        &mut self,
        segments: &[Vec<SegmentBatch>],
        epoch: usize,
        update: bool,
    ) -> Result<LossBreakdown> {
        self.state.reset();
        let mut students: Vec<usize> = (1..=self.vocab.n_students()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, epoch as u64, 0x50]));
        students.shuffle(&mut rng);

        let neg_seed = mix_seed(&[self.config.seed, epoch as u64, 0x4E47]);
        let drop_seed = mix_seed(&[self.config.seed, epoch as u64, 0xD209]);

        let mut acc = LossBreakdown::default();
        let mut acc_steps = 0usize;
        for group in students.chunks(self.config.batch_size) {
            let train_segs: Vec<&Vec<SegmentBatch>> = group
                .iter()
                .map(|&s| &segments[s - 1])
                .collect();
            let max_len = train_segs
                .iter()
                .map(|segs| segs.iter().filter(|b| b.split == Split::Train).count())
                .max()
                .unwrap_or(0);
            for si in 0..max_len {
                let mut batch: Vec<SegmentBatch> = Vec::new();
                for segs in &train_segs {
                    if let Some(seg) = segs
                        .iter()
                        .filter(|b| b.split == Split::Train)
                        .nth(si)
                    {
                        batch.push(seg.clone());
                    }
                }
                if batch.is_empty() {
                    continue;
                }
                let mut batch = if update {
                    augment_drop(
                        &batch,
                        self.config.drop_frac,
                        self.config.drop_user_frac,
                        mix_seed(&[drop_seed, si as u64]),
                    )
                } else {
                    batch
                };
                for seg in batch.iter_mut() {
                    sample_negatives_capped(seg, &self.vocab, self.config.k_train, neg_seed)?;
                }
                let b = self.run_batch(&batch, update)?;
                let n = b.valid_steps as f64;
                acc.contrastive += b.contrastive * n;
                acc.reconstruction += b.reconstruction * n;
                acc.ntxent += b.ntxent * n;
                acc.performance += b.performance * n;
                acc.material_type += b.material_type * n;
                acc.total += b.total * n;
                acc_steps += b.valid_steps;
            }
        }
        if acc_steps > 0 {
            let n = acc_steps as f64;
            acc.contrastive /= n;
            acc.reconstruction /= n;
            acc.ntxent /= n;
            acc.performance /= n;
            acc.material_type /= n;
            acc.total /= n;
        }
        acc.valid_steps = acc_steps;
        Ok(acc)
    }

    /// Cluster the epoch's ledger and move the base student table along the
    /// profile losses. Clears the ledger.
    pub fn outer_step(&mut self, epoch: usize) -> Result<OuterOutcome> {
        let outcome = epoch_cluster(
            &self.ledger,
            self.config.n_clusters,
            mix_seed(&[self.config.seed, epoch as u64, 0x4B4D]),
        )?;

        let mut g = Graph::new();
        let a_s_node = g.param(&self.store, self.model.embed.a_s)?;
        let mut all_snaps: Vec<Vec<NodeId>> = Vec::with_capacity(outcome.students.len());
        let mut v_bar_nodes: Vec<NodeId> = Vec::with_capacity(outcome.students.len());
        for &student in &outcome.students {
            let base_row = g.select_row(a_s_node, student)?;
            let base_vals = self.store.value(self.model.embed.a_s).row(student).to_vec();
            let snaps = self.ledger.snapshots_of(student);
            let mut snap_nodes = Vec::with_capacity(snaps.len());
            let mut normed = Vec::with_capacity(snaps.len());
            for snap in snaps {
                let offset: Vec<f64> = snap
                    .iter()
                    .zip(&base_vals)
                    .map(|(s, b)| s - b)
                    .collect();
                let off = g.constant(Tensor::vector(offset))?;
                let s_i = g.add(base_row, off)?;
                snap_nodes.push(s_i);
                normed.push(g.normalize_l2(s_i)?);
            }
            let summed = g.add_n(&normed)?;
            v_bar_nodes.push(g.scale(summed, 1.0 / snaps.len() as f64)?);
            all_snaps.push(snap_nodes);
        }
        let conv = build_convergence_loss(&mut g, &all_snaps)?;
        let sil = build_silhouette_loss(
            &mut g,
            &v_bar_nodes,
            &outcome.assignments,
            &outcome.centroid_embeddings,
            self.config.tau,
        )?;
        let loss = g.add(conv, sil)?;
        let conv_v = g.value(conv).item();
        let sil_v = g.value(sil).item();
        g.backward(loss, &mut self.store)?;
        self.store
            .adam_step(self.config.lr, ADAM_BETAS, ADAM_EPS, |n| n == STUDENT_TABLE);
        self.store.zero_grads();
        self.ledger.clear();
        Ok(OuterOutcome {
            clusters: outcome,
            convergence_loss: conv_v,
            silhouette_loss: sil_v,
        })
    }

    /// Ledger-building pass without parameter updates followed by
    /// clustering; used to report clusters from a trained checkpoint.
    pub fn profiling_pass(&mut self, segments: &[Vec<SegmentBatch>]) -> Result<ClusterOutcome> {
        self.ledger.clear();
        self.inner_epoch(segments, 0, false)?;
        epoch_cluster(
            &self.ledger,
            self.config.n_clusters,
            mix_seed(&[self.config.seed, 0x4B4D]),
        )
    }

    /// Replay the full stream statefully and rank candidates on segments of
    /// the requested split.
    pub fn evaluate(
        &self,
        segments: &[Vec<SegmentBatch>],
        split: Split,
        k_eval: usize,
        seed: u64,
    ) -> Result<EvalReport> {
        let mut state = StateStore::new();
        let mut ranks = Vec::new();
        let mut perf_events = Vec::new();
        let mut type_events = Vec::new();
        for student in 1..=self.vocab.n_students() {
            for seg in &segments[student - 1] {
                let is_target = seg.split == split;
                let init = state.init_segment_state(student, &self.config.dims, self.config.seed);
                let mut g = Graph::new();
                let fwd = if is_target {
                    let mut seg = seg.clone();
                    sample_negatives_capped(&mut seg, &self.vocab, k_eval, seed)?;
                    self.model.forward_segment(
                        &mut g,
                        &self.store,
                        &seg,
                        &init,
                        &ForwardOptions::evaluation(),
                    )?
                } else {
                    self.model.forward_segment(
                        &mut g,
                        &self.store,
                        seg,
                        &init,
                        &ForwardOptions::replay(),
                    )?
                };
                ranks.extend(fwd.ranks.iter().copied());
                perf_events.extend(fwd.perf_events.iter().copied());
                type_events.extend(fwd.type_events.iter().copied());
                state.update(student, fwd.carried);
            }
        }

        let cutoff = self.config.cutoff;
        let rank_metrics = |mtype: MaterialType| -> Option<RankMetrics> {
            let of_type: Vec<usize> = ranks
                .iter()
                .filter(|r| r.material_type == mtype)
                .map(|r| r.rank)
                .collect();
            if of_type.is_empty() {
                return None;
            }
            let n = of_type.len() as f64;
            Some(RankMetrics {
                hr: of_type.iter().map(|&r| metrics::hr_at_k(r, cutoff)).sum::<f64>() / n,
                ndcg: of_type
                    .iter()
                    .map(|&r| metrics::ndcg_at_k(r, cutoff))
                    .sum::<f64>()
                    / n,
                mrr: of_type.iter().map(|&r| metrics::mrr(r)).sum::<f64>() / n,
                steps: of_type.len(),
            })
        };
        Ok(EvalReport {
            cutoff,
            assessed: rank_metrics(MaterialType::Assessed),
            non_assessed: rank_metrics(MaterialType::NonAssessed),
            auc_perf: metrics::auc(&perf_events).ok(),
            auc_type: metrics::auc(&type_events).ok(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub first_epoch_loss: LossBreakdown,
    pub final_epoch_loss: LossBreakdown,
    pub final_eval: Option<EvalReport>,
}

/// Full training driver: epochs of inner loop + outer step, a metrics CSV,
/// and a checkpoint rewritten every epoch.
pub fn train(
    config: &TrainConfig,
    segments: &[Vec<SegmentBatch>],
    vocab: &Vocab,
    out_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let resolved = serde_json::to_string_pretty(config)?;
    std::fs::write(out_dir.join("config.json"), &resolved)?;

    let mut trainer = Trainer::new(config.clone(), vocab.clone())?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(
        metrics_file,
        "epoch,contrastive,reconstruction,ntxent,performance,material_type,total,convergence,silhouette,hr_q,ndcg_q,mrr_q,hr_l,ndcg_l,mrr_l,auc_perf,auc_type"
    )?;

    let mut first = None;
    let mut last = LossBreakdown::default();
    let mut final_eval = None;
    for epoch in 0..config.epochs {
        let losses = trainer.inner_epoch(segments, epoch, true)?;
        let outer = trainer.outer_step(epoch)?;
        if first.is_none() {
            first = Some(losses);
        }
        last = losses;

        let do_eval = (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0)
            || epoch + 1 == config.epochs;
        let eval = if do_eval {
            let report =
                trainer.evaluate(segments, Split::Test, config.k_eval, config.seed)?;
            Some(report)
        } else {
            None
        };

        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let (hr_q, ndcg_q, mrr_q, hr_l, ndcg_l, mrr_l, auc_p, auc_t) = match &eval {
            Some(r) => (
                fmt_opt(r.assessed.as_ref().map(|m| m.hr)),
                fmt_opt(r.assessed.as_ref().map(|m| m.ndcg)),
                fmt_opt(r.assessed.as_ref().map(|m| m.mrr)),
                fmt_opt(r.non_assessed.as_ref().map(|m| m.hr)),
                fmt_opt(r.non_assessed.as_ref().map(|m| m.ndcg)),
                fmt_opt(r.non_assessed.as_ref().map(|m| m.mrr)),
                fmt_opt(r.auc_perf),
                fmt_opt(r.auc_type),
            ),
            None => Default::default(),
        };
        writeln!(
            metrics_file,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{}",
            epoch,
            losses.contrastive,
            losses.reconstruction,
            losses.ntxent,
            losses.performance,
            losses.material_type,
            losses.total,
            outer.convergence_loss,
            outer.silhouette_loss,
            hr_q,
            ndcg_q,
            mrr_q,
            hr_l,
            ndcg_l,
            mrr_l,
            auc_p,
            auc_t
        )?;
        metrics_file.flush()?;

        let ckpt = Checkpoint::capture(&trainer.config, &trainer.vocab, epoch, &trainer.store);
        ckpt.save(&out_dir.join("checkpoint.json"))?;

        log(&format!(
            "epoch {epoch}: total {:.4} (cont {:.4} rec {:.4} ntx {:.4} perf {:.4} type {:.4}) conv {:.4} sil {:.4}",
            losses.total,
            losses.contrastive,
            losses.reconstruction,
            losses.ntxent,
            losses.performance,
            losses.material_type,
            outer.convergence_loss,
            outer.silhouette_loss,
        ));
        if let Some(r) = eval {
            final_eval = Some(r);
        }
    }

    Ok(TrainSummary {
        epochs: config.epochs,
        first_epoch_loss: first.unwrap_or_default(),
        final_epoch_loss: last,
        final_eval,
    })
}

/// Load a ready-to-use dataset: events indexed, streams segmented.
pub fn load_dataset(
    events_path: &Path,
    config: &TrainConfig,
    min_events: usize,
) -> Result<(Vocab, Vec<Vec<SegmentBatch>>)> {
    let (vocab, streams) = data::load_events(events_path)?;
    let (vocab, streams) = if min_events > 0 {
        data::filter_min_events(&vocab, &streams, min_events)
    } else {
        (vocab, streams)
    };
    if vocab.n_students() == 0 {
        return Err(KmapError::invalid("dataset has no students after filtering"));
    }
    let segments = data::segment(&streams, config.segment_len, config.train_frac)?;
    Ok((vocab, segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelDims;
    use crate::data::synth;

    fn tiny_setup(n_students: usize) -> (TrainConfig, Vocab, Vec<Vec<SegmentBatch>>) {
        let spec = synth::SyntheticSpec::three_archetypes(n_students, 20, 10, 30, 3);
        let (events, _) = synth::generate(&spec).unwrap();
        let (vocab, streams) = data::index_events(&events);
        let mut config = TrainConfig {
            dims: ModelDims::tiny(),
            segment_len: 10,
            k_train: 3,
            k_eval: 10,
            epochs: 2,
            batch_size: 4,
            lr: 0.01,
            seed: 5,
            drop_frac: 0.0,
            ..TrainConfig::default()
        };
        config.validate().unwrap();
        let segments = data::segment(&streams, config.segment_len, config.train_frac).unwrap();
        (config, vocab, segments)
    }

    #[test]
    fn inner_epoch_keeps_student_table_fixed() {
        let (config, vocab, segments) = tiny_setup(6);
        let mut trainer = Trainer::new(config, vocab).unwrap();
        let before = trainer
            .store
            .value(trainer.model.embed.a_s)
            .data()
            .to_vec();
        let some_other = trainer
            .store
            .value(trainer.model.kt.w_tr)
            .data()
            .to_vec();
        let losses = trainer.inner_epoch(&segments, 0, true).unwrap();
        assert!(losses.valid_steps > 0);
        assert!(losses.total.is_finite());
        let after = trainer.store.value(trainer.model.embed.a_s).data().to_vec();
        assert_eq!(before, after, "inner loop must not move the student table");
        let other_after = trainer.store.value(trainer.model.kt.w_tr).data().to_vec();
        assert_ne!(some_other, other_after, "other parameters must move");
    }

    #[test]
    fn outer_step_moves_only_student_table() {
        let (config, vocab, segments) = tiny_setup(6);
        let mut trainer = Trainer::new(config, vocab).unwrap();
        trainer.inner_epoch(&segments, 0, true).unwrap();
        let student_before = trainer.store.value(trainer.model.embed.a_s).data().to_vec();
        let others_before: Vec<Vec<f64>> = trainer
            .store
            .iter()
            .filter(|p| p.name != STUDENT_TABLE)
            .map(|p| p.value.data().to_vec())
            .collect();
        let outer = trainer.outer_step(0).unwrap();
        assert!(outer.convergence_loss >= 0.0);
        assert!(outer.silhouette_loss > 0.0);
        let student_after = trainer.store.value(trainer.model.embed.a_s).data().to_vec();
        assert_ne!(student_before, student_after, "outer step must move the student table");
        let others_after: Vec<Vec<f64>> = trainer
            .store
            .iter()
            .filter(|p| p.name != STUDENT_TABLE)
            .map(|p| p.value.data().to_vec())
            .collect();
        assert_eq!(others_before, others_after, "outer step must not move other parameters");
        assert!(trainer.ledger.is_empty());
    }

    #[test]
    fn epochs_are_deterministic() {
        let (config, vocab, segments) = tiny_setup(5);
        let run = || {
            let mut t = Trainer::new(config.clone(), vocab.clone()).unwrap();
            let l = t.inner_epoch(&segments, 0, true).unwrap();
            (l.total, t.store.value(t.model.kt.w_tr).data().to_vec())
        };
        let (a_loss, a_params) = run();
        let (b_loss, b_params) = run();
        assert_eq!(a_loss, b_loss);
        assert_eq!(a_params, b_params);
    }

    #[test]
    fn evaluate_reports_metrics() {
        let (config, vocab, segments) = tiny_setup(8);
        let trainer = Trainer::new(config.clone(), vocab).unwrap();
        let report = trainer
            .evaluate(&segments, Split::Test, config.k_eval, 1)
            .unwrap();
        let assessed = report.assessed.expect("assessed steps exist");
        assert!(assessed.steps > 0);
        assert!((0.0..=1.0).contains(&assessed.hr));
        assert!((0.0..=1.0).contains(&assessed.ndcg));
        assert!(assessed.mrr > 0.0 && assessed.mrr <= 1.0);
    }

    #[test]
    fn masked_epoch_changes_nothing() {
        let (config, vocab, mut segments) = tiny_setup(4);
        for segs in segments.iter_mut() {
            for seg in segs.iter_mut() {
                for step in seg.steps.iter_mut() {
                    step.valid = false;
                }
            }
        }
        let mut trainer = Trainer::new(config, vocab).unwrap();
        let before: Vec<Vec<f64>> = trainer.store.iter().map(|p| p.value.data().to_vec()).collect();
        let losses = trainer.inner_epoch(&segments, 0, true).unwrap();
        assert_eq!(losses.valid_steps, 0);
        assert_eq!(losses.total, 0.0);
        let after: Vec<Vec<f64>> = trainer.store.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }
}
