//! Interaction-log ingestion, vocabularies, segmentation and sampling.
//!
//! The on-disk event format is JSONL, one object per line:
//! `{"student_id": "...", "material_id": "...", "type": "q"|"l",
//!   "score": 0|1, "ts": 123}` where `score` is present exactly for
//! assessed (`"q"`) events.

pub mod synth;

use crate::error::{KmapError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Derive a sub-seed from structured coordinates (splitmix64 mixing).
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut x = 0x517c_c1b7_2722_0a95u64;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaterialType {
    /// Materials that produce a gradeable response (z = 0).
    #[serde(rename = "q")]
    Assessed,
    /// Consumption-only materials such as lectures or hints (z = 1).
    #[serde(rename = "l")]
    NonAssessed,
}

impl MaterialType {
    pub fn as_z(self) -> usize {
        match self {
            MaterialType::Assessed => 0,
            MaterialType::NonAssessed => 1,
        }
    }
}

/// One log record as read from or written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub student_id: String,
    pub material_id: String,
    #[serde(rename = "type")]
    pub material_type: MaterialType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    pub ts: i64,
}

impl InteractionEvent {
    fn check(&self, line: usize) -> Result<()> {
        match self.material_type {
            MaterialType::Assessed => match self.score {
                Some(0) | Some(1) => Ok(()),
                Some(s) => Err(KmapError::Parse {
                    line,
                    msg: format!("assessed event has score {s}, expected 0 or 1"),
                }),
                None => Err(KmapError::Parse {
                    line,
                    msg: "assessed event missing score".into(),
                }),
            },
            MaterialType::NonAssessed => match self.score {
                None => Ok(()),
                Some(s) => Err(KmapError::Parse {
                    line,
                    msg: format!("non-assessed event must not carry a score (got {s})"),
                }),
            },
        }
    }
}

/// Id spaces for students, questions and lectures. Index 0 of every space is
/// reserved for padding; real entities are numbered from 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub students: Vec<String>,
    pub questions: Vec<String>,
    pub lectures: Vec<String>,
}

impl Vocab {
    pub const PAD: usize = 0;

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn n_lectures(&self) -> usize {
        self.lectures.len()
    }

    pub fn n_materials(&self, mtype: MaterialType) -> usize {
        match mtype {
            MaterialType::Assessed => self.n_questions(),
            MaterialType::NonAssessed => self.n_lectures(),
        }
    }

    pub fn student_id(&self, index: usize) -> &str {
        &self.students[index - 1]
    }

    pub fn material_id(&self, mtype: MaterialType, index: usize) -> &str {
        match mtype {
            MaterialType::Assessed => &self.questions[index - 1],
            MaterialType::NonAssessed => &self.lectures[index - 1],
        }
    }
}

/// One event reindexed into vocab space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedEvent {
    pub material: usize,
    pub material_type: MaterialType,
    pub response: Option<u8>,
}

/// Per-student event streams in vocab order (entry `i` belongs to the
/// student with vocab index `i + 1`).
pub type StudentStreams = Vec<Vec<IndexedEvent>>;

struct VocabBuilder {
    students: Vec<String>,
    questions: Vec<String>,
    lectures: Vec<String>,
    student_ix: HashMap<String, usize>,
    question_ix: HashMap<String, usize>,
    lecture_ix: HashMap<String, usize>,
}

impl VocabBuilder {
    fn new() -> Self {
        VocabBuilder {
            students: Vec::new(),
            questions: Vec::new(),
            lectures: Vec::new(),
            student_ix: HashMap::new(),
            question_ix: HashMap::new(),
            lecture_ix: HashMap::new(),
        }
    }

    fn student(&mut self, id: &str) -> usize {
        if let Some(&i) = self.student_ix.get(id) {
            return i;
        }
        self.students.push(id.to_string());
        let i = self.students.len();
        self.student_ix.insert(id.to_string(), i);
        i
    }

    fn material(&mut self, mtype: MaterialType, id: &str) -> usize {
        let (list, ix) = match mtype {
            MaterialType::Assessed => (&mut self.questions, &mut self.question_ix),
            MaterialType::NonAssessed => (&mut self.lectures, &mut self.lecture_ix),
        };
        if let Some(&i) = ix.get(id) {
            return i;
        }
        list.push(id.to_string());
        let i = list.len();
        ix.insert(id.to_string(), i);
        i
    }

    fn finish(self) -> Vocab {
        Vocab {
            students: self.students,
            questions: self.questions,
            lectures: self.lectures,
        }
    }
}

/// Index a list of events: build the vocab and group per student, ordered by
/// timestamp with original order preserved among equal timestamps.
pub fn index_events(events: &[InteractionEvent]) -> (Vocab, StudentStreams) {
    let mut builder = VocabBuilder::new();
    // (student, ts, file order, event)
    let mut rows: Vec<(usize, i64, usize, IndexedEvent)> = Vec::with_capacity(events.len());
    for (order, ev) in events.iter().enumerate() {
        let s = builder.student(&ev.student_id);
        let m = builder.material(ev.material_type, &ev.material_id);
        rows.push((
            s,
            ev.ts,
            order,
            IndexedEvent {
                material: m,
                material_type: ev.material_type,
                response: ev.score,
            },
        ));
    }
    let vocab = builder.finish();
    let mut streams: StudentStreams = vec![Vec::new(); vocab.n_students()];
    rows.sort_by_key(|&(s, ts, order, _)| (s, ts, order));
    for (s, _, _, ev) in rows {
        streams[s - 1].push(ev);
    }
    (vocab, streams)
}

/// Read a JSONL event log.
pub fn load_events(path: &Path) -> Result<(Vocab, StudentStreams)> {
    let events = read_event_lines(path)?;
    Ok(index_events(&events))
}

/// Read the raw events of a JSONL log without reindexing.
pub fn read_event_lines(path: &Path) -> Result<Vec<InteractionEvent>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: InteractionEvent = serde_json::from_str(&line).map_err(|e| KmapError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ev.check(i + 1)?;
        events.push(ev);
    }
    Ok(events)
}

/// Write events as JSONL.
pub fn write_events(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for ev in events {
        serde_json::to_writer(&mut w, ev)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Drop students with fewer than `min_events` interactions.
pub fn filter_min_events(
    vocab: &Vocab,
    streams: &StudentStreams,
    min_events: usize,
) -> (Vocab, StudentStreams) {
    let mut students = Vec::new();
    let mut kept = Vec::new();
    for (i, stream) in streams.iter().enumerate() {
        if stream.len() >= min_events {
            students.push(vocab.students[i].clone());
            kept.push(stream.clone());
        }
    }
    (
        Vocab {
            students,
            questions: vocab.questions.clone(),
            lectures: vocab.lectures.clone(),
        },
        kept,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One step of a padded segment. `negatives` holds the candidate materials
/// for the next-material prediction made at this step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub material: usize,
    pub material_type: MaterialType,
    pub response: Option<u8>,
    pub valid: bool,
    pub negatives: Vec<usize>,
}

impl Step {
    fn pad() -> Self {
        Step {
            material: Vocab::PAD,
            material_type: MaterialType::Assessed,
            response: None,
            valid: false,
            negatives: Vec::new(),
        }
    }
}

/// Fixed-length window of one student's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    /// Vocab index of the student (1-based).
    pub student: usize,
    /// Position of this segment in the student's stream (0-based).
    pub segment_index: usize,
    pub steps: Vec<Step>,
    pub split: Split,
}

impl SegmentBatch {
    pub fn valid_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.valid).count()
    }
}

/// Split every student's stream into consecutive `segment_len`-sized padded
/// segments. The leading `train_frac` of each student's segments are marked
/// train, the rest test, so test segments always carry realistic state.
pub fn segment(
    streams: &StudentStreams,
    segment_len: usize,
    train_frac: f64,
) -> Result<Vec<Vec<SegmentBatch>>> {
    if segment_len < 2 {
        return Err(KmapError::invalid("segment length must be at least 2"));
    }
    let mut per_student = Vec::with_capacity(streams.len());
    for (i, stream) in streams.iter().enumerate() {
        let student = i + 1;
        let n_segments = stream.len().div_ceil(segment_len);
        let train_segments = if n_segments == 0 {
            0
        } else {
            ((train_frac * n_segments as f64).floor() as usize).clamp(1, n_segments)
        };
        let mut segments = Vec::with_capacity(n_segments);
        for si in 0..n_segments {
            let lo = si * segment_len;
            let hi = ((si + 1) * segment_len).min(stream.len());
            let mut steps: Vec<Step> = stream[lo..hi]
                .iter()
                .map(|ev| Step {
                    material: ev.material,
                    material_type: ev.material_type,
                    response: ev.response,
                    valid: true,
                    negatives: Vec::new(),
                })
                .collect();
            steps.resize(segment_len, Step::pad());
            segments.push(SegmentBatch {
                student,
                segment_index: si,
                steps,
                split: if si < train_segments {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
        per_student.push(segments);
    }
    Ok(per_student)
}

/// Sample `k` same-type negatives without replacement for every step that
/// has a valid successor, excluding the true next material. Deterministic in
/// `seed` and the step coordinates.
pub fn sample_negatives(
    batch: &mut SegmentBatch,
    vocab: &Vocab,
    k: usize,
    seed: u64,
) -> Result<()> {
    sample_negatives_impl(batch, vocab, k, seed, false)
}

/// Like [`sample_negatives`] but silently caps `k` at each type's vocabulary
/// size minus one; used at evaluation on small corpora.
pub fn sample_negatives_capped(
    batch: &mut SegmentBatch,
    vocab: &Vocab,
    k: usize,
    seed: u64,
) -> Result<()> {
    sample_negatives_impl(batch, vocab, k, seed, true)
}

fn sample_negatives_impl(
    batch: &mut SegmentBatch,
    vocab: &Vocab,
    k: usize,
    seed: u64,
    cap: bool,
) -> Result<()> {
    let len = batch.steps.len();
    for t in 0..len {
        batch.steps[t].negatives.clear();
        if !batch.steps[t].valid || t + 1 >= batch.steps.len() || !batch.steps[t + 1].valid {
            continue;
        }
        let positive = batch.steps[t + 1].material;
        let mtype = batch.steps[t + 1].material_type;
        let n = vocab.n_materials(mtype);
        let k = if cap { k.min(n - 1) } else { k };
        if k >= n {
            return Err(KmapError::invalid(format!(
                "cannot sample {k} negatives from {n} materials (need k < vocab size)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            seed,
            batch.student as u64,
            batch.segment_index as u64,
            t as u64,
        ]));
        let mut pool: Vec<usize> = (1..=n).filter(|&m| m != positive).collect();
        // partial Fisher-Yates: the first k entries become the sample
        for j in 0..k {
            let pick = rng.random_range(j..pool.len());
            pool.swap(j, pick);
        }
        pool.truncate(k);
        batch.steps[t].negatives = pool;
    }
    Ok(())
}

/// Training augmentation: for a deterministic subset of the users in this
/// batch, replace a fraction of their valid steps with padding.
pub fn augment_drop(
    batch: &[SegmentBatch],
    drop_frac: f64,
    user_frac: f64,
    seed: u64,
) -> Vec<SegmentBatch> {
    let mut out: Vec<SegmentBatch> = batch.to_vec();
    if drop_frac <= 0.0 || user_frac <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xD20B]));
    let n_users = out.len();
    let n_pick = ((user_frac * n_users as f64).round() as usize).min(n_users);
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut rng);
    for &u in order.iter().take(n_pick) {
        let seg = &mut out[u];
        let mut step_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            seed,
            seg.student as u64,
            seg.segment_index as u64,
            0xD20B,
        ]));
        for step in seg.steps.iter_mut() {
            if step.valid && step_rng.random::<f64>() < drop_frac {
                *step = Step::pad();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, m: &str, t: MaterialType, score: Option<u8>, ts: i64) -> InteractionEvent {
        InteractionEvent {
            student_id: s.into(),
            material_id: m.into(),
            material_type: t,
            score,
            ts,
        }
    }

    #[test]
    fn index_groups_and_sorts() {
        let events = vec![
            ev("a", "q1", MaterialType::Assessed, Some(1), 2),
            ev("b", "q1", MaterialType::Assessed, Some(0), 1),
            ev("a", "l1", MaterialType::NonAssessed, None, 1),
            ev("a", "q2", MaterialType::Assessed, Some(0), 3),
            ev("b", "l2", MaterialType::NonAssessed, None, 2),
            ev("b", "q2", MaterialType::Assessed, Some(1), 3),
        ];
        let (vocab, streams) = index_events(&events);
        assert_eq!(vocab.n_students(), 2);
        assert_eq!(streams.len(), 2);
        assert_eq!(streams[0].len(), 3);
        assert_eq!(streams[1].len(), 3);
        // student a sorted by ts: l1, q1, q2
        assert_eq!(streams[0][0].material_type, MaterialType::NonAssessed);
    }

    #[test]
    fn duplicate_timestamps_keep_file_order() {
        let events = vec![
            ev("a", "q1", MaterialType::Assessed, Some(1), 5),
            ev("a", "q2", MaterialType::Assessed, Some(0), 5),
            ev("a", "q3", MaterialType::Assessed, Some(1), 5),
        ];
        let (vocab, streams) = index_events(&events);
        let ids: Vec<&str> = streams[0]
            .iter()
            .map(|e| vocab.material_id(MaterialType::Assessed, e.material))
            .collect();
        assert_eq!(ids, vec!["q1", "q2", "q3"]);
    }

    #[test]
    fn lecture_with_score_rejected() {
        let bad = ev("a", "l1", MaterialType::NonAssessed, Some(1), 1);
        assert!(bad.check(3).is_err());
        let missing = ev("a", "q1", MaterialType::Assessed, None, 1);
        let err = missing.check(7).unwrap_err();
        assert!(err.to_string().contains("line 7"));
    }

    #[test]
    fn segment_sizes() {
        let stream: Vec<IndexedEvent> = (0..250)
            .map(|i| IndexedEvent {
                material: 1 + (i % 3),
                material_type: MaterialType::Assessed,
                response: Some(1),
            })
            .collect();
        let per = segment(&vec![stream], 100, 0.8).unwrap();
        let segs = &per[0];
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[2].valid_steps(), 50);
        assert_eq!(segs[0].steps.len(), 100);
        // 3 segments * 0.8 -> 2 train, 1 test
        assert_eq!(segs[0].split, Split::Train);
        assert_eq!(segs[1].split, Split::Train);
        assert_eq!(segs[2].split, Split::Test);
    }

    #[test]
    fn segment_single_event() {
        let stream = vec![IndexedEvent {
            material: 1,
            material_type: MaterialType::Assessed,
            response: Some(0),
        }];
        let per = segment(&vec![stream], 100, 0.8).unwrap();
        assert_eq!(per[0].len(), 1);
        assert_eq!(per[0][0].valid_steps(), 1);
        assert_eq!(per[0][0].split, Split::Train);
    }

    #[test]
    fn segments_concatenate_back() {
        let stream: Vec<IndexedEvent> = (0..137)
            .map(|i| IndexedEvent {
                material: 1 + (i % 5),
                material_type: if i % 3 == 0 {
                    MaterialType::NonAssessed
                } else {
                    MaterialType::Assessed
                },
                response: if i % 3 == 0 { None } else { Some(1) },
            })
            .collect();
        let per = segment(&vec![stream.clone()], 25, 0.8).unwrap();
        let mut rebuilt = Vec::new();
        for seg in &per[0] {
            for step in seg.steps.iter().filter(|s| s.valid) {
                rebuilt.push(IndexedEvent {
                    material: step.material,
                    material_type: step.material_type,
                    response: step.response,
                });
            }
        }
        assert_eq!(rebuilt, stream);
    }

    #[test]
    fn forced_negative() {
        let vocab = Vocab {
            students: vec!["a".into()],
            questions: vec!["qa".into(), "qb".into()],
            lectures: vec!["l1".into()],
        };
        let mut batch = SegmentBatch {
            student: 1,
            segment_index: 0,
            steps: vec![
                Step {
                    material: 2,
                    material_type: MaterialType::Assessed,
                    response: Some(1),
                    valid: true,
                    negatives: vec![],
                },
                Step {
                    material: 1,
                    material_type: MaterialType::Assessed,
                    response: Some(0),
                    valid: true,
                    negatives: vec![],
                },
            ],
            split: Split::Train,
        };
        sample_negatives(&mut batch, &vocab, 1, 9).unwrap();
        assert_eq!(batch.steps[0].negatives, vec![2]);
        assert!(batch.steps[1].negatives.is_empty());
    }

    #[test]
    fn negatives_exclude_positive_and_match_type() {
        let vocab = Vocab {
            students: vec!["a".into()],
            questions: (0..30).map(|i| format!("q{i}")).collect(),
            lectures: (0..10).map(|i| format!("l{i}")).collect(),
        };
        let steps: Vec<Step> = (0..20)
            .map(|i| Step {
                material: 1 + (i % 7),
                material_type: if i % 2 == 0 {
                    MaterialType::Assessed
                } else {
                    MaterialType::NonAssessed
                },
                response: if i % 2 == 0 { Some(1) } else { None },
                valid: true,
                negatives: vec![],
            })
            .collect();
        let mut batch = SegmentBatch {
            student: 1,
            segment_index: 0,
            steps,
            split: Split::Train,
        };
        sample_negatives(&mut batch, &vocab, 5, 3).unwrap();
        for t in 0..19 {
            let negs = &batch.steps[t].negatives;
            assert_eq!(negs.len(), 5);
            let positive = batch.steps[t + 1].material;
            assert!(!negs.contains(&positive));
            let n = vocab.n_materials(batch.steps[t + 1].material_type);
            assert!(negs.iter().all(|&m| m >= 1 && m <= n));
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5, "negatives must be distinct");
        }
        // determinism
        let mut again = batch.clone();
        for s in again.steps.iter_mut() {
            s.negatives.clear();
        }
        sample_negatives(&mut again, &vocab, 5, 3).unwrap();
        assert_eq!(again, batch);
    }

    #[test]
    fn k_too_large_errors() {
        let vocab = Vocab {
            students: vec!["a".into()],
            questions: vec!["qa".into(), "qb".into()],
            lectures: vec![],
        };
        let mut batch = SegmentBatch {
            student: 1,
            segment_index: 0,
            steps: vec![
                Step {
                    material: 1,
                    material_type: MaterialType::Assessed,
                    response: Some(1),
                    valid: true,
                    negatives: vec![],
                },
                Step {
                    material: 2,
                    material_type: MaterialType::Assessed,
                    response: Some(1),
                    valid: true,
                    negatives: vec![],
                },
            ],
            split: Split::Train,
        };
        assert!(sample_negatives(&mut batch, &vocab, 2, 0).is_err());
    }

    #[test]
    fn drop_zero_is_identity() {
        let batch = vec![SegmentBatch {
            student: 1,
            segment_index: 0,
            steps: vec![Step {
                material: 1,
                material_type: MaterialType::Assessed,
                response: Some(1),
                valid: true,
                negatives: vec![],
            }],
            split: Split::Train,
        }];
        assert_eq!(augment_drop(&batch, 0.0, 0.5, 1), batch);
    }

    #[test]
    fn drop_all_masks_everything() {
        let steps: Vec<Step> = (0..10)
            .map(|i| Step {
                material: 1 + i,
                material_type: MaterialType::Assessed,
                response: Some(1),
                valid: true,
                negatives: vec![],
            })
            .collect();
        let batch = vec![SegmentBatch {
            student: 1,
            segment_index: 0,
            steps,
            split: Split::Train,
        }];
        let out = augment_drop(&batch, 1.0, 1.0, 1);
        assert_eq!(out[0].valid_steps(), 0);
        assert!(out[0].steps.iter().all(|s| s.material == Vocab::PAD));
    }
}
