//! Trainable lookup tables and the shared concept-weight projections.
//!
//! Row 0 of every student/material table is the padding row: looking up the
//! pad index yields a constant zero vector (or a uniform probability vector
//! for concept weights), so no gradient ever reaches a pad row.

use crate::config::ModelDims;
use crate::data::MaterialType;
use crate::error::{KmapError, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;

pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    Student,
    QuestionK,
    LectureK,
    Response,
    QuestionB,
    LectureB,
}

/// Parameter indices of all embedding tables plus the concept projections.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub a_s: usize,
    pub a_qk: usize,
    pub a_lk: usize,
    pub a_r: usize,
    pub a_z: usize,
    /// Learned type embedding standing in for the step before a stream
    /// starts, where no previous material type exists.
    pub z_start: usize,
    pub a_qb: usize,
    pub a_lb: usize,
    pub a_wq: usize,
    pub a_wl: usize,
    pub dims: ModelDims,
    n_questions: usize,
    n_lectures: usize,
    n_students: usize,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: &ModelDims,
        n_students: usize,
        n_questions: usize,
        n_lectures: usize,
        rng: &mut R,
    ) -> Self {
        let mut reg = |name: &str, shape: Vec<usize>, rng: &mut R| {
            store.register(name, Tensor::randn(shape, 0.0, INIT_STD, rng))
        };
        EmbeddingTables {
            a_s: reg("embed.A_s", vec![n_students + 1, dims.d_s], rng),
            a_qk: reg("embed.A_qk", vec![n_questions + 1, dims.d_qk], rng),
            a_lk: reg("embed.A_lk", vec![n_lectures + 1, dims.d_lk], rng),
            a_r: reg("embed.A_r", vec![2, dims.d_r], rng),
            a_z: reg("embed.A_z", vec![2, dims.d_z], rng),
            z_start: reg("embed.z_start", vec![dims.d_z], rng),
            a_qb: reg("embed.A_qb", vec![n_questions + 1, dims.d_qb], rng),
            a_lb: reg("embed.A_lb", vec![n_lectures + 1, dims.d_lb], rng),
            a_wq: reg("embed.A_wq", vec![n_questions + 1, dims.n_c], rng),
            a_wl: reg("embed.A_wl", vec![n_lectures + 1, dims.n_c], rng),
            dims: dims.clone(),
            n_questions,
            n_lectures,
            n_students,
        }
    }

    fn table_info(&self, table: Table) -> (usize, usize, usize) {
        // (param index, rows excluding pad, width)
        match table {
            Table::Student => (self.a_s, self.n_students, self.dims.d_s),
            Table::QuestionK => (self.a_qk, self.n_questions, self.dims.d_qk),
            Table::LectureK => (self.a_lk, self.n_lectures, self.dims.d_lk),
            Table::Response => (self.a_r, 1, self.dims.d_r),
            Table::QuestionB => (self.a_qb, self.n_questions, self.dims.d_qb),
            Table::LectureB => (self.a_lb, self.n_lectures, self.dims.d_lb),
        }
    }

    /// Row lookup. The pad index returns a constant zero vector; real rows
    /// are differentiable with respect to exactly that row.
    pub fn lookup(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: Table,
        index: usize,
    ) -> Result<NodeId> {
        let (param, rows, width) = self.table_info(table);
        if table == Table::Response {
            // the response table has no pad row; indices are the scores 0/1
            if index > 1 {
                return Err(KmapError::IndexOutOfRange {
                    what: "response lookup",
                    index,
                    size: 2,
                });
            }
            let node = g.param(store, param)?;
            return g.select_row(node, index);
        }
        if index > rows {
            return Err(KmapError::IndexOutOfRange {
                what: "embedding lookup",
                index,
                size: rows + 1,
            });
        }
        if index == crate::data::Vocab::PAD {
            return Ok(g.zeros(vec![width]));
        }
        let node = g.param(store, param)?;
        g.select_row(node, index)
    }

    /// Type embedding: row 0 of `A_z` for assessed, row 1 for non-assessed.
    pub fn type_embedding(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mtype: MaterialType,
    ) -> Result<NodeId> {
        let node = g.param(store, self.a_z)?;
        g.select_row(node, mtype.as_z())
    }

    /// The learned stand-in for the type of the nonexistent step 0.
    pub fn start_type_embedding(&self, g: &mut Graph, store: &ParamStore) -> Result<NodeId> {
        g.param(store, self.z_start)
    }

    /// Softmax-normalized concept weights of a material. The pad index gets
    /// a uniform constant vector, masked downstream.
    pub fn concept_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mtype: MaterialType,
        index: usize,
    ) -> Result<NodeId> {
        let (param, rows) = match mtype {
            MaterialType::Assessed => (self.a_wq, self.n_questions),
            MaterialType::NonAssessed => (self.a_wl, self.n_lectures),
        };
        if index > rows {
            return Err(KmapError::IndexOutOfRange {
                what: "concept weights",
                index,
                size: rows + 1,
            });
        }
        if index == crate::data::Vocab::PAD {
            let n_c = self.dims.n_c;
            return g
                .constant(Tensor::filled(vec![n_c], 1.0 / n_c as f64));
        }
        let node = g.param(store, param)?;
        let row = g.select_row(node, index)?;
        g.softmax(row)
    }
}
