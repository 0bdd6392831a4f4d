//! Key-value instance memory over the training set.
//!
//! Keys are detached copies of pair representations (or frozen static
//! averages), values are one-hot relation rows, and every slot carries a
//! coefficient refreshed once per epoch from the training-set predictions.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId, ParamId, ParamRegistry, Shape};
use crate::config::{CoefficientMode, ResponseMode};
use crate::error::{Error, Result};
use crate::{nn, rng};

const KEY_INIT: f64 = 0.1;
/// Score added to excluded slots.
const EXCLUDED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub id: String,
    pub relation: usize,
    pub arg1: String,
    pub arg2: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStore {
    pub(crate) key_dim: usize,
    pub(crate) num_relations: usize,
    pub(crate) keys: Vec<f64>,
    pub(crate) values: Vec<f64>,
    pub(crate) coefficients: Vec<f64>,
    pub(crate) slots: Vec<SlotInfo>,
    pub(crate) slot_index: HashMap<String, usize>,
    /// Hash of each key row taken when it was written.
    pub(crate) key_hashes: Vec<u64>,
    pub(crate) written_this_epoch: Vec<bool>,
    pub(crate) fixed: bool,
}

impl MemoryStore {
    /// Random keys, one-hot values, zero coefficients.
    pub fn init(slots: Vec<SlotInfo>, key_dim: usize, num_relations: usize, seed: u64) -> Result<Self> {
        let m = slots.len();
        if m == 0 {
            return Err(Error::InvalidArgument("memory needs at least one slot".into()));
        }
        if key_dim == 0 || num_relations == 0 {
            return Err(Error::InvalidArgument("memory key and value widths must be positive".into()));
        }
        let mut values = vec![0.0; m * num_relations];
        let mut slot_index = HashMap::with_capacity(m);
        for (i, s) in slots.iter().enumerate() {
            if s.relation >= num_relations {
                return Err(Error::InvalidArgument(format!(
                    "slot {} has relation {} but only {num_relations} relations exist",
                    s.id, s.relation
                )));
            }
            if slot_index.insert(s.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate memory slot id {}", s.id)));
            }
            values[i * num_relations + s.relation] = 1.0;
        }
        let mut r = rng::stream(seed, &[rng::MEMORY_KEYS]);
        let keys: Vec<f64> = (0..m * key_dim).map(|_| r.gen_range(-KEY_INIT..=KEY_INIT)).collect();
        let key_hashes = keys.chunks(key_dim).map(rng::hash_f64s).collect();
        Ok(MemoryStore {
            key_dim,
            num_relations,
            keys,
            values,
            coefficients: vec![0.0; m],
            slots,
            slot_index,
            key_hashes,
            written_this_epoch: vec![false; m],
            fixed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn key(&self, slot: usize) -> &[f64] {
        &self.keys[slot * self.key_dim..(slot + 1) * self.key_dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn slots(&self) -> &[SlotInfo] {
        &self.slots
    }

    pub fn slot_of(&self, id: &str) -> Option<usize> {
        self.slot_index.get(id).copied()
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }

    pub fn key_hash(&self, slot: usize) -> u64 {
        self.key_hashes[slot]
    }

    /// Clears the per-epoch write flags.
    pub fn begin_epoch(&mut self) {
        self.written_this_epoch.fill(false);
    }

    pub fn written_this_epoch(&self, slot: usize) -> bool {
        self.written_this_epoch[slot]
    }

    /// Copies `r` into slot `slot`. A slot takes one write per epoch.
    pub fn update_key(&mut self, slot: usize, r: &[f64]) -> Result<()> {
        if slot >= self.len() {
            return Err(Error::InvalidArgument(format!("slot {slot} out of range for {} slots", self.len())));
        }
        if self.fixed {
            return Err(Error::InvalidArgument("fixed memory keys cannot be updated".into()));
        }
        if r.len() != self.key_dim {
            return Err(Error::shape("update_key", Shape::row(r.len()), Shape::row(self.key_dim)));
        }
        if self.written_this_epoch[slot] {
            return Err(Error::InvalidArgument(format!("slot {slot} written twice in one epoch")));
        }
        self.keys[slot * self.key_dim..(slot + 1) * self.key_dim].copy_from_slice(r);
        self.key_hashes[slot] = rng::hash_f64s(r);
        self.written_this_epoch[slot] = true;
        Ok(())
    }

    /// Rebuilds a saved store. Key hashes are recomputed from `keys`.
    pub fn from_parts(
        slots: Vec<SlotInfo>,
        key_dim: usize,
        num_relations: usize,
        keys: Vec<f64>,
        coefficients: Vec<f64>,
        fixed: bool,
    ) -> Result<Self> {
        let mut store = MemoryStore::init(slots, key_dim, num_relations, 0)?;
        if keys.len() != store.keys.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} key values, got {}",
                store.keys.len(),
                keys.len()
            )));
        }
        store.key_hashes = keys.chunks(key_dim).map(rng::hash_f64s).collect();
        store.keys = keys;
        store.fixed = fixed;
        store.set_coefficients(coefficients)?;
        Ok(store)
    }

    /// Installs static keys (`m x key_dim`) and freezes them.
    pub fn install_fixed_keys(&mut self, keys: Vec<f64>) -> Result<()> {
        if keys.len() != self.len() * self.key_dim {
            return Err(Error::shape(
                "install_fixed_keys",
                Shape::new(keys.len() / self.key_dim.max(1), self.key_dim),
                Shape::new(self.len(), self.key_dim),
            ));
        }
        self.key_hashes = keys.chunks(self.key_dim).map(rng::hash_f64s).collect();
        self.keys = keys;
        self.fixed = true;
        Ok(())
    }

    /// Slots whose key no longer matches the hash taken at write time.
    pub fn corrupted_slots(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| rng::hash_f64s(self.key(i)) != self.key_hashes[i])
            .collect()
    }

    /// Dynamic: `c_i = 1/m_j` for correctly predicted slots of class `j`
    /// (`m_j` = correct slots of that class), else 0. Balance: `c_i =
    /// 1/count_j` regardless of correctness.
    pub fn assign_coefficients(&mut self, mode: CoefficientMode, correct: &[bool]) -> Result<()> {
        if correct.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} correctness flags for {} slots",
                correct.len(),
                self.len()
            )));
        }
        let counted = |i: usize| mode == CoefficientMode::Balance || correct[i];
        let mut per_class = vec![0usize; self.num_relations];
        for (i, s) in self.slots.iter().enumerate() {
            if counted(i) {
                per_class[s.relation] += 1;
            }
        }
        for (i, s) in self.slots.iter().enumerate() {
            self.coefficients[i] = if counted(i) {
                1.0 / per_class[s.relation] as f64
            } else {
                0.0
            };
        }
        Ok(())
    }

    pub fn set_coefficients(&mut self, c: Vec<f64>) -> Result<()> {
        if c.len() != self.len() || c.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("coefficients must be m finite non-negative values".into()));
        }
        self.coefficients = c;
        Ok(())
    }

    /// Full relevance scores of `queries` (`B x key_dim`) against every
    /// slot, `B x m`.
    pub fn scores<'a>(&'a self, g: &mut Graph<'a>, queries: NodeId, scorer: &Scorer) -> Result<NodeId> {
        let s = self.slot_logits(g, queries, scorer)?;
        match scorer {
            Scorer::Dot => Ok(s),
            Scorer::Biaffine(p) => {
                let w1 = g.param(p.w1);
                let query_term = g.matmul(queries, w1)?;
                let b = g.param(p.b);
                let s = g.add(s, query_term)?;
                g.add(s, b)
            }
        }
    }

    /// The slot-dependent part of the scores. For the biaffine form,
    /// `w1^T q + b` is the same for every slot of a query and cancels in the
    /// softmax, so it is left out here.
    fn slot_logits<'a>(&'a self, g: &mut Graph<'a>, queries: NodeId, scorer: &Scorer) -> Result<NodeId> {
        let keys = g.constant_ref(Shape::new(self.len(), self.key_dim), &self.keys)?;
        match scorer {
            Scorer::Dot => g.matmul_t(queries, keys, false, true),
            Scorer::Biaffine(p) => {
                let u = g.param(p.u);
                let qu = g.matmul(queries, u)?;
                let bilinear = g.matmul_t(qu, keys, false, true)?;
                let w2 = g.param(p.w2);
                let key_term = g.matmul_t(w2, keys, true, true)?;
                g.add(bilinear, key_term)
            }
        }
    }

    /// Softmax over all slots, scaled by the coefficients, then summed over
    /// one-hot values (`Value`, `B x n_r`) or keys (`Key`, `B x key_dim`).
    /// `exclude[b] = Some(i)` drops slot `i` from query `b`.
    pub fn respond<'a>(
        &'a self,
        g: &mut Graph<'a>,
        queries: NodeId,
        scorer: &Scorer,
        mode: ResponseMode,
        exclude: Option<&[Option<usize>]>,
    ) -> Result<Retrieval> {
        let b = g.shape(queries).rows;
        let m = self.len();
        let mut scores = self.slot_logits(g, queries, scorer)?;
        if let Some(ex) = exclude.filter(|ex| ex.iter().any(Option::is_some)) {
            if ex.len() != b {
                return Err(Error::shape("respond", Shape::new(ex.len(), 1), Shape::new(b, 1)));
            }
            let mut mask = vec![0.0; b * m];
            for (row, slot) in ex.iter().enumerate() {
                if let Some(i) = slot {
                    mask[row * m + i] = EXCLUDED;
                }
            }
            let mask = g.constant(Shape::new(b, m), mask)?;
            scores = g.add(scores, mask)?;
        }
        let attention = g.softmax(scores, Axis::Cols);
        let c = g.constant_ref(Shape::row(m), &self.coefficients)?;
        let weights = g.mul(attention, c)?;
        let response = match mode {
            ResponseMode::Value => {
                let v = g.constant_ref(Shape::new(m, self.num_relations), &self.values)?;
                g.matmul(weights, v)?
            }
            ResponseMode::Key => {
                let k = g.constant_ref(Shape::new(m, self.key_dim), &self.keys)?;
                g.matmul(weights, k)?
            }
            ResponseMode::Baseline => {
                return Err(Error::InvalidArgument("the baseline mode does not query memory".into()));
            }
        };
        Ok(Retrieval {
            attention,
            weights,
            response,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Retrieval {
    /// `softmax(w)`, `B x m`.
    pub attention: NodeId,
    /// `softmax(w) * c`, `B x m`.
    pub weights: NodeId,
    pub response: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiaffineParams {
    pub u: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl BiaffineParams {
    pub fn new(reg: &mut ParamRegistry, seed: u64, dim: usize) -> Result<Self> {
        Ok(BiaffineParams {
            u: nn::register_glorot(reg, seed, "memory.biaffine.u", Shape::new(dim, dim), dim, dim)?,
            w1: nn::register_const(reg, "memory.biaffine.w1", Shape::new(dim, 1), 0.0)?,
            w2: nn::register_const(reg, "memory.biaffine.w2", Shape::new(dim, 1), 0.0)?,
            b: nn::register_const(reg, "memory.biaffine.b", Shape::SCALAR, 0.0)?,
            dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scorer {
    Dot,
    Biaffine(BiaffineParams),
}

pub fn score_dot(q: &[f64], k: &[f64]) -> f64 {
    q.iter().zip(k).map(|(a, b)| a * b).sum()
}

/// `q^T U k + w1^T q + w2^T k + b` with `U` row-major `d x d`.
pub fn score_biaffine(q: &[f64], k: &[f64], u: &[f64], w1: &[f64], w2: &[f64], b: f64) -> f64 {
    let d = q.len();
    let mut s = b + score_dot(w1, q) + score_dot(w2, k);
    for i in 0..d {
        s += q[i] * score_dot(&u[i * d..(i + 1) * d], k);
    }
    s
}

/// `[mean(arg1 rows); mean(arg2 rows)]`; an empty argument averages to zero.
pub fn static_key(arg1: &[&[f64]], arg2: &[&[f64]], dim: usize) -> Vec<f64> {
    let mean = |rows: &[&[f64]]| {
        let mut out = vec![0.0; dim];
        for r in rows {
            for (o, v) in out.iter_mut().zip(*r) {
                *o += v;
            }
        }
        if !rows.is_empty() {
            out.iter_mut().for_each(|o| *o /= rows.len() as f64);
        }
        out
    };
    let mut k = mean(arg1);
    k.extend(mean(arg2));
    k
}

/// The `k` slots with the largest weight, ties to the lower slot.
pub fn top_slots(weights: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| (i, weights[i])).collect()
}
