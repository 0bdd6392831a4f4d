//! Relation and connective heads, the memory-mixed relation output and the
//! joint loss.

use crate::autodiff::{Axis, Graph, NodeId, ParamRegistry};
use crate::config::ResponseMode;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::{self, StreamRng};

/// `depth` ReLU hidden layers (dropout after each at train time), then a
/// linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        seed: u64,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
        output: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = input;
        for l in 0..depth {
            layers.push(Linear::new(reg, seed, &format!("{name}.hidden{l}"), width, hidden, true)?);
            width = hidden;
        }
        layers.push(Linear::new(reg, seed, &format!("{name}.out"), width, output, true)?);
        Ok(Mlp { layers, dropout })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("output layer").output
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, mut rng: Option<&mut StreamRng>) -> Result<NodeId> {
        let (out, hidden) = self.layers.split_last().expect("output layer");
        let mut h = x;
        for l in hidden {
            h = l.forward(g, h)?;
            h = g.relu(h);
            if let Some(r) = rng.as_deref_mut() {
                h = g.dropout(h, self.dropout, r)?;
            }
        }
        out.forward(g, h)
    }
}

/// Independent dropout streams for the sites in the heads of one batch.
#[derive(Clone, Debug)]
pub struct Dropouts {
    pub relation: StreamRng,
    pub connective: StreamRng,
    pub memory: StreamRng,
    pub memory_head: StreamRng,
    pub key_response: StreamRng,
    pub memory_rate: f64,
}

impl Dropouts {
    pub fn new(seed: u64, epoch: usize, batch: usize, memory_rate: f64) -> Self {
        let s = |tag| rng::stream(seed, &[tag, epoch as u64, batch as u64]);
        Dropouts {
            relation: s(rng::RELATION_DROPOUT),
            connective: s(rng::CONNECTIVE_DROPOUT),
            memory: s(rng::MEMORY_DROPOUT),
            memory_head: s(rng::MEMORY_HEAD_DROPOUT),
            key_response: s(rng::KEY_RESPONSE_DROPOUT),
            memory_rate,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RelationLogits {
    /// `MLP_r(r)`.
    pub base: NodeId,
    /// The λ-mixed logits; equal to `base` in baseline mode.
    pub mixed: NodeId,
}

#[derive(Clone, Debug)]
pub struct ClassifierHeads {
    pub relation: Mlp,
    pub connective: Option<Mlp>,
    /// `MLP_m`, value mode only.
    pub memory: Option<Mlp>,
    pub lambda: f64,
    pub mode: ResponseMode,
}

impl ClassifierHeads {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        seed: u64,
        pair_dim: usize,
        num_relations: usize,
        num_connectives: usize,
        hidden: usize,
        depth: usize,
        memory_hidden: usize,
        dropout: f64,
        lambda: f64,
        mode: ResponseMode,
        connective_head: bool,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        let relation = Mlp::new(reg, seed, "head.relation", pair_dim, hidden, depth, num_relations, dropout)?;
        let connective = if connective_head && num_connectives > 0 {
            Some(Mlp::new(reg, seed, "head.connective", pair_dim, hidden, depth, num_connectives, dropout)?)
        } else {
            None
        };
        let memory = if mode == ResponseMode::Value {
            let h = if memory_hidden == 0 { 4 * num_relations } else { memory_hidden };
            Some(Mlp::new(reg, seed, "head.memory", num_relations, h, 1, num_relations, dropout)?)
        } else {
            None
        };
        Ok(ClassifierHeads {
            relation,
            connective,
            memory,
            lambda,
            mode,
        })
    }

    /// `(1-λ) MLP_r(r) + λ MLP_m(v)` (value), `(1-λ) MLP_r(r) + λ MLP_r(v')`
    /// (key) or `MLP_r(r)` (baseline). Memory dropout hits the response
    /// before its head.
    pub fn relation_logits(
        &self,
        g: &mut Graph<'_>,
        r: NodeId,
        response: Option<NodeId>,
        mut drop: Option<&mut Dropouts>,
    ) -> Result<RelationLogits> {
        let base = self.relation.forward(g, r, drop.as_deref_mut().map(|d| &mut d.relation))?;
        let (head, width) = match self.mode {
            ResponseMode::Baseline => {
                return Ok(RelationLogits { base, mixed: base });
            }
            ResponseMode::Value => (self.memory.as_ref().expect("value head"), self.relation.output_dim()),
            ResponseMode::Key => (&self.relation, self.relation.input_dim()),
        };
        let v = response.ok_or_else(|| Error::InvalidArgument(format!("{} mode needs a memory response", self.mode)))?;
        let s = g.shape(v);
        if s.cols != width || s.rows != g.shape(r).rows {
            return Err(Error::shape("relation_output", g.shape(r), s));
        }
        let (v, head_rng) = match drop {
            Some(d) => {
                let v = g.dropout(v, d.memory_rate, &mut d.memory)?;
                let r = match self.mode {
                    ResponseMode::Value => &mut d.memory_head,
                    _ => &mut d.key_response,
                };
                (v, Some(r))
            }
            None => (v, None),
        };
        let mem = head.forward(g, v, head_rng)?;
        let a = g.scale(base, 1.0 - self.lambda);
        let b = g.scale(mem, self.lambda);
        let mixed = g.add(a, b)?;
        Ok(RelationLogits { base, mixed })
    }

    pub fn connective_logits(&self, g: &mut Graph<'_>, r: NodeId, drop: Option<&mut Dropouts>) -> Result<Option<NodeId>> {
        match &self.connective {
            Some(h) => Ok(Some(h.forward(g, r, drop.map(|d| &mut d.connective))?)),
            None => Ok(None),
        }
    }

    /// Row-wise distributions from logits.
    pub fn distribution(g: &mut Graph<'_>, logits: NodeId) -> NodeId {
        g.softmax(logits, Axis::Cols)
    }

    /// Summed relation cross-entropy plus connective cross-entropy; rows
    /// without a connective label skip the second term.
    pub fn joint_loss(
        g: &mut Graph<'_>,
        relation: NodeId,
        connective: Option<NodeId>,
        gold_relation: &[usize],
        gold_connective: &[Option<usize>],
    ) -> Result<NodeId> {
        let targets: Vec<Option<usize>> = gold_relation.iter().copied().map(Some).collect();
        let rel = g.softmax_cross_entropy(relation, &targets)?;
        match connective {
            Some(c) if gold_connective.iter().any(Option::is_some) => {
                let con = g.softmax_cross_entropy(c, gold_connective)?;
                g.add(rel, con)
            }
            _ => Ok(rel),
        }
    }
}
