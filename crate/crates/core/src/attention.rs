//! Layer-wise bi-attention between the two arguments and 2-max pooling
//! into the pair representation.

use crate::autodiff::{Axis, Graph, NodeId, ParamRegistry, Shape};
use crate::error::Result;
use crate::nn::Linear;

#[derive(Clone, Debug)]
pub struct PairAttention {
    /// One feed-forward map per encoder layer.
    pub ffn: Vec<Linear>,
    pub relu: bool,
    pub dim: usize,
}

/// Additive score mask: 0 for real tokens, a large negative value for PAD.
fn pad_mask(g: &mut Graph<'_>, n: usize, len: usize, shape: Shape) -> Result<NodeId> {
    let data = (0..n).map(|i| if i < len.max(1) { 0.0 } else { -1e30 }).collect();
    g.constant(shape, data)
}

impl PairAttention {
    pub fn new(reg: &mut ParamRegistry, seed: u64, layers: usize, dim: usize, relu: bool) -> Result<Self> {
        let ffn = (0..layers)
            .map(|l| Linear::new(reg, seed, &format!("attn.ffn{l}"), dim, dim, true))
            .collect::<Result<_>>()?;
        Ok(PairAttention { ffn, relu, dim })
    }

    /// `M = FFN(u1) u2^T`; `o2 = rowsoftmax(M) u2`, `o1 = rowsoftmax(M^T) u1`.
    /// With `lengths`, PAD positions get no attention weight.
    pub fn bi_attention(
        &self,
        g: &mut Graph<'_>,
        u1: NodeId,
        u2: NodeId,
        layer: usize,
        lengths: Option<(usize, usize)>,
    ) -> Result<(NodeId, NodeId)> {
        let mut f = self.ffn[layer].forward(g, u1)?;
        if self.relu {
            f = g.relu(f);
        }
        let m = g.matmul_t(f, u2, false, true)?;
        let (n1, n2) = (g.shape(u1).rows, g.shape(u2).rows);
        let (m2, m1) = match lengths {
            Some((l1, l2)) => {
                let row = pad_mask(g, n2, l2, Shape::row(n2))?;
                let col = pad_mask(g, n1, l1, Shape::new(n1, 1))?;
                (g.add(m, row)?, g.add(m, col)?)
            }
            None => (m, m),
        };
        let a2 = g.softmax(m2, Axis::Cols);
        let o2 = g.matmul(a2, u2)?;
        // rowsoftmax(M^T) is the column softmax of M, transposed.
        let a1 = g.softmax(m1, Axis::Rows);
        let o1 = g.matmul_t(a1, u1, true, false)?;
        Ok((o1, o2))
    }

    /// `r = [top2(o1_1); top2(o2_1); ..; top2(o1_L); top2(o2_L)]`.
    pub fn pair_representation(
        &self,
        g: &mut Graph<'_>,
        arg1: &[NodeId],
        arg2: &[NodeId],
        lengths: Option<(usize, usize)>,
    ) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(2 * arg1.len());
        for (l, (&u1, &u2)) in arg1.iter().zip(arg2).enumerate() {
            let (o1, o2) = self.bi_attention(g, u1, u2, l, lengths)?;
            parts.push(g.top2_seq(o1)?);
            parts.push(g.top2_seq(o2)?);
        }
        g.concat(&parts, Axis::Cols)
    }
}
