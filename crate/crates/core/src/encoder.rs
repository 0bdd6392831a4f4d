//! Stacked convolutional GLU blocks with residual connections.

use crate::autodiff::{Graph, NodeId, ParamId, ParamRegistry, Shape};
use crate::error::Result;
use crate::nn;

#[derive(Clone, Debug)]
pub struct GluLayer {
    /// `(width * d) x 2d`; output columns `[A | B]`.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<GluLayer>,
    pub dim: usize,
    pub width: usize,
}

impl EncoderStack {
    pub fn new(reg: &mut ParamRegistry, seed: u64, name: &str, layers: usize, dim: usize, width: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let base = format!("{name}.layer{l}");
                let weight = nn::register_glorot(
                    reg,
                    seed,
                    &format!("{base}.w"),
                    Shape::new(width * dim, 2 * dim),
                    width * dim,
                    2 * dim,
                )?;
                let bias = nn::register_const(reg, &format!("{base}.b"), Shape::row(2 * dim), 0.0)?;
                Ok(GluLayer { weight, bias })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderStack { layers, dim, width })
    }

    /// `conv(x) = [A | B]`, returns `A * sigmoid(B) + x`.
    pub fn glu_block(&self, g: &mut Graph<'_>, x: NodeId, layer: usize) -> Result<NodeId> {
        let l = &self.layers[layer];
        let w = g.param(l.weight);
        let b = g.param(l.bias);
        let ab = g.conv1d(x, w, Some(b), self.width)?;
        let a = g.slice_cols(ab, 0, self.dim)?;
        let gate = g.slice_cols(ab, self.dim, self.dim)?;
        let gate = g.sigmoid(gate);
        let z = g.mul(a, gate)?;
        g.add(z, x)
    }

    /// Every layer's output, layer 0 fed by `x`.
    pub fn encode(&self, g: &mut Graph<'_>, x: NodeId) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in 0..self.layers.len() {
            h = self.glu_block(g, h, l)?;
            outs.push(h);
        }
        Ok(outs)
    }
}
