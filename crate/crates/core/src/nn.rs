//! Parameter initialisation and the affine layer shared by every component.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamRegistry, Shape};
use crate::error::Result;
use crate::rng;

/// Uniform values in `[-bound, bound]` from the init stream of `name`.
pub fn uniform(seed: u64, name: &str, n: usize, bound: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::INIT, rng::hash_str(name)]);
    (0..n).map(|_| r.gen_range(-bound..=bound)).collect()
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn register_glorot(reg: &mut ParamRegistry, seed: u64, name: &str, shape: Shape, fan_in: usize, fan_out: usize) -> Result<ParamId> {
    let data = uniform(seed, name, shape.numel(), glorot_bound(fan_in, fan_out));
    reg.register(name, shape, data)
}

pub fn register_const(reg: &mut ParamRegistry, name: &str, shape: Shape, value: f64) -> Result<ParamId> {
    reg.register(name, shape, vec![value; shape.numel()])
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, seed: u64, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = register_glorot(reg, seed, &format!("{name}.w"), Shape::new(input, output), input, output)?;
        let bias = if bias {
            Some(register_const(reg, &format!("{name}.b"), Shape::row(output), 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_per_name() {
        assert_eq!(uniform(3, "a", 5, 1.0), uniform(3, "a", 5, 1.0));
        assert_ne!(uniform(3, "a", 5, 1.0), uniform(3, "b", 5, 1.0));
        assert!(uniform(3, "a", 100, 0.1).iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut reg = ParamRegistry::new();
        let lin = Linear::new(&mut reg, 0, "l", 2, 1, true).unwrap();
        reg.get_mut(lin.weight).data = vec![2.0, -1.0];
        reg.get_mut(lin.bias.unwrap()).data = vec![0.5];
        let mut g = Graph::with_params(&reg);
        let x = g.constant(Shape::row(2), vec![3.0, 4.0]).unwrap();
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), [2.5]);
    }
}
