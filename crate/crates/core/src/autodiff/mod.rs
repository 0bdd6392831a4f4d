//! Reverse-mode differentiation over dense row-major 2-D tensors.
//!
//! A [`Graph`] is an append-only arena of nodes; operands are always created
//! before their consumers, so node order is a valid topological order and
//! backward is a single reverse sweep. Parameters live outside the graph in a
//! [`ParamRegistry`] and are borrowed, never copied, into leaf nodes.

mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use gradcheck::{check_gradients, GradCheckReport, WorstCoordinate};
pub use graph::{Axis, Graph, NodeId};
pub use params::{GradStore, Param, ParamId, ParamRegistry};

use std::fmt;

use serde::{Deserialize, Serialize};

/// Row/column extent of a node. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub const fn row(cols: usize) -> Self {
        Shape { rows: 1, cols }
    }

    pub const fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub const fn transposed(&self) -> Self {
        Shape {
            rows: self.cols,
            cols: self.rows,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}
