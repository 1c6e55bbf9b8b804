use crate::diffarray::DiffArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Observed 2D joints plus the per-timestep skeleton adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalGraph<S> {
    /// `[T, J, 2]`
    pub vertices: DiffArray<S>,
    /// `[T, J, J]`
    pub adjacency: DiffArray<S>,
    pub bones: Vec<(usize, usize)>,
}

impl<S: Scalar> SpatioTemporalGraph<S> {
    pub fn new(vertices: DiffArray<S>, adjacency: DiffArray<S>, bones: Vec<(usize, usize)>) -> Result<Self> {
        let vs = vertices.shape();
        if vs.len() != 3 || vs[2] != 2 {
            return Err(Error::dim(format!("vertices must be [T, J, 2], got {vs:?}")));
        }
        let (t, j) = (vs[0], vs[1]);
        if j < 2 {
            return Err(Error::dim(format!("a skeleton graph needs J >= 2, got {j}")));
        }
        if adjacency.shape() != [t, j, j] {
            return Err(Error::dim(format!(
                "adjacency must be [{t}, {j}, {j}], got {:?}",
                adjacency.shape()
            )));
        }
        if let Some(&(a, b)) = bones.iter().find(|(a, b)| *a >= j || *b >= j) {
            return Err(Error::dim(format!("bone ({a}, {b}) out of range for {j} joints")));
        }
        Ok(Self {
            vertices,
            adjacency,
            bones,
        })
    }

    /// Builds the graph with unit edge weights from the bone list.
    pub fn from_bones(vertices: DiffArray<S>, bones: Vec<(usize, usize)>) -> Result<Self> {
        let vs = vertices.shape().to_vec();
        if vs.len() != 3 {
            return Err(Error::dim(format!("vertices must be [T, J, 2], got {vs:?}")));
        }
        let adjacency = crate::data::build_adjacency(&bones, vs[1], vs[0])?;
        Self::new(vertices, adjacency, bones)
    }

    pub fn steps(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.vertices.shape()[1]
    }
}
