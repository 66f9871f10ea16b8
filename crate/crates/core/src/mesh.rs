//! Lagrangian meshes and per-frame nodal state.

use crate::container::Container;
use crate::error::{ContainerError, MeshError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeType {
    Deformable,
    Rigid,
    Clamped,
    Actuator,
}

impl NodeType {
    pub const COUNT: usize = 4;

    pub fn code(self) -> i64 {
        match self {
            NodeType::Deformable => 0,
            NodeType::Rigid => 1,
            NodeType::Clamped => 2,
            NodeType::Actuator => 3,
        }
    }

    pub fn from_code(code: i64) -> Result<Self, MeshError> {
        Ok(match code {
            0 => NodeType::Deformable,
            1 => NodeType::Rigid,
            2 => NodeType::Clamped,
            3 => NodeType::Actuator,
            other => return Err(MeshError::NodeType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    /// Reference coordinates, `N×dim` row-major.
    reference: Vec<f64>,
    elements: Vec<Vec<usize>>,
    node_type: Vec<NodeType>,
    component: Vec<usize>,
}

impl Mesh {
    pub fn new(
        dim: usize,
        reference: Vec<f64>,
        elements: Vec<Vec<usize>>,
        node_type: Vec<NodeType>,
        component: Vec<usize>,
    ) -> Result<Self, MeshError> {
        if dim != 2 && dim != 3 {
            return Err(MeshError::Dimension(dim));
        }
        if reference.len() % dim != 0 {
            return Err(MeshError::Length {
                name: "X",
                len: reference.len(),
                expected: reference.len() / dim * dim,
            });
        }
        let n = reference.len() / dim;
        for (name, len) in [("node_type", node_type.len()), ("component_id", component.len())] {
            if len != n {
                return Err(MeshError::Length { name, len, expected: n });
            }
        }
        for (e, el) in elements.iter().enumerate() {
            if let Some(&node) = el.iter().find(|&&i| i >= n) {
                return Err(MeshError::NodeOutOfRange {
                    element: e,
                    node,
                    n_nodes: n,
                });
            }
        }
        Ok(Self {
            dim,
            reference,
            elements,
            node_type,
            component,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn reference_of(&self, i: usize) -> &[f64] {
        &self.reference[i * self.dim..(i + 1) * self.dim]
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_type
    }

    pub fn components(&self) -> &[usize] {
        &self.component
    }

    pub fn is_deformable(&self, i: usize) -> bool {
        self.node_type[i] == NodeType::Deformable
    }

    pub fn deformable_mask(&self) -> Vec<bool> {
        self.node_type.iter().map(|&t| t == NodeType::Deformable).collect()
    }

    /// Applies a node relabeling: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Mesh {
        let n = self.n_nodes();
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let d = self.dim;
        let mut reference = Vec::with_capacity(n * d);
        for &old in perm {
            reference.extend_from_slice(self.reference_of(old));
        }
        Mesh {
            dim: d,
            reference,
            elements: self
                .elements
                .iter()
                .map(|el| el.iter().map(|&i| inverse[i]).collect())
                .collect(),
            node_type: perm.iter().map(|&i| self.node_type[i]).collect(),
            component: perm.iter().map(|&i| self.component[i]).collect(),
        }
    }

    /// Writes `X`, `elements` (padded with -1 to a common arity),
    /// `node_type` and `component_id`.
    pub fn write_arrays(&self, c: &mut Container) -> Result<(), ContainerError> {
        let n = self.n_nodes();
        c.push_f64("X", &[n, self.dim], self.reference.clone())?;
        let arity = self.elements.iter().map(Vec::len).max().unwrap_or(0);
        let mut el = Vec::with_capacity(self.elements.len() * arity);
        for e in &self.elements {
            el.extend(e.iter().map(|&i| i as i64));
            el.extend(std::iter::repeat_n(-1, arity - e.len()));
        }
        c.push_i64("elements", &[self.elements.len(), arity], el)?;
        c.push_i64("node_type", &[n], self.node_type.iter().map(|t| t.code()).collect())?;
        c.push_i64("component_id", &[n], self.component.iter().map(|&k| k as i64).collect())?;
        Ok(())
    }

    pub fn from_container(c: &Container) -> Result<Mesh, crate::Error> {
        let (xs, x) = c.f64("X")?;
        if xs.len() != 2 {
            return Err(MeshError::Parameter(format!("`X` must be rank 2, got shape {xs:?}")).into());
        }
        let dim = xs[1];
        let (es, el) = c.i64("elements")?;
        let arity = es.get(1).copied().unwrap_or(0);
        let elements = if arity == 0 {
            Vec::new()
        } else {
            el.chunks(arity)
                .map(|row| row.iter().filter(|&&i| i >= 0).map(|&i| i as usize).collect())
                .collect()
        };
        let (_, types) = c.i64("node_type")?;
        let node_type = types
            .iter()
            .map(|&t| NodeType::from_code(t))
            .collect::<Result<Vec<_>, _>>()?;
        let (_, comp) = c.i64("component_id")?;
        Ok(Mesh::new(
            dim,
            x.to_vec(),
            elements,
            node_type,
            comp.iter().map(|&k| k as usize).collect(),
        )?)
    }
}

/// Nodal state at one stored time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    /// Current positions, `N×dim`.
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    /// Plastic hardening, one value per node, never negative.
    pub hardening: Vec<f64>,
}

impl FrameState {
    pub fn at_rest(mesh: &Mesh) -> Self {
        Self {
            positions: mesh.reference().to_vec(),
            velocities: vec![0.0; mesh.reference().len()],
            hardening: vec![0.0; mesh.n_nodes()],
        }
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), MeshError> {
        let nd = mesh.n_nodes() * mesh.dim();
        for (name, len, expected) in [
            ("x", self.positions.len(), nd),
            ("v", self.velocities.len(), nd),
            ("alpha", self.hardening.len(), mesh.n_nodes()),
        ] {
            if len != expected {
                return Err(MeshError::Length { name, len, expected });
            }
        }
        if self.hardening.iter().any(|&a| a < 0.0) {
            return Err(MeshError::Parameter("negative hardening".into()));
        }
        Ok(())
    }

    pub fn permuted(&self, perm: &[usize], dim: usize) -> FrameState {
        let pick = |v: &[f64], w: usize| -> Vec<f64> {
            perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect()
        };
        FrameState {
            positions: pick(&self.positions, dim),
            velocities: pick(&self.velocities, dim),
            hardening: pick(&self.hardening, 1),
        }
    }
}
