//! Graph construction: mesh, tied and contact edges, edge features,
//! positional encodings and per-frame graph samples.

use std::collections::{HashMap, HashSet};

use crate::error::MeshError;
use crate::mesh::{FrameState, Mesh, NodeType};
use crate::tensor::Tensor;

/// Directed edges in parallel sender/receiver arrays. Messages flow from
/// sender to receiver; edge features use `x_sender - x_receiver`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeList {
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
}

impl EdgeList {
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self {
            senders: pairs.iter().map(|p| p.0).collect(),
            receivers: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.senders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.senders.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.senders.iter().copied().zip(self.receivers.iter().copied())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sorted_unique(mut pairs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Undirected element edges in both directions, sorted by (source, target).
/// Two-node elements are lines; larger elements contribute their perimeter.
pub fn build_mesh_edges(mesh: &Mesh) -> Result<Vec<(usize, usize)>, MeshError> {
    let mut pairs = Vec::new();
    for (e, el) in mesh.elements().iter().enumerate() {
        for (a, &i) in el.iter().enumerate() {
            if el[a + 1..].contains(&i) {
                return Err(MeshError::DegenerateElement { element: e, node: i });
            }
        }
        let k = el.len();
        let mut push = |i: usize, j: usize| {
            pairs.push((i, j));
            pairs.push((j, i));
        };
        match k {
            0 | 1 => {}
            2 => push(el[0], el[1]),
            _ => (0..k).for_each(|a| push(el[a], el[(a + 1) % k])),
        }
    }
    Ok(sorted_unique(pairs))
}

/// Median reference length over the given edges; `None` when there are none.
pub fn median_edge_length(mesh: &Mesh, edges: &[(usize, usize)]) -> Option<f64> {
    let mut lengths: Vec<f64> = edges
        .iter()
        .filter(|(i, j)| i < j)
        .map(|&(i, j)| dist(mesh.reference_of(i), mesh.reference_of(j)))
        .collect();
    if lengths.is_empty() {
        return None;
    }
    lengths.sort_by(f64::total_cmp);
    let m = lengths.len();
    Some(if m % 2 == 1 {
        lengths[m / 2]
    } else {
        0.5 * (lengths[m / 2 - 1] + lengths[m / 2])
    })
}

/// Tied edges between deformable components: each deformable node links to
/// its `k` nearest deformable nodes of other components lying closer than
/// three median mesh-edge lengths, symmetrized.
pub fn build_tied_edges(mesh: &Mesh, k: usize) -> Result<Vec<(usize, usize)>, MeshError> {
    let mesh_edges = build_mesh_edges(mesh)?;
    let radius = median_edge_length(mesh, &mesh_edges).map_or(f64::INFINITY, |m| 3.0 * m);
    build_tied_edges_within(mesh, k, radius)
}

pub fn build_tied_edges_within(mesh: &Mesh, k: usize, radius: f64) -> Result<Vec<(usize, usize)>, MeshError> {
    if k == 0 {
        return Err(MeshError::Parameter("tied-edge k must be at least 1".into()));
    }
    let nodes: Vec<usize> = (0..mesh.n_nodes()).filter(|&i| mesh.is_deformable(i)).collect();
    let comp = mesh.components();
    let mut pairs = Vec::new();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    // Lattices put many pairs exactly at the cutoff; rounding noise must not
    // decide them.
    let cutoff = radius * (1.0 + 1e-9);
    for &i in &nodes {
        candidates.clear();
        for &j in &nodes {
            if comp[j] != comp[i] {
                let d = dist(mesh.reference_of(i), mesh.reference_of(j));
                if d < cutoff {
                    candidates.push((d, j));
                }
            }
        }
        // Distances are compared at 1e-9 relative resolution and ties break on
        // reference coordinates, so the choice survives relabeling and shifts.
        let scale = if radius.is_finite() { radius } else { 1.0 };
        candidates.sort_by(|a, b| {
            let (pa, pb) = (mesh.reference_of(a.1), mesh.reference_of(b.1));
            let q = |d: f64| (d / scale * 1e9).round();
            q(a.0)
                .total_cmp(&q(b.0))
                .then_with(|| pa.iter().zip(pb).fold(std::cmp::Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y))))
                .then(a.1.cmp(&b.1))
        });
        for &(_, j) in candidates.iter().take(k) {
            pairs.push((i, j));
            pairs.push((j, i));
        }
    }
    Ok(sorted_unique(pairs))
}

/// Directed pairs closer than `radius` in `positions` (`N×dim`), minus the
/// excluded pairs, sorted by (source, target). Uses a uniform hash grid with
/// cell size `radius`.
pub fn detect_contact_edges(
    positions: &[f64],
    dim: usize,
    radius: f64,
    excluded: &HashSet<(usize, usize)>,
) -> Vec<(usize, usize)> {
    assert!(radius > 0.0, "contact radius must be positive");
    let n = positions.len() / dim;
    let cell = |p: &[f64]| -> [i64; 3] {
        let mut c = [0i64; 3];
        for (a, x) in p.iter().enumerate() {
            c[a] = (x / radius).floor() as i64;
        }
        c
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for i in 0..n {
        grid.entry(cell(&positions[i * dim..(i + 1) * dim])).or_default().push(i);
    }
    let span: i64 = 1;
    let zspan = if dim == 3 { span } else { 0 };
    let mut pairs = Vec::new();
    for i in 0..n {
        let p = &positions[i * dim..(i + 1) * dim];
        let c = cell(p);
        for dx in -span..=span {
            for dy in -span..=span {
                for dz in -zspan..=zspan {
                    let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j != i
                            && dist(p, &positions[j * dim..(j + 1) * dim]) < radius
                            && !excluded.contains(&(i, j))
                        {
                            pairs.push((i, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// All-pairs reference implementation of [`detect_contact_edges`].
pub fn detect_contact_edges_brute(
    positions: &[f64],
    dim: usize,
    radius: f64,
    excluded: &HashSet<(usize, usize)>,
) -> Vec<(usize, usize)> {
    let n = positions.len() / dim;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j
                && dist(&positions[i * dim..(i + 1) * dim], &positions[j * dim..(j + 1) * dim]) < radius
                && !excluded.contains(&(i, j))
            {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Per edge: `(X_s - X_r, |X_s - X_r|, x_s - x_r, |x_s - x_r|)`.
pub fn mesh_edge_features(reference: &[f64], current: &[f64], dim: usize, edges: &EdgeList) -> Tensor {
    let w = 2 * (dim + 1);
    let mut out = Tensor::zeros(edges.len(), w);
    for (e, (s, r)) in edges.pairs().enumerate() {
        let row = out.row_mut(e);
        for (block, pos) in [reference, current].into_iter().enumerate() {
            let off = block * (dim + 1);
            let mut sq = 0.0;
            for a in 0..dim {
                let d = pos[s * dim + a] - pos[r * dim + a];
                row[off + a] = d;
                sq += d * d;
            }
            row[off + dim] = sq.sqrt();
        }
    }
    out
}

/// Per edge: `(x_s - x_r, |x_s - x_r|)`.
pub fn contact_edge_features(current: &[f64], dim: usize, edges: &EdgeList) -> Tensor {
    let mut out = Tensor::zeros(edges.len(), dim + 1);
    for (e, (s, r)) in edges.pairs().enumerate() {
        let row = out.row_mut(e);
        let mut sq = 0.0;
        for a in 0..dim {
            let d = current[s * dim + a] - current[r * dim + a];
            row[a] = d;
            sq += d * d;
        }
        row[dim] = sq.sqrt();
    }
    out
}

/// Stationary-wave encoding of coordinates normalized to their bounding box.
/// Row layout: for each axis, for `m = 1..=n_frequencies`, `sin(pi m u)`
/// then `cos(pi m u)`. A zero-extent axis encodes `u = 0`.
pub fn positional_encoding(coords: &[f64], dim: usize, n_frequencies: usize) -> Tensor {
    let n = coords.len() / dim;
    let width = 2 * dim * n_frequencies;
    let mut out = Tensor::zeros(n, width);
    for a in 0..dim {
        let axis = (0..n).map(|i| coords[i * dim + a]);
        let lo = axis.clone().fold(f64::INFINITY, f64::min);
        let hi = axis.fold(f64::NEG_INFINITY, f64::max);
        let extent = hi - lo;
        let flat = !(extent > f64::EPSILON * lo.abs().max(hi.abs()).max(1.0));
        for i in 0..n {
            let u = if flat { 0.0 } else { (coords[i * dim + a] - lo) / extent };
            let row = out.row_mut(i);
            for m in 1..=n_frequencies {
                let phase = std::f64::consts::PI * m as f64 * u;
                let c = 2 * (a * n_frequencies + m - 1);
                row[c] = phase.sin();
                row[c + 1] = phase.cos();
            }
        }
    }
    out
}

/// [`positional_encoding`] applied per mesh component on the reference
/// configuration.
pub fn mesh_positional_encoding(mesh: &Mesh, n_frequencies: usize) -> Tensor {
    let d = mesh.dim();
    let mut out = Tensor::zeros(mesh.n_nodes(), 2 * d * n_frequencies);
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &c) in mesh.components().iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    for nodes in groups.values() {
        let coords: Vec<f64> = nodes.iter().flat_map(|&i| mesh.reference_of(i).iter().copied()).collect();
        let pe = positional_encoding(&coords, d, n_frequencies);
        for (r, &i) in nodes.iter().enumerate() {
            out.row_mut(i).copy_from_slice(pe.row(r));
        }
    }
    out
}

/// Feature widths for a spatial dimension and frequency count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureDims {
    pub node: usize,
    pub mesh_edge: usize,
    pub contact_edge: usize,
    pub output: usize,
    pub positional: usize,
}

impl FeatureDims {
    /// Node features `(u, v, alpha, kappa, one-hot type)`; outputs `(u, v, alpha)`.
    pub fn for_dim(dim: usize, n_frequencies: usize) -> Self {
        Self {
            node: 2 * dim + 2 + NodeType::COUNT,
            mesh_edge: 2 * (dim + 1),
            contact_edge: dim + 1,
            output: 2 * dim + 1,
            positional: 2 * dim * n_frequencies,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub node_features: Tensor,
    pub mesh_edges: EdgeList,
    pub mesh_features: Tensor,
    pub contact_edges: EdgeList,
    pub contact_features: Tensor,
    pub positional: Tensor,
}

impl GraphSample {
    pub fn n_nodes(&self) -> usize {
        self.node_features.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Contact radius; `None` picks 1.5 median mesh-edge lengths.
    pub contact_radius: Option<f64>,
    pub tied_k: usize,
    pub n_frequencies: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            contact_radius: None,
            tied_k: 3,
            n_frequencies: 8,
        }
    }
}

/// Per-trajectory static graph data; builds a [`GraphSample`] per frame.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    mesh: Mesh,
    kappa: f64,
    contact_radius: f64,
    n_frequencies: usize,
    static_edges: EdgeList,
    excluded: HashSet<(usize, usize)>,
    positional: Tensor,
}

impl GraphBuilder {
    pub fn new(mesh: Mesh, kappa: f64, cfg: &GraphConfig) -> Result<Self, MeshError> {
        if cfg.n_frequencies == 0 {
            return Err(MeshError::Parameter("n_frequencies must be at least 1".into()));
        }
        let mesh_edges = build_mesh_edges(&mesh)?;
        let median = median_edge_length(&mesh, &mesh_edges);
        let n_comp = mesh.components().iter().collect::<HashSet<_>>().len();
        let tied = if n_comp > 1 {
            build_tied_edges_within(&mesh, cfg.tied_k.max(1), median.map_or(f64::INFINITY, |m| 3.0 * m))?
        } else {
            Vec::new()
        };
        let contact_radius = match cfg.contact_radius {
            Some(r) if r > 0.0 => r,
            Some(r) => return Err(MeshError::Parameter(format!("contact radius {r} must be positive"))),
            None => 1.5 * median.ok_or_else(|| {
                MeshError::Parameter("mesh has no edges; set the contact radius explicitly".into())
            })?,
        };
        let all = sorted_unique(mesh_edges.into_iter().chain(tied).collect());
        let mut excluded: HashSet<(usize, usize)> = all.iter().copied().collect();
        for el in mesh.elements() {
            for &i in el {
                for &j in el {
                    if i != j {
                        excluded.insert((i, j));
                    }
                }
            }
        }
        let positional = mesh_positional_encoding(&mesh, cfg.n_frequencies);
        Ok(Self {
            mesh,
            kappa,
            contact_radius,
            n_frequencies: cfg.n_frequencies,
            static_edges: EdgeList::from_pairs(&all),
            excluded,
            positional,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn contact_radius(&self) -> f64 {
        self.contact_radius
    }

    /// Mesh plus tied edges, fixed for the trajectory.
    pub fn static_edges(&self) -> &EdgeList {
        &self.static_edges
    }

    pub fn excluded(&self) -> &HashSet<(usize, usize)> {
        &self.excluded
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims::for_dim(self.mesh.dim(), self.n_frequencies)
    }

    pub fn contact_edges(&self, positions: &[f64]) -> EdgeList {
        EdgeList::from_pairs(&detect_contact_edges(
            positions,
            self.mesh.dim(),
            self.contact_radius,
            &self.excluded,
        ))
    }

    pub fn node_features(&self, frame: &FrameState) -> Tensor {
        let d = self.mesh.dim();
        let dims = self.dims();
        let x0 = self.mesh.reference();
        let mut out = Tensor::zeros(self.mesh.n_nodes(), dims.node);
        for (i, t) in self.mesh.node_types().iter().enumerate() {
            let row = out.row_mut(i);
            for a in 0..d {
                row[a] = frame.positions[i * d + a] - x0[i * d + a];
                row[d + a] = frame.velocities[i * d + a];
            }
            row[2 * d] = frame.hardening[i];
            row[2 * d + 1] = self.kappa;
            row[2 * d + 2 + t.code() as usize] = 1.0;
        }
        out
    }

    pub fn build(&self, frame: &FrameState) -> GraphSample {
        let d = self.mesh.dim();
        let contact_edges = self.contact_edges(&frame.positions);
        GraphSample {
            node_features: self.node_features(frame),
            mesh_features: mesh_edge_features(self.mesh.reference(), &frame.positions, d, &self.static_edges),
            mesh_edges: self.static_edges.clone(),
            contact_features: contact_edge_features(&frame.positions, d, &contact_edges),
            contact_edges,
            positional: self.positional.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mesh(dim: usize, x: Vec<f64>, elements: Vec<Vec<usize>>, comp: Vec<usize>) -> Mesh {
        let n = x.len() / dim;
        Mesh::new(dim, x, elements, vec![NodeType::Deformable; n], comp).unwrap()
    }

    #[test]
    fn triangle_quad_and_shared_edge_counts() {
        let tri = mesh(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![vec![0, 1, 2]], vec![0; 3]);
        assert_eq!(build_mesh_edges(&tri).unwrap().len(), 6);

        let quad = mesh(3, vec![0.0; 12], vec![vec![0, 1, 2, 3]], vec![0; 4]);
        let e = build_mesh_edges(&quad).unwrap();
        assert_eq!(e.len(), 8);
        assert!(!e.contains(&(0, 2)) && !e.contains(&(1, 3)));

        let two = mesh(2, vec![0.0; 8], vec![vec![0, 1, 2], vec![1, 2, 3]], vec![0; 4]);
        let e = build_mesh_edges(&two).unwrap();
        assert_eq!(e.len(), 10);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn degenerate_element_rejected() {
        let m = mesh(2, vec![0.0; 6], vec![vec![0, 1, 1]], vec![0; 3]);
        assert!(matches!(
            build_mesh_edges(&m),
            Err(MeshError::DegenerateElement { element: 0, node: 1 })
        ));
    }

    #[test]
    fn tied_edges_basic_cases() {
        let pair = mesh(2, vec![0.0, 0.0, 0.0, 0.0], vec![], vec![0, 1]);
        assert_eq!(build_tied_edges(&pair, 1).unwrap(), vec![(0, 1), (1, 0)]);
        let single = mesh(2, vec![0.0, 0.0, 1.0, 0.0], vec![vec![0, 1]], vec![0, 0]);
        assert!(build_tied_edges(&single, 1).unwrap().is_empty());
    }

    #[test]
    fn tied_edges_match_brute_force_on_a_line() {
        // Three components along x; nodes 0.5 apart inside components,
        // components separated by gaps of 0.8 and 1.1.
        let xs = [0.0, 0.5, 1.0, 1.8, 2.3, 2.8, 3.9, 4.4];
        let comp = vec![0, 0, 0, 1, 1, 1, 2, 2];
        let x: Vec<f64> = xs.iter().flat_map(|&v| [v, 0.0]).collect();
        let els = vec![vec![0, 1], vec![1, 2], vec![3, 4], vec![4, 5], vec![6, 7]];
        let m = mesh(2, x, els, comp.clone());
        let got = build_tied_edges(&m, 1).unwrap();
        let radius = 1.5;
        let mut want = Vec::new();
        for i in 0..xs.len() {
            let best = (0..xs.len())
                .filter(|&j| comp[j] != comp[i] && (xs[i] - xs[j]).abs() < radius)
                .min_by(|&a, &b| (xs[i] - xs[a]).abs().total_cmp(&(xs[i] - xs[b]).abs()).then(a.cmp(&b)));
            if let Some(j) = best {
                want.push((i, j));
                want.push((j, i));
            }
        }
        assert_eq!(got, sorted_unique(want));
        assert!(got.contains(&(2, 3)) && got.contains(&(5, 6)));
    }

    #[test]
    fn contact_radius_cases() {
        let none = HashSet::new();
        assert!(detect_contact_edges(&[0.0, 0.0, 2.0, 0.0], 2, 1.0, &none).is_empty());
        assert_eq!(detect_contact_edges(&[0.0, 0.0, 0.5, 0.0], 2, 1.0, &none), vec![(0, 1), (1, 0)]);
        let ex: HashSet<_> = [(0, 1), (1, 0)].into_iter().collect();
        assert!(detect_contact_edges(&[0.0, 0.0, 0.5, 0.0], 2, 1.0, &ex).is_empty());
    }

    #[test]
    fn contact_hash_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..60 {
            let dim = 2 + trial % 2;
            let pos: Vec<f64> = (0..50 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ex: HashSet<_> = (0..20).map(|_| (rng.random_range(0..50), rng.random_range(0..50))).collect();
            let r = rng.random_range(0.3..1.5);
            assert_eq!(
                detect_contact_edges(&pos, dim, r, &ex),
                detect_contact_edges_brute(&pos, dim, r, &ex)
            );
        }
    }

    #[test]
    fn edge_feature_examples() {
        let e = EdgeList::from_pairs(&[(0, 1)]);
        let x = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(
            mesh_edge_features(&x, &x, 3, &e).data(),
            &[-1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0]
        );
        let c = contact_edge_features(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 3, &e);
        assert_eq!(c.data(), &[0.0, 0.0, 1.0, 1.0]);
        let swapped = contact_edge_features(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 3, &EdgeList::from_pairs(&[(1, 0)]));
        assert_eq!(swapped.data(), &[0.0, 0.0, -1.0, 1.0]);
    }

    #[test]
    fn positional_encoding_corners_and_flat_axis() {
        // Flat along z.
        let coords = [0.0, 0.0, 2.0, 4.0, 1.0, 2.0, 2.0, 0.5, 2.0];
        let pe = positional_encoding(&coords, 3, 2);
        assert_eq!(pe.cols(), 12);
        for c in (0..12).step_by(2) {
            assert_eq!(pe.get(0, c), 0.0);
            assert_eq!(pe.get(0, c + 1), 1.0);
        }
        // Node 1 sits at u = 1 on x and y.
        assert!(pe.get(1, 0).abs() < 1e-15);
        assert_eq!(pe.get(1, 1), -1.0);
        // z is flat: constants for every node.
        for i in 0..3 {
            assert_eq!((pe.get(i, 8), pe.get(i, 9)), (0.0, 1.0));
        }
        let shifted: Vec<f64> = coords.iter().map(|v| v + 5.0).collect();
        let pe2 = positional_encoding(&shifted, 3, 2);
        assert!(pe.max_abs_diff(&pe2) < 1e-12);
    }

    fn lattice() -> (Mesh, FrameState) {
        let mut x = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                x.extend([c as f64, r as f64 + 0.5]);
            }
        }
        let mut els = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                let a = r * 3 + c;
                els.push(vec![a, a + 1, a + 4]);
                els.push(vec![a, a + 4, a + 3]);
            }
        }
        // Two wall nodes below the body.
        x.extend([0.5, 0.0, 1.5, 0.0]);
        els.push(vec![9, 10]);
        let mut types = vec![NodeType::Deformable; 9];
        types.extend([NodeType::Rigid; 2]);
        let mut comp = vec![0; 9];
        comp.extend([1, 1]);
        let m = Mesh::new(2, x, els, types, comp).unwrap();
        let mut f = FrameState::at_rest(&m);
        f.velocities[0] = 0.3;
        f.hardening[4] = 0.01;
        (m, f)
    }

    #[test]
    fn builder_features_and_contacts() {
        let (m, f) = lattice();
        let b = GraphBuilder::new(m, 0.2, &GraphConfig::default()).unwrap();
        assert_eq!(b.contact_radius(), 1.5);
        let s = b.build(&f);
        assert_eq!(s.node_features.cols(), 10);
        assert_eq!(s.node_features.row(0)[..6], [0.0, 0.0, 0.3, 0.0, 0.0, 0.2]);
        assert_eq!(s.node_features.row(9)[6..], [0.0, 1.0, 0.0, 0.0]);
        assert!(s.contact_edges.pairs().any(|(i, j)| i == 0 && j == 9));
        for (e, (i, j)) in s.contact_edges.pairs().enumerate() {
            assert!(s.contact_features.get(e, 2) < 1.5);
            assert!(!b.excluded().contains(&(i, j)));
        }
    }

    #[test]
    fn translation_leaves_features_unchanged() {
        let (m, f) = lattice();
        let shift = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x + 5.0).collect() };
        let m2 = Mesh::new(
            2,
            shift(m.reference()),
            m.elements().to_vec(),
            m.node_types().to_vec(),
            m.components().to_vec(),
        )
        .unwrap();
        let f2 = FrameState {
            positions: shift(&f.positions),
            ..f.clone()
        };
        let cfg = GraphConfig::default();
        let a = GraphBuilder::new(m, 0.2, &cfg).unwrap().build(&f);
        let b = GraphBuilder::new(m2, 0.2, &cfg).unwrap().build(&f2);
        assert_eq!(a.mesh_edges, b.mesh_edges);
        assert_eq!(a.contact_edges, b.contact_edges);
        assert!(a.node_features.max_abs_diff(&b.node_features) < 1e-12);
        assert!(a.mesh_features.max_abs_diff(&b.mesh_features) < 1e-12);
        assert!(a.contact_features.max_abs_diff(&b.contact_features) < 1e-12);
        assert!(a.positional.max_abs_diff(&b.positional) < 1e-12);
    }

    #[test]
    fn permutation_relabels_edges_and_features() {
        let (m, f) = lattice();
        let perm: Vec<usize> = vec![10, 3, 7, 0, 9, 1, 8, 2, 6, 4, 5];
        let cfg = GraphConfig::default();
        let a = GraphBuilder::new(m.clone(), 0.2, &cfg).unwrap().build(&f);
        let b = GraphBuilder::new(m.permuted(&perm), 0.2, &cfg)
            .unwrap()
            .build(&f.permuted(&perm, 2));
        for (k, &old) in perm.iter().enumerate() {
            assert_eq!(a.node_features.row(old), b.node_features.row(k));
            assert_eq!(a.positional.row(old), b.positional.row(k));
        }
        let key = |s: &GraphSample, contact: bool| {
            let (edges, feats) = if contact {
                (&s.contact_edges, &s.contact_features)
            } else {
                (&s.mesh_edges, &s.mesh_features)
            };
            let mut rows: Vec<Vec<u64>> = (0..edges.len())
                .map(|e| feats.row(e).iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&a, false), key(&b, false));
        assert_eq!(key(&a, true), key(&b, true));
        let relabeled: HashSet<(usize, usize)> = b.mesh_edges.pairs().map(|(i, j)| (perm[i], perm[j])).collect();
        assert_eq!(relabeled, a.mesh_edges.pairs().collect());
    }

    proptest! {
        #[test]
        fn encoding_within_unit_range(coords in proptest::collection::vec(-10.0f64..10.0, 2..60), n in 1usize..6) {
            let dim = 2;
            let coords = &coords[..coords.len() / dim * dim];
            let pe = positional_encoding(coords, dim, n);
            prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
