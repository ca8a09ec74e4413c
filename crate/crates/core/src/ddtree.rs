//! Hierarchical domain decomposition tree.
//!
//! The unit square is bisected recursively at grid midlines, vertical cuts at
//! even depth and horizontal cuts at odd depth, down to single grid cells. Every
//! internal node carries its interface `γ = ∂ω₁ \ ∂ω` and the index maps used to
//! scatter son data into the father's local numbering, computed once here.

use std::fmt::Write as _;

use crate::error::{HddError, Result};
use crate::mesh::{GridRect, IndexSet, Mesh, Rect};

pub type NodeId = usize;

/// Precomputed son-to-father index maps of an internal node.
#[derive(Debug, Clone)]
pub struct SplitMaps {
    /// For each son: position of every entry of `∂ω_i` in the father's
    /// concatenated row numbering `[∂ω ; γ]`.
    pub son_rows: [Vec<usize>; 2],
    /// For each son: position of every entry of `I(ω_i)` in `I(ω)`.
    pub son_cols: [Vec<usize>; 2],
    /// For each son: `Γ_{ω,i} = ∂ω ∩ ω_i`.
    pub gamma_parts: [IndexSet; 2],
}

#[derive(Debug, Clone)]
pub struct DDNode {
    pub id: NodeId,
    pub region: GridRect,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub sons: Option<[NodeId; 2]>,
    /// `I(ω)`: all nodes of the closed subdomain.
    pub idx_omega: IndexSet,
    /// `I(∂ω)`.
    pub idx_boundary: IndexSet,
    /// `I(γ_ω)`, empty for leaves.
    pub idx_interface: IndexSet,
    pub split: Option<SplitMaps>,
    /// Area of the subdomain.
    pub area: f64,
}

impl DDNode {
    pub fn is_leaf(&self) -> bool {
        self.sons.is_none()
    }

    /// Number of rows of the father system, `|∂ω| + |γ|`.
    pub fn system_rows(&self) -> usize {
        self.idx_boundary.len() + self.idx_interface.len()
    }
}

#[derive(Debug, Clone)]
pub struct DDTree {
    level: u32,
    h: f64,
    nodes: Vec<DDNode>,
    post_order: Vec<NodeId>,
    interface_owner: Vec<Option<NodeId>>,
}

/// Builds the decomposition tree of a structured mesh.
pub fn build_tree(mesh: &Mesh) -> DDTree {
    DDTree::new(mesh)
}

impl DDTree {
    pub fn new(mesh: &Mesh) -> Self {
        let mut nodes = Vec::new();
        build_rec(mesh, mesh.full_grid_rect(), 0, None, &mut nodes);
        let mut post_order = Vec::with_capacity(nodes.len());
        post_order_rec(&nodes, 0, &mut post_order);
        let mut interface_owner = vec![None; mesh.node_count()];
        for nd in &nodes {
            for i in nd.idx_interface.iter() {
                interface_owner[i] = Some(nd.id);
            }
        }
        Self {
            level: mesh.level(),
            h: mesh.h(),
            nodes,
            post_order,
            interface_owner,
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn root(&self) -> &DDNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &DDNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[DDNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn post_order(&self) -> &[NodeId] {
        &self.post_order
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn region(&self, id: NodeId) -> Rect {
        let g = self.nodes[id].region;
        Rect::new(
            g.i0 as f64 * self.h,
            g.i1 as f64 * self.h,
            g.j0 as f64 * self.h,
            g.j1 as f64 * self.h,
        )
    }

    /// Tree node whose interface contains the mesh node, `None` for nodes on `∂Ω`.
    pub fn interface_owner(&self, mesh_node: usize) -> Option<NodeId> {
        self.interface_owner.get(mesh_node).copied().flatten()
    }

    /// Nodes at the given depth, left to right in pre-order.
    pub fn nodes_at_depth(&self, depth: usize) -> Vec<NodeId> {
        // ids are assigned in pre-order
        self.nodes
            .iter()
            .filter(|n| n.depth == depth)
            .map(|n| n.id)
            .collect()
    }

    /// Ancestors of `id` from the root down, excluding `id` itself.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut v = Vec::new();
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            v.push(p);
            cur = self.nodes[p].parent;
        }
        v.reverse();
        v
    }

    /// All nodes of the subtree rooted at `id`, in pre-order.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut v = Vec::new();
        let mut stack = vec![id];
        while let Some(k) = stack.pop() {
            v.push(k);
            if let Some([a, b]) = self.nodes[k].sons {
                stack.push(b);
                stack.push(a);
            }
        }
        v
    }

    pub fn is_ancestor_or_self(&self, anc: NodeId, id: NodeId) -> bool {
        let mut cur = Some(id);
        while let Some(k) = cur {
            if k == anc {
                return true;
            }
            cur = self.nodes[k].parent;
        }
        false
    }

    /// Node whose region equals the given rectangle.
    pub fn find_region(&self, mesh: &Mesh, r: &Rect) -> Result<NodeId> {
        let g = mesh.grid_rect(r)?;
        self.nodes
            .iter()
            .find(|n| n.region == g)
            .map(|n| n.id)
            .ok_or_else(|| HddError::Usage(format!("no tree node with region {r}")))
    }

    /// Node reached from the root by a path of son choices (0 = first, 1 = second).
    pub fn node_by_path(&self, path: &[u8]) -> Result<NodeId> {
        let mut cur = 0;
        for &s in path {
            let sons = self.nodes[cur]
                .sons
                .ok_or_else(|| HddError::Usage(format!("path {path:?} descends below a leaf")))?;
            cur = *sons
                .get(s as usize)
                .ok_or_else(|| HddError::Usage(format!("son choice {s} not in {{0,1}}")))?;
        }
        Ok(cur)
    }

    /// Text dump, one line per node in pre-order:
    /// `depth region |I(ω)| |I(∂ω)| |I(γ)|`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                n.depth,
                self.region(n.id),
                n.idx_omega.len(),
                n.idx_boundary.len(),
                n.idx_interface.len()
            );
        }
        s
    }
}

/// Splits `∂ω_i` of son `son_index` (1 or 2) into `(Γ_{ω,i}, γ)`.
pub fn gamma_split(node: &DDNode, son_index: usize) -> Result<(IndexSet, IndexSet)> {
    let split = node
        .split
        .as_ref()
        .ok_or_else(|| HddError::Usage(format!("gamma_split on leaf node {}", node.id)))?;
    if !(1..=2).contains(&son_index) {
        return Err(HddError::Usage(format!(
            "son index {son_index} not in {{1,2}}"
        )));
    }
    Ok((
        split.gamma_parts[son_index - 1].clone(),
        node.idx_interface.clone(),
    ))
}

fn build_rec(
    mesh: &Mesh,
    region: GridRect,
    depth: usize,
    parent: Option<NodeId>,
    nodes: &mut Vec<DDNode>,
) -> NodeId {
    let id = nodes.len();
    let idx_omega = mesh.region_nodes_grid(&region);
    let idx_boundary = mesh.boundary_nodes_grid(&region);
    let h = mesh.h();
    nodes.push(DDNode {
        id,
        region,
        depth,
        parent,
        sons: None,
        idx_omega,
        idx_boundary,
        idx_interface: IndexSet::new(),
        split: None,
        area: region.cell_count() as f64 * h * h,
    });
    if region.width() == 1 && region.height() == 1 {
        return id;
    }
    let vertical = if region.width() == 1 {
        false
    } else if region.height() == 1 {
        true
    } else {
        depth % 2 == 0
    };
    let (r1, r2) = if vertical {
        let mid = region.i0 + region.width() / 2;
        (
            GridRect { i1: mid, ..region },
            GridRect { i0: mid, ..region },
        )
    } else {
        let mid = region.j0 + region.height() / 2;
        (
            GridRect { j1: mid, ..region },
            GridRect { j0: mid, ..region },
        )
    };
    let s1 = build_rec(mesh, r1, depth + 1, Some(id), nodes);
    let s2 = build_rec(mesh, r2, depth + 1, Some(id), nodes);

    let bd = nodes[id].idx_boundary.clone();
    let gamma = nodes[s1].idx_boundary.difference(&bd);
    let rows: Vec<usize> = bd.iter().chain(gamma.iter()).collect();
    let row_pos = |g: usize| -> usize {
        match bd.position(g) {
            Some(p) => p,
            None => bd.len() + gamma.position(g).expect("son boundary node outside ∂ω ∪ γ"),
        }
    };
    debug_assert_eq!(rows.len(), bd.len() + gamma.len());
    let omega = &nodes[id].idx_omega;
    let mut son_rows: [Vec<usize>; 2] = Default::default();
    let mut son_cols: [Vec<usize>; 2] = Default::default();
    let mut gamma_parts: [IndexSet; 2] = Default::default();
    for (k, s) in [s1, s2].into_iter().enumerate() {
        let sb = &nodes[s].idx_boundary;
        son_rows[k] = sb.iter().map(row_pos).collect();
        son_cols[k] = nodes[s]
            .idx_omega
            .positions_in(omega)
            .expect("son region outside father");
        gamma_parts[k] = sb.intersection(&bd);
    }
    let node = &mut nodes[id];
    node.sons = Some([s1, s2]);
    node.idx_interface = gamma;
    node.split = Some(SplitMaps {
        son_rows,
        son_cols,
        gamma_parts,
    });
    id
}

fn post_order_rec(nodes: &[DDNode], id: NodeId, out: &mut Vec<NodeId>) {
    if let Some([a, b]) = nodes[id].sons {
        post_order_rec(nodes, a, out);
        post_order_rec(nodes, b, out);
    }
    out.push(id);
}
