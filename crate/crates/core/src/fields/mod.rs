//! Aggregate-computing building blocks evaluated as synchronous rounds over
//! a device graph:
//!
//! - S-block: one leader per connected component (the minimum uid), found by
//!   min-uid flooding.
//! - G-block: hop-count gradient from a set of sources, with parent pointers.
//! - C-block: fold values up the parent tree towards each source.
//! - broadcast: push each source's value down its tree.
//!
//! Every block iterates a per-node update rule in lockstep (each node reads
//! only its neighbours' previous-round state) until nothing changes, and
//! reports how many rounds that took.

use std::collections::{BTreeMap, BTreeSet};

use crate::environment::Topology;
use crate::error::{Error, Result};

/// Undirected graph over device uids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FieldGraph {
    adj: BTreeMap<u64, BTreeSet<u64>>,
}

impl FieldGraph {
    pub fn new(nodes: impl IntoIterator<Item = u64>) -> Self {
        Self {
            adj: nodes.into_iter().map(|n| (n, BTreeSet::new())).collect(),
        }
    }

    /// Every topology edge.
    pub fn from_topology(topology: &Topology) -> Self {
        Self::filtered(topology, |_, _| true)
    }

    /// Topology edges `(i, j)`, `i < j`, for which `keep(i, j)` holds.
    pub fn filtered(topology: &Topology, mut keep: impl FnMut(u64, u64) -> bool) -> Self {
        let mut g = Self::new(topology.sites.iter().map(|s| s.uid));
        for (i, j) in topology.edges() {
            if keep(i, j) {
                g.add_edge(i, j);
            }
        }
        g
    }

    pub fn add_node(&mut self, uid: u64) {
        self.adj.entry(uid).or_default();
    }

    /// Adds both endpoints if missing. Self-loops are ignored.
    pub fn add_edge(&mut self, a: u64, b: u64) {
        if a == b {
            self.add_node(a);
            return;
        }
        self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
    }

    pub fn remove_node(&mut self, uid: u64) -> bool {
        let Some(ns) = self.adj.remove(&uid) else {
            return false;
        };
        for n in ns {
            if let Some(set) = self.adj.get_mut(&n) {
                set.remove(&uid);
            }
        }
        true
    }

    pub fn contains(&self, uid: u64) -> bool {
        self.adj.contains_key(&uid)
    }

    pub fn nodes(&self) -> impl Iterator<Item = u64> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn neighbors(&self, uid: u64) -> impl Iterator<Item = u64> + '_ {
        self.adj.get(&uid).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, a: u64, b: u64) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(|s| s.len()).sum::<usize>() / 2
    }

    /// Hop distances from `from` by breadth-first search.
    pub fn bfs(&self, from: u64) -> BTreeMap<u64, usize> {
        let mut dist = BTreeMap::from([(from, 0)]);
        let mut frontier = vec![from];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for u in frontier {
                let d = dist[&u];
                for v in self.neighbors(u) {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                        e.insert(d + 1);
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    /// Connected components, each sorted, ordered by their minimum uid.
    pub fn components(&self) -> Vec<Vec<u64>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for u in self.nodes() {
            if seen.contains(&u) {
                continue;
            }
            let comp: Vec<u64> = self.bfs(u).into_keys().collect();
            seen.extend(comp.iter().copied());
            out.push(comp);
        }
        out
    }

    /// Largest eccentricity within any component (0 for an edgeless graph).
    pub fn diameter(&self) -> usize {
        self.nodes()
            .map(|u| self.bfs(u).into_values().max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }
}

/// Per node, the uid of the leader of its component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Election {
    pub leader_of: BTreeMap<u64, u64>,
    /// Synchronous rounds executed, including the final round that changed
    /// nothing.
    pub rounds: usize,
}

impl Election {
    pub fn is_leader(&self, uid: u64) -> bool {
        self.leader_of.get(&uid) == Some(&uid)
    }

    pub fn leaders(&self) -> BTreeSet<u64> {
        self.leader_of.iter().filter(|(u, l)| u == l).map(|(u, _)| *u).collect()
    }
}

/// One synchronous min-uid flooding step. Returns whether anything changed.
fn flood_step(graph: &FieldGraph, state: &mut BTreeMap<u64, u64>) -> bool {
    let next: BTreeMap<u64, u64> = state
        .iter()
        .map(|(&u, &own)| {
            let best = graph
                .neighbors(u)
                .filter_map(|v| state.get(&v).copied())
                .fold(own, u64::min);
            (u, best)
        })
        .collect();
    let changed = next != *state;
    *state = next;
    changed
}

/// Multi-leader election: each component elects its minimum uid.
pub fn s_block(graph: &FieldGraph) -> Election {
    let mut state: BTreeMap<u64, u64> = graph.nodes().map(|u| (u, u)).collect();
    let mut rounds = 1;
    while flood_step(graph, &mut state) {
        rounds += 1;
    }
    Election {
        leader_of: state,
        rounds,
    }
}

/// Per-node state of a hop-count gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientNode {
    /// `None` means unreachable.
    pub hops: Option<usize>,
    pub parent: Option<u64>,
    pub source: Option<u64>,
}

impl GradientNode {
    const UNREACHED: GradientNode = GradientNode {
        hops: None,
        parent: None,
        source: None,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientField {
    pub nodes: BTreeMap<u64, GradientNode>,
    pub rounds: usize,
}

impl GradientField {
    pub fn get(&self, uid: u64) -> Option<&GradientNode> {
        self.nodes.get(&uid)
    }

    pub fn sources(&self) -> BTreeSet<u64> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.hops == Some(0))
            .map(|(u, _)| *u)
            .collect()
    }

    /// Children of each node, ascending.
    pub fn children(&self) -> BTreeMap<u64, Vec<u64>> {
        let mut out: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (&u, n) in &self.nodes {
            if let Some(p) = n.parent {
                out.entry(p).or_default().push(u);
            }
        }
        out
    }

    /// Nodes attached to `source`, ascending.
    pub fn members(&self, source: u64) -> Vec<u64> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.source == Some(source))
            .map(|(u, _)| *u)
            .collect()
    }
}

fn gradient_step(
    graph: &FieldGraph,
    sources: &BTreeSet<u64>,
    state: &BTreeMap<u64, GradientNode>,
) -> BTreeMap<u64, GradientNode> {
    state
        .keys()
        .map(|&u| {
            if sources.contains(&u) {
                return (
                    u,
                    GradientNode {
                        hops: Some(0),
                        parent: None,
                        source: Some(u),
                    },
                );
            }
            // neighbours are visited in ascending uid order, so strict `<`
            // keeps the lowest uid among equal hop counts
            let mut best: Option<(usize, u64)> = None;
            for v in graph.neighbors(u) {
                if let Some(h) = state.get(&v).and_then(|n| n.hops) {
                    if best.is_none_or(|(bh, _)| h < bh) {
                        best = Some((h, v));
                    }
                }
            }
            let node = match best {
                Some((h, p)) => GradientNode {
                    hops: Some(h + 1),
                    parent: Some(p),
                    source: state[&p].source,
                },
                None => GradientNode::UNREACHED,
            };
            (u, node)
        })
        .collect()
}

/// Hop-count gradient from `sources` by synchronous relaxation.
pub fn g_block(graph: &FieldGraph, sources: &BTreeSet<u64>) -> GradientField {
    let sources: BTreeSet<u64> = sources.iter().copied().filter(|s| graph.contains(*s)).collect();
    let mut state: BTreeMap<u64, GradientNode> = graph
        .nodes()
        .map(|u| {
            let node = if sources.contains(&u) {
                GradientNode {
                    hops: Some(0),
                    parent: None,
                    source: Some(u),
                }
            } else {
                GradientNode::UNREACHED
            };
            (u, node)
        })
        .collect();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let next = gradient_step(graph, &sources, &state);
        if next == state {
            break;
        }
        state = next;
    }
    GradientField { nodes: state, rounds }
}

/// Per-node accumulation of `values` over the node's subtree.
///
/// A node's result is `identity ⊕ own ⊕ child_1 ⊕ child_2 ⊕ ...` with
/// children taken in ascending uid order. Nodes without a value contribute
/// `identity` for themselves. Unreachable nodes are omitted.
pub fn c_block_subtrees<T: Clone>(
    field: &GradientField,
    values: &BTreeMap<u64, T>,
    identity: &T,
    mut combine: impl FnMut(&T, &T) -> T,
) -> BTreeMap<u64, T> {
    let children = field.children();
    // deepest first so every child is finished before its parent
    let mut order: Vec<(usize, u64)> = field
        .nodes
        .iter()
        .filter_map(|(&u, n)| n.hops.map(|h| (h, u)))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut acc: BTreeMap<u64, T> = BTreeMap::new();
    for (_, u) in order {
        let mut total = combine(identity, values.get(&u).unwrap_or(identity));
        for c in children.get(&u).into_iter().flatten() {
            let sub = acc.get(c).expect("children are processed first");
            total = combine(&total, sub);
        }
        acc.insert(u, total);
    }
    acc
}

/// Collection toward each source: the combine of every value in its tree.
pub fn c_block<T: Clone>(
    field: &GradientField,
    values: &BTreeMap<u64, T>,
    identity: &T,
    combine: impl FnMut(&T, &T) -> T,
) -> BTreeMap<u64, T> {
    let sources = field.sources();
    c_block_subtrees(field, values, identity, combine)
        .into_iter()
        .filter(|(u, _)| sources.contains(u))
        .collect()
}

/// Every reachable node receives its source's value.
pub fn broadcast_block<T: Clone>(field: &GradientField, per_source: &BTreeMap<u64, T>) -> Result<BTreeMap<u64, T>> {
    for s in field.sources() {
        if !per_source.contains_key(&s) {
            return Err(Error::MissingSource(s));
        }
    }
    Ok(field
        .nodes
        .iter()
        .filter_map(|(&u, n)| n.source.map(|s| (u, per_source[&s].clone())))
        .collect())
}

/// Leaders and leader-rooted gradient of a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coordination {
    pub election: Election,
    pub field: GradientField,
}

/// S-block then G-block from the elected leaders.
pub fn coordinate(graph: &FieldGraph) -> Coordination {
    let election = s_block(graph);
    let field = g_block(graph, &election.leaders());
    Coordination { election, field }
}

/// Drop `removed` and let the blocks re-converge on what is left.
pub fn stabilize_after_removal(graph: &FieldGraph, removed: u64) -> Result<(FieldGraph, Coordination)> {
    let mut residual = graph.clone();
    if !residual.remove_node(removed) {
        return Err(Error::InvalidArgument(format!("node {removed} is not in the graph")));
    }
    let coordination = coordinate(&residual);
    Ok((residual, coordination))
}
