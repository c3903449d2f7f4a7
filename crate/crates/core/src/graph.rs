//! Dependency DAG over template fields.
//!
//! An edge `a -> b` means field `b` may only start once `a` is complete.
//! The transitive closure (ancestry) is precomputed as one bitset row per
//! node; the mask builder queries it for every (query, key) pair.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::Deserialize;
use thiserror::Error;

use crate::template::TemplateSpec;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({from}, {to}) references a node outside 0..{node_count}")]
    OutOfRange {
        from: usize,
        to: usize,
        node_count: usize,
    },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("cycle detected: {}", format_cycle(.0))]
    Cycle(Vec<usize>),
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("graph references unknown field(s) {}", quote_all(.0))]
    UnknownFields(Vec<String>),
    #[error("self-loop on field `{0}`")]
    NamedSelfLoop(String),
    #[error("duplicate edge `{0}` -> `{1}`")]
    NamedDuplicate(String, String),
    #[error("cycle detected: {}", .0.join(" -> "))]
    NamedCycle(Vec<String>),
}

fn format_cycle(nodes: &[usize]) -> String {
    nodes
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn new(bits: usize) -> Self {
        Self(vec![0; bits.div_ceil(64)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }

    fn union_with(&mut self, other: &BitRow) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= *b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    /// `ancestors[b]` has bit `a` set iff a path `a -> ... -> b` exists.
    ancestors: Vec<BitRow>,
    topo: Vec<usize>,
}

impl DependencyGraph {
    /// Validates the edge list and precomputes ancestry, in-degrees, and a
    /// topological order.
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut seen = BTreeSet::new();
        let mut successors = vec![Vec::new(); node_count];
        let mut predecessors = vec![Vec::new(); node_count];
        for &(from, to) in edges {
            if from >= node_count || to >= node_count {
                return Err(GraphError::OutOfRange {
                    from,
                    to,
                    node_count,
                });
            }
            if from == to {
                return Err(GraphError::SelfLoop(from));
            }
            if !seen.insert((from, to)) {
                return Err(GraphError::DuplicateEdge(from, to));
            }
            successors[from].push(to);
            predecessors[to].push(from);
        }
        for list in successors.iter_mut().chain(predecessors.iter_mut()) {
            list.sort_unstable();
        }

        let topo = kahn_order(node_count, &successors, &predecessors)
            .ok_or_else(|| GraphError::Cycle(find_cycle(&successors)))?;

        let mut ancestors = vec![BitRow::new(node_count); node_count];
        for &v in &topo {
            let mut row = BitRow::new(node_count);
            for &p in &predecessors[v] {
                row.set(p);
                row.union_with(&ancestors[p]);
            }
            ancestors[v] = row;
        }

        Ok(Self {
            node_count,
            edges: edges.to_vec(),
            successors,
            predecessors,
            ancestors,
            topo,
        })
    }

    /// A chain `0 -> 1 -> ... -> n-1`.
    pub fn chain(node_count: usize) -> Self {
        let edges: Vec<_> = (1..node_count).map(|i| (i - 1, i)).collect();
        Self::new(node_count, &edges).expect("a chain is acyclic")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn successors(&self, node: usize) -> &[usize] {
        &self.successors[node]
    }

    pub fn predecessors(&self, node: usize) -> &[usize] {
        &self.predecessors[node]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.predecessors[node].len()
    }

    /// True iff a directed path `ancestor -> ... -> node` exists.
    pub fn is_ancestor(&self, ancestor: usize, node: usize) -> bool {
        self.ancestors[node].get(ancestor)
    }

    pub fn ancestors(&self, node: usize) -> BTreeSet<usize> {
        (0..self.node_count)
            .filter(|&a| self.is_ancestor(a, node))
            .collect()
    }

    /// Nodes with in-degree 0, ascending.
    pub fn sources(&self) -> BTreeSet<usize> {
        (0..self.node_count)
            .filter(|&v| self.predecessors[v].is_empty())
            .collect()
    }

    /// Kahn's order, always taking the smallest available index.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    /// Heaviest path by summed `token_counts`.
    ///
    /// Among paths of equal weight the lexicographically smallest index
    /// sequence wins. Paths may start at any node, so with zero counts the
    /// shortest such path is returned.
    pub fn critical_path(&self, token_counts: &[u64]) -> (u64, Vec<usize>) {
        assert_eq!(
            token_counts.len(),
            self.node_count,
            "one token count per node"
        );
        // best[v]: heaviest, then lexicographically smallest, path ending at v
        let mut best: Vec<(u64, Vec<usize>)> = vec![(0, Vec::new()); self.node_count];
        for &v in &self.topo {
            let mut choice = (token_counts[v], vec![v]);
            for &p in &self.predecessors[v] {
                let weight = best[p].0 + token_counts[v];
                let mut path = best[p].1.clone();
                path.push(v);
                if weight > choice.0 || (weight == choice.0 && path < choice.1) {
                    choice = (weight, path);
                }
            }
            best[v] = choice;
        }
        best.into_iter()
            .reduce(|a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            })
            .unwrap_or((0, Vec::new()))
    }
}

fn kahn_order(
    node_count: usize,
    successors: &[Vec<usize>],
    predecessors: &[Vec<usize>],
) -> Option<Vec<usize>> {
    let mut remaining: Vec<usize> = predecessors.iter().map(Vec::len).collect();
    let mut heap: BinaryHeap<Reverse<usize>> = (0..node_count)
        .filter(|&v| remaining[v] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(node_count);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for &s in &successors[v] {
            remaining[s] -= 1;
            if remaining[s] == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    (order.len() == node_count).then_some(order)
}

/// Returns one cycle as `[a, b, ..., a]`. Only called on cyclic graphs.
fn find_cycle(successors: &[Vec<usize>]) -> Vec<usize> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        OnStack,
        Done,
    }
    let n = successors.len();
    let mut mark = vec![Mark::New; n];
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::OnStack;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&s) = successors[v].get(*next) {
                *next += 1;
                match mark[s] {
                    Mark::New => {
                        mark[s] = Mark::OnStack;
                        stack.push((s, 0));
                    }
                    Mark::OnStack => {
                        let start = stack.iter().position(|&(u, _)| u == s).unwrap();
                        let mut cycle: Vec<usize> =
                            stack[start..].iter().map(|&(u, _)| u).collect();
                        cycle.push(s);
                        return cycle;
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                stack.pop();
            }
        }
    }
    Vec::new()
}

fn quote_all(names: &[String]) -> String {
    names
        .iter()
        .map(|n| format!("`{n}`"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    edges: Vec<(String, String)>,
}

/// Parses a name-based graph document against a template's field names.
pub fn load_graph(document: &str, template: &TemplateSpec) -> Result<DependencyGraph, GraphError> {
    let doc: GraphDocument =
        serde_json::from_str(document).map_err(|e| GraphError::Malformed(e.to_string()))?;
    let mut unknown: Vec<String> = doc
        .edges
        .iter()
        .flat_map(|(a, b)| [a, b])
        .filter(|name| template.field_index(name).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(GraphError::UnknownFields(unknown));
    }
    let index = |name: &str| template.field_index(name).expect("names checked above");
    let edges: Vec<(usize, usize)> = doc
        .edges
        .iter()
        .map(|(a, b)| (index(a), index(b)))
        .collect();
    let name = |i: usize| template.field(i).name.clone();
    DependencyGraph::new(template.len(), &edges).map_err(|e| match e {
        GraphError::SelfLoop(v) => GraphError::NamedSelfLoop(name(v)),
        GraphError::DuplicateEdge(a, b) => GraphError::NamedDuplicate(name(a), name(b)),
        GraphError::Cycle(c) => GraphError::NamedCycle(c.into_iter().map(name).collect()),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fan_in_ancestry() {
        let g = DependencyGraph::new(3, &[(0, 2), (1, 2)]).unwrap();
        assert_eq!(g.ancestors(2), BTreeSet::from([0, 1]));
        assert!(g.ancestors(0).is_empty());
        assert_eq!(g.in_degree(2), 2);
    }

    #[test]
    fn two_cycle_is_reported() {
        let err = DependencyGraph::new(2, &[(0, 1), (1, 0)]).unwrap_err();
        assert_eq!(err, GraphError::Cycle(vec![0, 1, 0]));
    }

    #[test]
    fn longer_cycle_lists_its_nodes() {
        let err = DependencyGraph::new(5, &[(0, 1), (1, 2), (2, 3), (3, 1), (3, 4)]).unwrap_err();
        assert_eq!(err, GraphError::Cycle(vec![1, 2, 3, 1]));
    }

    #[test]
    fn invalid_edges() {
        assert_eq!(
            DependencyGraph::new(2, &[(0, 2)]),
            Err(GraphError::OutOfRange {
                from: 0,
                to: 2,
                node_count: 2
            })
        );
        assert_eq!(
            DependencyGraph::new(2, &[(1, 1)]),
            Err(GraphError::SelfLoop(1))
        );
        assert_eq!(
            DependencyGraph::new(2, &[(0, 1), (0, 1)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
    }

    #[test]
    fn sources_of_simple_shapes() {
        assert_eq!(
            DependencyGraph::new(5, &[]).unwrap().sources(),
            BTreeSet::from([0, 1, 2, 3, 4])
        );
        assert_eq!(DependencyGraph::chain(3).sources(), BTreeSet::from([0]));
    }

    #[test]
    fn critical_path_examples() {
        assert_eq!(
            DependencyGraph::chain(3).critical_path(&[3, 4, 5]),
            (12, vec![0, 1, 2])
        );
        assert_eq!(
            DependencyGraph::new(4, &[])
                .unwrap()
                .critical_path(&[2, 7, 3, 1]),
            (7, vec![1])
        );
    }

    #[test]
    fn critical_path_ties_prefer_smaller_sequences() {
        // 0 -> 2 and 1 -> 2 weigh the same; [0, 2] < [1, 2].
        let g = DependencyGraph::new(3, &[(1, 2), (0, 2)]).unwrap();
        assert_eq!(g.critical_path(&[1, 1, 1]), (2, vec![0, 2]));
        // zero-weight tail does not extend the path
        let g = DependencyGraph::chain(3);
        assert_eq!(g.critical_path(&[0, 5, 0]), (5, vec![0, 1]));
        assert_eq!(g.critical_path(&[0, 0, 0]), (0, vec![0]));
    }

    #[test]
    fn topological_order_prefers_small_indices() {
        let g = DependencyGraph::new(4, &[(3, 0), (2, 1)]).unwrap();
        assert_eq!(g.topological_order(), &[2, 1, 3, 0]);
    }

    fn random_dag(max_nodes: usize) -> impl Strategy<Value = DependencyGraph> {
        (1..=max_nodes)
            .prop_flat_map(|n| {
                let pairs = n * (n - 1) / 2;
                (
                    Just(n),
                    proptest::collection::vec(any::<bool>(), pairs),
                    Just(()).prop_perturb(move |_, mut rng| {
                        let mut perm: Vec<usize> = (0..n).collect();
                        for i in (1..n).rev() {
                            perm.swap(i, rng.random_range(0..=i));
                        }
                        perm
                    }),
                )
            })
            .prop_map(|(n, bits, perm)| {
                let mut edges = Vec::new();
                let mut k = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        if bits[k] {
                            edges.push((perm[i], perm[j]));
                        }
                        k += 1;
                    }
                }
                DependencyGraph::new(n, &edges).unwrap()
            })
    }

    fn reachable(g: &DependencyGraph, from: usize, to: usize) -> bool {
        let mut stack = g.successors(from).to_vec();
        let mut seen = vec![false; g.node_count()];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if !std::mem::replace(&mut seen[v], true) {
                stack.extend_from_slice(g.successors(v));
            }
        }
        false
    }

    /// Every path (every start, every prefix), by DFS.
    fn all_paths(g: &DependencyGraph) -> Vec<Vec<usize>> {
        fn walk(g: &DependencyGraph, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            out.push(path.clone());
            let last = *path.last().unwrap();
            for &s in g.successors(last) {
                path.push(s);
                walk(g, path, out);
                path.pop();
            }
        }
        let mut out = Vec::new();
        for v in 0..g.node_count() {
            walk(g, &mut vec![v], &mut out);
        }
        out
    }

    fn brute_critical_path(g: &DependencyGraph, counts: &[u64]) -> (u64, Vec<usize>) {
        all_paths(g)
            .into_iter()
            .map(|p| (p.iter().map(|&v| counts[v]).sum::<u64>(), p))
            .reduce(|a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            })
            .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn topological_order_respects_edges(g in random_dag(12)) {
            let order = g.topological_order();
            let mut rank = vec![0; g.node_count()];
            for (i, &v) in order.iter().enumerate() {
                rank[v] = i;
            }
            for &(a, b) in g.edges() {
                prop_assert!(rank[a] < rank[b]);
            }
        }
    }

    proptest! {
        #[test]
        fn ancestry_matches_dfs(g in random_dag(8)) {
            for a in 0..g.node_count() {
                for b in 0..g.node_count() {
                    prop_assert_eq!(g.is_ancestor(a, b), reachable(&g, a, b));
                }
            }
        }

        #[test]
        fn critical_path_matches_enumeration(
            (g, counts) in random_dag(8).prop_flat_map(|g| {
                let n = g.node_count();
                (Just(g), proptest::collection::vec(0u64..6, n))
            })
        ) {
            prop_assert_eq!(g.critical_path(&counts), brute_critical_path(&g, &counts));
        }

        #[test]
        fn unit_counts_give_longest_node_path(g in random_dag(8)) {
            let ones = vec![1; g.node_count()];
            let longest = all_paths(&g).iter().map(Vec::len).max().unwrap() as u64;
            prop_assert_eq!(g.critical_path(&ones).0, longest);
        }

        #[test]
        fn critical_path_is_monotone(
            (g, counts, bump, at) in random_dag(8).prop_flat_map(|g| {
                let n = g.node_count();
                (Just(g), proptest::collection::vec(0u64..6, n), 1u64..5, 0..n)
            })
        ) {
            let before = g.critical_path(&counts).0;
            let mut raised = counts.clone();
            raised[at] += bump;
            prop_assert!(g.critical_path(&raised).0 >= before);
        }

        #[test]
        fn sources_are_zero_in_degree(g in random_dag(8)) {
            let sources = g.sources();
            prop_assert!(!sources.is_empty());
            for v in 0..g.node_count() {
                prop_assert_eq!(sources.contains(&v), g.in_degree(v) == 0);
            }
        }
    }
}
