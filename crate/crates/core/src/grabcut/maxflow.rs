//! Dinic max-flow over real-valued capacities, and the binary energy cut
//! built on it.

use std::collections::VecDeque;

use super::GrabCutError;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: f64,
}

/// Residual flow network. Edges are stored in pairs; edge `e ^ 1` is the
/// reverse of edge `e`.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    adj: Vec<Vec<usize>>,
    edges: Vec<Edge>,
}

impl FlowNetwork {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            edges: Vec::new(),
        }
    }

    /// Adds `u → v` with capacity `cap` and `v → u` with capacity `rev_cap`.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        self.adj[u].push(self.edges.len());
        self.edges.push(Edge { to: v, cap });
        self.adj[v].push(self.edges.len());
        self.edges.push(Edge { to: u, cap: rev_cap });
    }

    fn levels(&self, s: usize) -> Vec<i64> {
        let mut level = vec![-1; self.adj.len()];
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &self.adj[u] {
                let Edge { to, cap } = self.edges[e];
                if cap > EPS && level[to] < 0 {
                    level[to] = level[u] + 1;
                    q.push_back(to);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, t: usize, pushed: f64, level: &[i64], iter: &mut [usize]) -> f64 {
        if u == t {
            return pushed;
        }
        while iter[u] < self.adj[u].len() {
            let e = self.adj[u][iter[u]];
            let Edge { to, cap } = self.edges[e];
            if cap > EPS && level[to] == level[u] + 1 {
                let got = self.augment(to, t, pushed.min(cap), level, iter);
                if got > EPS {
                    self.edges[e].cap -= got;
                    self.edges[e ^ 1].cap += got;
                    return got;
                }
            }
            iter[u] += 1;
        }
        0.0
    }

    /// Pushes the maximum flow from `s` to `t` and returns its value.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] < 0 {
                return flow;
            }
            let mut iter = vec![0; self.adj.len()];
            loop {
                let f = self.augment(s, t, f64::INFINITY, &level, &mut iter);
                if f <= EPS {
                    break;
                }
                flow += f;
            }
        }
    }

    /// Nodes reachable from `s` in the residual graph. After [`max_flow`]
    /// this is the source side of a minimum cut.
    ///
    /// [`max_flow`]: FlowNetwork::max_flow
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        self.levels(s).into_iter().map(|l| l >= 0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Foreground,
    Background,
}

/// Superpoint adjacency graph with unary and Potts pairwise energies.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuperpointGraph {
    /// `(E_fg, E_bg)` per node.
    unary: Vec<[f64; 2]>,
    edges: Vec<(usize, usize, f64)>,
}

impl SuperpointGraph {
    pub fn new(nodes: usize) -> Self {
        Self {
            unary: vec![[0.0; 2]; nodes],
            edges: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn set_unary(&mut self, node: usize, fg: f64, bg: f64) {
        self.unary[node] = [fg, bg];
    }

    pub fn unary(&self, node: usize) -> [f64; 2] {
        self.unary[node]
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Adds an undirected edge. Self-loops and negative or non-finite weights
    /// are rejected.
    pub fn add_edge(&mut self, u: usize, v: usize, weight: f64) -> Result<(), GrabCutError> {
        if u == v {
            return Err(GrabCutError::SelfLoop(u));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(GrabCutError::NegativeWeight { u, v, weight });
        }
        self.edges.push((u, v, weight));
        Ok(())
    }

    /// `Σ unary + Σ w·[x_u ≠ x_v]`.
    pub fn energy(&self, labels: &[Segment]) -> f64 {
        let unary: f64 = self
            .unary
            .iter()
            .zip(labels)
            .map(|(e, l)| match l {
                Segment::Foreground => e[0],
                Segment::Background => e[1],
            })
            .sum();
        let pair: f64 = self
            .edges
            .iter()
            .filter(|(u, v, _)| labels[*u] != labels[*v])
            .map(|(_, _, w)| w)
            .sum();
        unary + pair
    }
}

/// Globally minimizes the graph energy through an s/t max-flow; foreground
/// is the source side.
pub fn min_cut(graph: &SuperpointGraph) -> Result<Vec<Segment>, GrabCutError> {
    let n = graph.len();
    for &(u, v, w) in &graph.edges {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(GrabCutError::NegativeWeight { u, v, weight: w });
        }
    }
    if graph.unary.iter().flatten().any(|e| !e.is_finite()) {
        return Err(GrabCutError::NonFiniteEnergy);
    }
    let (s, t) = (n, n + 1);
    let mut net = FlowNetwork::new(n + 2);
    for (v, &[fg, bg]) in graph.unary.iter().enumerate() {
        // node on the sink side (background) cuts s→v, paying E_bg
        if bg > fg {
            net.add_edge(s, v, bg - fg, 0.0);
        } else if fg > bg {
            net.add_edge(v, t, fg - bg, 0.0);
        }
    }
    for &(u, v, w) in &graph.edges {
        if w > 0.0 {
            net.add_edge(u, v, w, w);
        }
    }
    net.max_flow(s, t);
    let side = net.source_side(s);
    Ok((0..n)
        .map(|v| if side[v] { Segment::Foreground } else { Segment::Background })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_network() {
        let mut g = FlowNetwork::new(4);
        g.add_edge(0, 1, 3.0, 0.0);
        g.add_edge(0, 2, 2.0, 0.0);
        g.add_edge(1, 2, 1.0, 0.0);
        g.add_edge(1, 3, 2.0, 0.0);
        g.add_edge(2, 3, 3.0, 0.0);
        assert_eq!(g.max_flow(0, 3), 5.0);
    }

    #[test]
    fn single_node_prefers_cheaper_label() {
        let mut g = SuperpointGraph::new(1);
        g.set_unary(0, 0.0, 5.0);
        let x = min_cut(&g).unwrap();
        assert_eq!(x, vec![Segment::Foreground]);
        assert_eq!(g.energy(&x), 0.0);
    }

    #[test]
    fn decoupled_pair() {
        let mut g = SuperpointGraph::new(2);
        g.set_unary(0, 0.0, 100.0);
        g.set_unary(1, 100.0, 0.0);
        g.add_edge(0, 1, 0.0).unwrap();
        assert_eq!(min_cut(&g).unwrap(), vec![Segment::Foreground, Segment::Background]);
    }

    #[test]
    fn strong_edge_forces_agreement() {
        let mut g = SuperpointGraph::new(2);
        g.set_unary(0, 0.0, 3.0);
        g.set_unary(1, 1.0, 0.0);
        g.add_edge(0, 1, 10.0).unwrap();
        let x = min_cut(&g).unwrap();
        assert_eq!(x[0], x[1]);
        assert_eq!(g.energy(&x), 1.0);
    }

    #[test]
    fn rejects_bad_edges() {
        let mut g = SuperpointGraph::new(2);
        assert!(matches!(g.add_edge(0, 1, -1.0), Err(GrabCutError::NegativeWeight { .. })));
        assert!(matches!(g.add_edge(1, 1, 1.0), Err(GrabCutError::SelfLoop(1))));
        g.edges.push((0, 1, -2.0));
        assert!(matches!(min_cut(&g), Err(GrabCutError::NegativeWeight { .. })));
    }

    #[test]
    fn negative_unaries_are_fine() {
        let mut g = SuperpointGraph::new(2);
        g.set_unary(0, -4.0, -1.0);
        g.set_unary(1, -1.0, -2.0);
        g.add_edge(0, 1, 0.5).unwrap();
        let x = min_cut(&g).unwrap();
        assert_eq!(g.energy(&x), -5.5);
    }
}
