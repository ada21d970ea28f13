//! Max-flow / min-cut on a network with a dedicated source and sink.
//!
//! Dinic's algorithm (BFS level graph plus blocking flows with an iterative
//! DFS) over `f64` capacities. Residual capacities at or below a small
//! relative epsilon count as saturated.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: f64,
}

/// Flow network over `inner` ordinary nodes plus a source and a sink.
///
/// Arcs are stored in pairs: arc `2i` and its reverse `2i + 1`.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    inner: usize,
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinCut {
    pub flow: f64,
    /// For each inner node, whether it stays on the source side of the cut.
    pub source_side: Vec<bool>,
}

impl FlowNetwork {
    pub fn new(inner: usize) -> Self {
        Self {
            inner,
            arcs: Vec::new(),
            adj: vec![Vec::new(); inner + 2],
        }
    }

    pub fn with_capacity(inner: usize, arcs_per_node: usize) -> Self {
        let mut net = Self::new(inner);
        net.arcs.reserve(inner * arcs_per_node * 2);
        for a in net.adj.iter_mut().take(inner) {
            a.reserve(arcs_per_node);
        }
        net
    }

    pub fn source(&self) -> usize {
        self.inner
    }

    pub fn sink(&self) -> usize {
        self.inner + 1
    }

    pub fn inner_nodes(&self) -> usize {
        self.inner
    }

    /// Adds `u -> v` with capacity `cap_uv` and `v -> u` with `cap_vu` as one arc pair.
    pub fn add_edge_pair(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) {
        assert!(u < self.inner + 2 && v < self.inner + 2, "node out of range");
        assert!(cap_uv >= 0.0 && cap_vu >= 0.0, "capacities must be non-negative");
        assert!(u != v, "self loops are not allowed");
        let i = self.arcs.len();
        self.arcs.push(Arc { to: v, cap: cap_uv });
        self.arcs.push(Arc { to: u, cap: cap_vu });
        self.adj[u].push(i);
        self.adj[v].push(i + 1);
    }

    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64) {
        self.add_edge_pair(u, v, cap, 0.0);
    }

    /// Source -> `u` and `u` -> sink terminal arcs.
    pub fn add_terminal(&mut self, u: usize, from_source: f64, to_sink: f64) {
        if from_source > 0.0 {
            self.add_edge(self.source(), u, from_source);
        }
        if to_sink > 0.0 {
            self.add_edge(u, self.sink(), to_sink);
        }
    }
}

/// Computes a maximum flow and the minimum cut given by residual reachability
/// from the source.
pub fn max_flow(net: &FlowNetwork) -> MinCut {
    let mut arcs = net.arcs.clone();
    let adj = &net.adj;
    let n = adj.len();
    let (s, t) = (net.source(), net.sink());
    let max_cap = arcs.iter().map(|a| a.cap).fold(0.0, f64::max);
    let eps = max_cap * 1e-12;

    let mut flow = 0.0;
    let mut level = vec![-1i64; n];
    let mut it = vec![0usize; n];
    let mut queue = VecDeque::with_capacity(n);
    let mut path: Vec<usize> = Vec::new();

    loop {
        level.iter_mut().for_each(|l| *l = -1);
        level[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &e in &adj[u] {
                let a = &arcs[e];
                if a.cap > eps && level[a.to] < 0 {
                    level[a.to] = level[u] + 1;
                    queue.push_back(a.to);
                }
            }
        }
        if level[t] < 0 {
            break;
        }
        it.iter_mut().for_each(|i| *i = 0);

        // Blocking flow by repeated DFS along the level graph.
        path.clear();
        let mut u = s;
        loop {
            if u == t {
                let bottleneck = path.iter().map(|&e| arcs[e].cap).fold(f64::INFINITY, f64::min);
                let mut retreat_to = None;
                for (i, &e) in path.iter().enumerate() {
                    arcs[e].cap -= bottleneck;
                    arcs[e ^ 1].cap += bottleneck;
                    if retreat_to.is_none() && arcs[e].cap <= eps {
                        retreat_to = Some(i);
                    }
                }
                flow += bottleneck;
                // Resume from the tail of the first saturated arc.
                let i = retreat_to.unwrap_or(0);
                path.truncate(i);
                u = path.last().map(|&e| arcs[e].to).unwrap_or(s);
                continue;
            }
            let mut advanced = false;
            while it[u] < adj[u].len() {
                let e = adj[u][it[u]];
                let a = &arcs[e];
                if a.cap > eps && level[a.to] == level[u] + 1 {
                    path.push(e);
                    u = a.to;
                    advanced = true;
                    break;
                }
                it[u] += 1;
            }
            if advanced {
                continue;
            }
            // Dead end: prune `u` and back up one arc.
            level[u] = -1;
            match path.pop() {
                None => break,
                Some(e) => {
                    u = arcs[e ^ 1].to;
                    it[u] += 1;
                }
            }
        }
    }

    // Residual reachability from the source.
    let mut seen = vec![false; n];
    seen[s] = true;
    queue.clear();
    queue.push_back(s);
    while let Some(u) = queue.pop_front() {
        for &e in &adj[u] {
            let a = &arcs[e];
            if a.cap > eps && !seen[a.to] {
                seen[a.to] = true;
                queue.push_back(a.to);
            }
        }
    }
    debug_assert!(!seen[t]);
    seen.truncate(net.inner);
    MinCut {
        flow,
        source_side: seen,
    }
}

/// Capacity of the cut separating `source_side` (plus the source) from the rest.
pub fn cut_capacity(net: &FlowNetwork, source_side: &[bool]) -> f64 {
    let side = |v: usize| {
        if v == net.source() {
            true
        } else if v == net.sink() {
            false
        } else {
            source_side[v]
        }
    };
    let mut total = 0.0;
    for (u, arcs) in net.adj.iter().enumerate() {
        for &e in arcs {
            let a = &net.arcs[e];
            if side(u) && !side(a.to) {
                total += a.cap;
            }
        }
    }
    total
}
