//! Largest-first greedy coloring baseline.

use crate::state::DiscreteAssignment;

/// Colors vertices in order of decreasing degree (ties to the lower index),
/// assigning each the smallest color unused by its colored neighbors.
/// Returns `None` if some vertex exhausts the `k` colors.
pub fn greedy_coloring(n: usize, edges: &[(usize, usize)], k: usize) -> Option<DiscreteAssignment> {
    if k == 0 {
        return None;
    }
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(adj[v].len()), v));

    let mut colors = vec![usize::MAX; n];
    for &v in &order {
        let mut used = vec![false; k];
        for &u in &adj[v] {
            if colors[u] != usize::MAX {
                used[colors[u]] = true;
            }
        }
        match used.iter().position(|&b| !b) {
            Some(c) => colors[v] = c,
            None => return None,
        }
    }
    Some(colors)
}
