//! Directed k-nearest-neighbor graphs over node feature rows.
//!
//! Node `i` connects to the `min(k, n-1)` other nodes with the smallest
//! Euclidean feature distance `d_ij = |x_i - x_j|₂`. Comparison uses
//! squared distances (same ordering, no square roots) and breaks ties by
//! the lower node index, so the graph is a pure function of its input.

/// Directed edge list grouped by source node.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameGraph {
    /// `(src, dst)` pairs, sorted by `src`; within one source, by selection
    /// order (closest first).
    pub edges: Vec<(u32, u32)>,
    /// Per-node contiguous range into `edges`.
    pub segments: Vec<(u32, u32)>,
}

impl FrameGraph {
    pub fn node_count(&self) -> usize {
        self.segments.len()
    }

    /// Ensures every node has at least one outgoing edge by giving isolated
    /// nodes a self-loop (whose difference feature is exactly zero). Needed
    /// for single-node graphs, where k-NN yields no neighbors at all.
    pub fn with_self_loops(mut self) -> FrameGraph {
        if self.segments.iter().all(|(s, e)| e > s) {
            return self;
        }
        let mut edges = Vec::with_capacity(self.edges.len() + 1);
        let mut segments = Vec::with_capacity(self.segments.len());
        for (i, &(s, e)) in self.segments.iter().enumerate() {
            let start = edges.len() as u32;
            if e > s {
                edges.extend_from_slice(&self.edges[s as usize..e as usize]);
            } else {
                edges.push((i as u32, i as u32));
            }
            segments.push((start, edges.len() as u32));
        }
        self.edges = edges;
        self.segments = segments;
        self
    }
}

/// Builds the directed k-NN graph over `n` rows of dimension `d`.
///
/// `k` is clamped to `n - 1`; a single node yields an empty edge list.
pub fn knn_edges(features: &[f64], n: usize, d: usize, k: usize) -> FrameGraph {
    debug_assert_eq!(features.len(), n * d);
    let kk = k.min(n.saturating_sub(1));
    let mut edges = Vec::with_capacity(n * kk);
    let mut segments = Vec::with_capacity(n);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        let xi = &features[i * d..(i + 1) * d];
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &features[j * d..(j + 1) * d];
            let mut dist2 = 0.0;
            for (a, b) in xi.iter().zip(xj) {
                let diff = a - b;
                dist2 += diff * diff;
            }
            cand.push((dist2, j as u32));
        }
        // (distance, index) sorts ties onto the lower index deterministically.
        cand.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let start = edges.len() as u32;
        for &(_, j) in cand.iter().take(kk) {
            edges.push((i as u32, j));
        }
        segments.push((start, edges.len() as u32));
    }
    FrameGraph { edges, segments }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_on_a_line_k1() {
        // Nodes at 0, 1, 3: nearest of 0 is 1, of 1 is 0 (tie broken by
        // distance: |1-0|=1 < |3-1|=2), of 3 is 1.
        let g = knn_edges(&[0.0, 1.0, 3.0], 3, 1, 1);
        assert_eq!(g.edges, vec![(0, 1), (1, 0), (2, 1)]);
        assert_eq!(g.segments, vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn k_saturates_at_n_minus_one() {
        let g = knn_edges(&[0.0, 1.0, 2.0, 5.0], 4, 1, 99);
        assert_eq!(g.segments.iter().map(|(s, e)| e - s).sum::<u32>(), 12);
        for (i, &(s, e)) in g.segments.iter().enumerate() {
            assert_eq!(e - s, 3);
            for &(src, dst) in &g.edges[s as usize..e as usize] {
                assert_eq!(src as usize, i);
                assert_ne!(src, dst, "no self edges from k-NN");
            }
        }
    }

    #[test]
    fn equidistant_ties_pick_lower_index() {
        // Node 0 at origin, nodes 1 and 2 both at distance 1.
        let g = knn_edges(&[0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 3, 2, 1);
        assert_eq!(g.edges[0], (0, 1));
    }

    #[test]
    fn single_node_has_no_edges_until_self_loops() {
        let g = knn_edges(&[1.0, 2.0], 1, 2, 5);
        assert!(g.edges.is_empty());
        assert_eq!(g.segments, vec![(0, 0)]);
        let g = g.with_self_loops();
        assert_eq!(g.edges, vec![(0, 0)]);
        assert_eq!(g.segments, vec![(0, 1)]);
    }

    #[test]
    fn self_loops_leave_connected_graphs_alone() {
        let g = knn_edges(&[0.0, 1.0, 3.0], 3, 1, 1);
        let before = g.clone();
        assert_eq!(g.with_self_loops(), before);
    }
}
