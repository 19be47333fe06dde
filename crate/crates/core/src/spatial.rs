//! A static kd-tree for exact nearest-neighbour queries.
//!
//! Results are identical to a linear scan, including tie-breaking: among
//! equidistant points the lowest index wins.

use crate::cloud::Point;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for k in 0..3 {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] == lo[axis] {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point to `q`.
    ///
    /// Panics on an empty tree.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest-neighbour query on an empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Point, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // non-strict so that equidistant lower indices on the far side are still found
                if delta * delta <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Linear-scan nearest neighbour with the same tie-breaking as [`KdTree::nearest`].
pub fn nearest_brute_force(points: &[Point], q: &Point) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use nalgebra::Vector3;
    use rand::Rng;

    #[test]
    fn agrees_with_linear_scan() {
        let mut rng = seeded_rng(11);
        for n in [1, 5, 9, 64, 500] {
            let pts: Vec<Point> = (0..n)
                .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let tree = KdTree::build(&pts);
            for _ in 0..200 {
                let q = Vector3::new(rng.random_range(-0.2..1.2), rng.random(), rng.random());
                assert_eq!(tree.nearest(&q), nearest_brute_force(&pts, &q));
            }
        }
    }

    #[test]
    fn ties_resolve_to_the_lowest_index() {
        // a lattice produces many exact ties
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts.reverse();
        pts.extend(pts.clone());
        let tree = KdTree::build(&pts);
        let mut rng = seeded_rng(2);
        for _ in 0..500 {
            let q = Vector3::new(
                rng.random_range(0..11) as f64 * 0.5,
                rng.random_range(0..11) as f64 * 0.5,
                rng.random_range(0..11) as f64 * 0.5,
            );
            assert_eq!(tree.nearest(&q), nearest_brute_force(&pts, &q));
        }
    }
}
