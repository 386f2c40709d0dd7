//! Static k-d tree over 3D points for radius and k-nearest queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::io::{dist2, Point3};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    start: usize,
    end: usize,
    /// Child node indices; `None` for leaves.
    children: Option<(usize, usize)>,
}

impl Node {
    fn min_dist2(&self, q: Point3) -> f64 {
        let mut d2 = 0.0;
        for d in 0..3 {
            let v = if q[d] < self.lo[d] {
                self.lo[d] - q[d]
            } else if q[d] > self.hi[d] {
                q[d] - self.hi[d]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }
}

/// Immutable after construction; safe to share between threads.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            start,
            end,
            children: None,
        });
        if end - start > LEAF_SIZE {
            let axis = (0..3)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap();
            let mid = start + (end - start) / 2;
            let points = &self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
            });
            let left = self.build_node(start, mid);
            let right = self.build_node(mid, end);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    /// Indices with `|p - query| <= radius`, sorted ascending.
    pub fn within_radius(&self, query: Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, radius, |i, _| out.push(i));
        out.sort_unstable();
        out
    }

    /// Calls `f(index, squared_distance)` for every point within `radius`,
    /// in tree order.
    pub fn for_each_within(&self, query: Point3, radius: f64, mut f: impl FnMut(usize, f64)) {
        if self.nodes.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.min_dist2(query) > r2 {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => {
                    for &i in &self.order[node.start..node.end] {
                        let d2 = dist2(self.points[i], query);
                        if d2 <= r2 {
                            f(i, d2);
                        }
                    }
                }
            }
        }
    }

    /// The `k` nearest points, closest first (ties by index).
    pub fn nearest(&self, query: Point3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut best: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if best.len() == k && node.min_dist2(query) > best.peek().unwrap().d2 {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    let (dl, dr) = (
                        self.nodes[l].min_dist2(query),
                        self.nodes[r].min_dist2(query),
                    );
                    if dl <= dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                None => {
                    for &i in &self.order[node.start..node.end] {
                        let c = Candidate {
                            d2: dist2(self.points[i], query),
                            index: i,
                        };
                        if best.len() < k {
                            best.push(c);
                        } else if c < *best.peek().unwrap() {
                            best.pop();
                            best.push(c);
                        }
                    }
                }
            }
        }
        let mut out: Vec<Candidate> = best.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_radius(points: &[Point3], q: Point3, r: f64) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| dist2(points[i], q) <= r * r)
            .collect()
    }

    proptest! {
        #[test]
        fn radius_matches_scan(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..300),
            r in 0.0f64..1.5,
            qi in any::<prop::sample::Index>(),
        ) {
            let tree = KdTree::build(&pts);
            let q = pts[qi.index(pts.len())];
            prop_assert_eq!(tree.within_radius(q, r), brute_radius(&pts, q, r));
        }

        #[test]
        fn knn_matches_sort(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..200),
            k in 1usize..20,
            q in prop::array::uniform3(-1.5f64..1.5),
        ) {
            let tree = KdTree::build(&pts);
            let mut all: Vec<(usize, f64)> = (0..pts.len()).map(|i| (i, dist2(pts[i], q))).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(tree.nearest(q, k), all);
        }
    }

    #[test]
    fn duplicate_points() {
        let pts = vec![[0.5, 0.5, 0.5]; 40];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.within_radius([0.5; 3], 0.0).len(), 40);
        assert_eq!(tree.nearest([0.0; 3], 3).iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
