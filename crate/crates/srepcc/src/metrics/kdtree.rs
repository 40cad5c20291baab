//! Static k-d tree over 3D points for nearest-neighbor queries.
//!
//! Median-split build in an implicit array layout: the node of a subrange is
//! its middle element after partitioning on the depth axis, children are the
//! two halves. Queries compare (squared distance, original index) pairs, so
//! ties always resolve to the smallest index and results do not depend on
//! the arrangement select_nth_unstable happens to leave behind.

pub struct KdTree {
    pts: Vec<[f64; 3]>,
    ids: Vec<u32>,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_rec(entries: &mut [([f64; 3], u32)], axis: usize) {
    let n = entries.len();
    if n <= 1 {
        return;
    }
    let mid = n / 2;
    entries.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1)));
    let next = (axis + 1) % 3;
    let (left, rest) = entries.split_at_mut(mid);
    build_rec(left, next);
    build_rec(&mut rest[1..], next);
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> KdTree {
        let mut entries: Vec<([f64; 3], u32)> =
            points.iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();
        build_rec(&mut entries, 0);
        KdTree { pts: entries.iter().map(|e| e.0).collect(), ids: entries.iter().map(|e| e.1).collect() }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Squared distance and original index of the nearest point; ties go to
    /// the smaller index.
    pub fn nearest(&self, q: [f64; 3]) -> (f64, u32) {
        assert!(!self.pts.is_empty(), "nearest-neighbor query on an empty tree");
        let mut best = (f64::INFINITY, u32::MAX);
        self.nearest_rec(0, self.pts.len(), 0, &q, &mut best);
        best
    }

    fn nearest_rec(&self, lo: usize, hi: usize, axis: usize, q: &[f64; 3], best: &mut (f64, u32)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d2 = dist2(&self.pts[mid], q);
        let id = self.ids[mid];
        if d2 < best.0 || (d2 == best.0 && id < best.1) {
            *best = (d2, id);
        }
        let delta = q[axis] - self.pts[mid][axis];
        let next = (axis + 1) % 3;
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_rec(near.0, near.1, next, q, best);
        // the splitting plane lower-bounds far-side distances; <= keeps
        // equal-distance candidates reachable for the index tie-break
        if delta * delta <= best.0 {
            self.nearest_rec(far.0, far.1, next, q, best);
        }
    }

    /// The k nearest points as (squared distance, original index) in
    /// ascending order with index tie-break; shorter when the tree has fewer
    /// than k points.
    pub fn knn(&self, q: [f64; 3], k: usize) -> Vec<(f64, u32)> {
        let mut buf: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(0, self.pts.len(), 0, &q, k, &mut buf);
        }
        buf
    }

    fn knn_rec(&self, lo: usize, hi: usize, axis: usize, q: &[f64; 3], k: usize, buf: &mut Vec<(f64, u32)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let cand = (dist2(&self.pts[mid], q), self.ids[mid]);
        let pos = buf.partition_point(|e| e.0 < cand.0 || (e.0 == cand.0 && e.1 < cand.1));
        if pos < k {
            buf.insert(pos, cand);
            buf.truncate(k);
        }
        let delta = q[axis] - self.pts[mid][axis];
        let next = (axis + 1) % 3;
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_rec(near.0, near.1, next, q, k, buf);
        let bound = if buf.len() == k { buf[k - 1].0 } else { f64::INFINITY };
        if delta * delta <= bound {
            self.knn_rec(far.0, far.1, next, q, k, buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(pts: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<(f64, u32)> {
        let mut all: Vec<(f64, u32)> = pts.iter().enumerate().map(|(i, p)| (dist2(p, &q), i as u32)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // small integer range so duplicate coordinates and distance ties occur
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| [rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64])
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..100 {
            let q = [rng.gen_range(-2.0..10.0), rng.gen_range(-2.0..10.0), rng.gen_range(-2.0..10.0)];
            let want = brute_knn(&pts, q, 12);
            assert_eq!(tree.nearest(q), want[0]);
            assert_eq!(tree.knn(q, 12), want);
        }
    }

    #[test]
    fn small_trees_and_small_k() {
        let pts = [[1.0, 2.0, 3.0]];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest([0.0, 0.0, 0.0]), (14.0, 0));
        assert_eq!(tree.knn([0.0, 0.0, 0.0], 5), vec![(14.0, 0)]);
        assert!(tree.knn([0.0, 0.0, 0.0], 0).is_empty());
    }
}
