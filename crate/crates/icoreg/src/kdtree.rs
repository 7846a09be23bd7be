//! Exact nearest-neighbor search over points of arbitrary dimension.
//!
//! Median-split kd-tree stored as an implicit tree over a permutation array.
//! Used for ICP association (3-d), descriptor matching (n-d) and overlap
//! measurement; exactness matters more than raw speed at the scales involved.

/// Immutable kd-tree over `n` points of dimension `dim`, stored row-major.
pub struct KdTree {
    dim: usize,
    data: Vec<f64>,
    order: Vec<u32>,
}

impl KdTree {
    /// Builds from row-major point data. Panics if `data.len()` is not a
    /// multiple of `dim` or `dim` is zero.
    pub fn build(dim: usize, data: &[f64]) -> Self {
        assert!(dim > 0, "kd-tree dimension must be positive");
        assert_eq!(data.len() % dim, 0, "data length must be a multiple of dim");
        let n = data.len() / dim;
        let mut order: Vec<u32> = (0..n as u32).collect();
        split(dim, data, &mut order, 0);
        KdTree {
            dim,
            data: data.to_vec(),
            order,
        }
    }

    pub fn from_points3(points: &[nalgebra::Vector3<f64>]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Self::build(3, &data)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn coord(&self, point: u32, axis: usize) -> f64 {
        self.data[point as usize * self.dim + axis]
    }

    fn point(&self, point: u32) -> &[f64] {
        let start = point as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Index and squared distance of the nearest stored point to `query`.
    /// Returns `None` on an empty tree.
    pub fn nearest(&self, query: &[f64]) -> Option<(usize, f64)> {
        assert_eq!(query.len(), self.dim);
        if self.order.is_empty() {
            return None;
        }
        let mut best = (u32::MAX, f64::INFINITY);
        self.nearest_in(&self.order, 0, query, &mut best);
        Some((best.0 as usize, best.1))
    }

    fn nearest_in(&self, order: &[u32], depth: usize, query: &[f64], best: &mut (u32, f64)) {
        if order.is_empty() {
            return;
        }
        let mid = order.len() / 2;
        let node = order[mid];
        let d2 = sq_dist(self.point(node), query);
        if d2 < best.1 || (d2 == best.1 && node < best.0) {
            *best = (node, d2);
        }
        let axis = depth % self.dim;
        let delta = query[axis] - self.coord(node, axis);
        let (near, far) = if delta < 0.0 {
            (&order[..mid], &order[mid + 1..])
        } else {
            (&order[mid + 1..], &order[..mid])
        };
        self.nearest_in(near, depth + 1, query, best);
        if delta * delta <= best.1 {
            self.nearest_in(far, depth + 1, query, best);
        }
    }

    /// Indices of all stored points within `radius` of `query` (inclusive),
    /// ascending.
    pub fn within_radius(&self, query: &[f64], radius: f64) -> Vec<usize> {
        assert_eq!(query.len(), self.dim);
        let mut out = Vec::new();
        self.radius_in(&self.order, 0, query, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_in(&self, order: &[u32], depth: usize, query: &[f64], r2: f64, out: &mut Vec<usize>) {
        if order.is_empty() {
            return;
        }
        let mid = order.len() / 2;
        let node = order[mid];
        if sq_dist(self.point(node), query) <= r2 {
            out.push(node as usize);
        }
        let axis = depth % self.dim;
        let delta = query[axis] - self.coord(node, axis);
        let (near, far) = if delta < 0.0 {
            (&order[..mid], &order[mid + 1..])
        } else {
            (&order[mid + 1..], &order[..mid])
        };
        self.radius_in(near, depth + 1, query, r2, out);
        if delta * delta <= r2 {
            self.radius_in(far, depth + 1, query, r2, out);
        }
    }
}

fn split(dim: usize, data: &[f64], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % dim;
    let coord = |p: u32| data[p as usize * dim + axis];
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| coord(a).total_cmp(&coord(b)).then(a.cmp(&b)));
    let (left, rest) = order.split_at_mut(mid);
    split(dim, data, left, depth + 1);
    split(dim, data, &mut rest[1..], depth + 1);
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn brute_nearest(dim: usize, data: &[f64], q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..data.len() / dim {
            let d2 = sq_dist(&data[i * dim..(i + 1) * dim], q);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for dim in [2, 3, 8] {
            let data: Vec<f64> = (0..dim * 300).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tree = KdTree::build(dim, &data);
            for _ in 0..200 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect();
                let (ti, td) = tree.nearest(&q).unwrap();
                let (bi, bd) = brute_nearest(dim, &data, &q);
                assert_eq!(td, bd);
                assert_eq!(ti, bi);
            }
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let dim = 3;
        let data: Vec<f64> = (0..dim * 400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tree = KdTree::build(dim, &data);
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = rng.random_range(0.05..0.8);
            let got = tree.within_radius(&q, r);
            let want: Vec<usize> = (0..data.len() / dim)
                .filter(|&i| sq_dist(&data[i * dim..(i + 1) * dim], &q) <= r * r)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::build(3, &[]);
        assert!(tree.nearest(&[0.0, 0.0, 0.0]).is_none());
        assert!(tree.within_radius(&[0.0, 0.0, 0.0], 1.0).is_empty());
    }
}
