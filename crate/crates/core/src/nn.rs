//! Exact nearest-neighbor search for quantization grids.
//!
//! Grids reach 10^4 points in ~10^2 dimensions, and CLVQ training plus the
//! projection passes issue millions of queries, so a linear scan per query
//! is the bottleneck of the whole pipeline. The index projects points onto
//! the two leading principal directions of the grid (filter states
//! concentrate near a low-dimensional manifold, so these carry most of the
//! spread) and buckets them on a 2-D grid of those keys. For orthonormal
//! directions the key distance is a lower bound on the Euclidean distance,
//! so scanning bucket cells outward by key distance and stopping once the
//! bound exceeds the best hit is exact. Within a cell, squared distances
//! accumulate in blocks with an early abort against the current best.
//!
//! Tie-breaking: the reported index is the lowest index among points at the
//! minimal distance, independent of scan order.

/// Squared Euclidean distance with early abort: the return value is exact
/// when `< cutoff`; any value `> cutoff` may be a partial sum.
#[inline]
pub fn dist2_partial(a: &[f64], b: &[f64], cutoff: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    let blocks = a.len() / 8;
    for blk in 0..blocks {
        let off = blk * 8;
        let mut s = 0.0;
        for k in 0..8 {
            let d = a[off + k] - b[off + k];
            s += d * d;
        }
        acc += s;
        if acc > cutoff {
            return acc;
        }
    }
    for k in blocks * 8..a.len() {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc
}

/// Full squared Euclidean distance.
#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    dist2_partial(a, b, f64::INFINITY)
}

pub struct NnIndex {
    dim: usize,
    points: Vec<f64>,
    proj: [Vec<f64>; 2],
    lo: [f64; 2],
    width: [f64; 2],
    cells_per_axis: [usize; 2],
    cells: Vec<Vec<u32>>,
    cell_of: Vec<u32>,
}

impl NnIndex {
    /// Builds the index over `n` points stored row-major in `points`.
    pub fn build(points: &[f64], dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0);
        let n = points.len() / dim;
        let proj = principal_directions(points, dim, n);

        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for i in 0..n {
            let p = &points[i * dim..(i + 1) * dim];
            for a in 0..2 {
                let k = dot(&proj[a], p);
                lo[a] = lo[a].min(k);
                hi[a] = hi[a].max(k);
            }
        }
        // Cells sized for a handful of points each.
        let per_axis = ((n as f64 / 4.0).sqrt().ceil() as usize).clamp(1, 512);
        let mut cells_per_axis = [1usize; 2];
        let mut width = [1.0f64; 2];
        for a in 0..2 {
            if !lo[a].is_finite() {
                lo[a] = 0.0;
                hi[a] = 0.0;
            }
            if hi[a] > lo[a] {
                cells_per_axis[a] = per_axis;
                width[a] = (hi[a] - lo[a]) / per_axis as f64;
            }
        }

        let mut index = NnIndex {
            dim,
            points: points.to_vec(),
            proj,
            lo,
            width,
            cells_per_axis,
            cells: vec![Vec::new(); cells_per_axis[0] * cells_per_axis[1]],
            cell_of: vec![0; n],
        };
        for i in 0..n {
            let c = index.cell_of_point(index.point(i));
            index.cells[c].push(i as u32);
            index.cell_of[i] = c as u32;
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn keys(&self, p: &[f64]) -> [f64; 2] {
        [dot(&self.proj[0], p), dot(&self.proj[1], p)]
    }

    fn axis_cell(&self, a: usize, key: f64) -> usize {
        if self.cells_per_axis[a] == 1 || self.width[a] <= 0.0 {
            return 0;
        }
        let c = ((key - self.lo[a]) / self.width[a]).floor();
        (c.max(0.0) as usize).min(self.cells_per_axis[a] - 1)
    }

    fn cell_of_point(&self, p: &[f64]) -> usize {
        let k = self.keys(p);
        self.axis_cell(0, k[0]) * self.cells_per_axis[1] + self.axis_cell(1, k[1])
    }

    /// Distance from a key to the cell interval along one axis (0 inside).
    #[inline]
    fn axis_gap(&self, a: usize, key: f64, cell: usize) -> f64 {
        let left = self.lo[a] + cell as f64 * self.width[a];
        let right = left + self.width[a];
        if key < left {
            left - key
        } else if key > right {
            key - right
        } else {
            0.0
        }
    }

    /// Returns `(index, squared distance)` of the nearest point; ties go to
    /// the lowest index.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        debug_assert_eq!(q.len(), self.dim);
        let qk = self.keys(q);
        let (n1, n2) = (self.cells_per_axis[0], self.cells_per_axis[1]);
        let c1 = self.axis_cell(0, qk[0]);
        let c2 = self.axis_cell(1, qk[1]);
        // Termination scale: any cell on Chebyshev ring r is at key distance
        // at least (r−1)·min_w along the axis that attains the ring.
        let mut min_w = f64::INFINITY;
        for a in 0..2 {
            if self.cells_per_axis[a] > 1 {
                min_w = min_w.min(self.width[a]);
            }
        }

        let mut best_d2 = f64::INFINITY;
        let mut best_idx = u32::MAX;
        let max_ring = n1.max(n2);
        for ring in 0..=max_ring {
            if ring > 0 && best_idx != u32::MAX && min_w.is_finite() {
                let lb = (ring - 1) as f64 * min_w;
                if lb * lb > best_d2 {
                    break;
                }
            }
            let lo1 = c1.saturating_sub(ring);
            let hi1 = (c1 + ring).min(n1 - 1);
            let lo2 = c2.saturating_sub(ring);
            let hi2 = (c2 + ring).min(n2 - 1);
            for i1 in lo1..=hi1 {
                for i2 in lo2..=hi2 {
                    if i1.abs_diff(c1).max(i2.abs_diff(c2)) != ring {
                        continue;
                    }
                    let g1 = self.axis_gap(0, qk[0], i1);
                    let g2 = self.axis_gap(1, qk[1], i2);
                    if g1 * g1 + g2 * g2 > best_d2 {
                        continue;
                    }
                    for &id in &self.cells[i1 * n2 + i2] {
                        let p = self.point(id as usize);
                        let d2 = dist2_partial(q, p, best_d2);
                        if d2 < best_d2 || (d2 == best_d2 && id < best_idx) {
                            best_d2 = d2;
                            best_idx = id;
                        }
                    }
                }
            }
        }
        (best_idx as usize, best_d2)
    }

    /// Moves point `i` (a CLVQ centroid update) and rebuckets it.
    pub fn move_point(&mut self, i: usize, new_point: &[f64]) {
        debug_assert_eq!(new_point.len(), self.dim);
        self.points[i * self.dim..(i + 1) * self.dim].copy_from_slice(new_point);
        let nc = self.cell_of_point(new_point);
        let oc = self.cell_of[i] as usize;
        if nc != oc {
            let pos = self.cells[oc].iter().position(|&x| x == i as u32).unwrap();
            self.cells[oc].swap_remove(pos);
            self.cells[nc].push(i as u32);
            self.cell_of[i] = nc as u32;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Two orthonormal directions approximating the leading principal
/// components, by deterministic power iteration on the (uncentered about
/// the mean) covariance of the points. Degenerate spreads fall back to
/// coordinate axes.
fn principal_directions(points: &[f64], dim: usize, n: usize) -> [Vec<f64>; 2] {
    let axis = |k: usize| {
        let mut v = vec![0.0; dim];
        v[k.min(dim - 1)] = 1.0;
        v
    };
    if n < 2 || dim == 1 {
        return [axis(0), axis(1.min(dim - 1))];
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for k in 0..dim {
            mean[k] += points[i * dim + k];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Power iteration with deflation; X^T (X v) products keep it O(n·dim).
    let cov_mul = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let p = &points[i * dim..(i + 1) * dim];
            let mut s = 0.0;
            for k in 0..dim {
                s += (p[k] - mean[k]) * v[k];
            }
            for k in 0..dim {
                out[k] += s * (p[k] - mean[k]);
            }
        }
    };
    let normalize = |v: &mut Vec<f64>| -> bool {
        let norm = dot(v, v).sqrt();
        if norm < 1e-12 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        true
    };
    let mut dir1 = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut buf = vec![0.0; dim];
    for _ in 0..12 {
        cov_mul(&dir1, &mut buf);
        std::mem::swap(&mut dir1, &mut buf);
        if !normalize(&mut dir1) {
            return [axis(0), axis(1)];
        }
    }
    // Second direction: deflate dir1, start from a fixed alternating seed.
    let mut dir2: Vec<f64> = (0..dim).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    for _ in 0..12 {
        cov_mul(&dir2, &mut buf);
        std::mem::swap(&mut dir2, &mut buf);
        let c = dot(&dir2, &dir1);
        for k in 0..dim {
            dir2[k] -= c * dir1[k];
        }
        if !normalize(&mut dir2) {
            // Data is essentially 1-D along dir1; any orthogonal axis works.
            dir2 = axis(0);
            let c = dot(&dir2, &dir1);
            for k in 0..dim {
                dir2[k] -= c * dir1[k];
            }
            if !normalize(&mut dir2) {
                dir2 = axis(1);
            }
            break;
        }
    }
    [dir1, dir2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute(points: &[f64], dim: usize, q: &[f64]) -> (usize, f64) {
        let n = points.len() / dim;
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..n {
            let d2 = dist2(q, &points[i * dim..(i + 1) * dim]);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn matches_brute_force_random() {
        let mut rng = crate::rng::seeded_rng(3);
        for &(n, dim) in &[(1usize, 1usize), (7, 3), (200, 5), (500, 17), (40, 1)] {
            let points: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>()).collect();
            let index = NnIndex::build(&points, dim);
            for _ in 0..200 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 1.4 - 0.2).collect();
                let (bi, bd) = brute(&points, dim, &q);
                let (ii, id) = index.nearest(&q);
                assert_eq!(bi, ii, "n={n} dim={dim}");
                assert_eq!(bd.to_bits(), id.to_bits());
            }
        }
    }

    #[test]
    fn matches_brute_force_on_simplex_bumps() {
        // Near-one-hot vectors: the geometry the chain quantizer sees.
        let mut rng = crate::rng::seeded_rng(7);
        let dim = 26;
        let n = 400;
        let mut points = vec![0.0; n * dim];
        for i in 0..n {
            let c = rng.random_range(0..dim - 1);
            let w: f64 = rng.random();
            points[i * dim + c] = w;
            points[i * dim + (c + 1) % (dim - 1)] = 1.0 - w;
            points[i * dim + dim - 1] = rng.random::<f64>(); // y block
        }
        let index = NnIndex::build(&points, dim);
        for t in 0..300 {
            let mut q = vec![0.0; dim];
            let c = t % (dim - 1);
            let w: f64 = rng.random();
            q[c] = w;
            q[(c + 2) % (dim - 1)] = 1.0 - w;
            q[dim - 1] = rng.random::<f64>();
            let (bi, _) = brute(&points, dim, &q);
            let (ii, _) = index.nearest(&q);
            assert_eq!(bi, ii);
        }
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        // Two identical points: nearest must report index 0.
        let points = vec![0.25, 0.75, 0.25, 0.75];
        let index = NnIndex::build(&points, 2);
        let (i, d2) = index.nearest(&[0.3, 0.7]);
        assert_eq!(i, 0);
        assert!(d2 > 0.0);
        // Equidistant distinct points.
        let points = vec![0.0, 1.0];
        let index = NnIndex::build(&points, 1);
        assert_eq!(index.nearest(&[0.5]).0, 0);
    }

    #[test]
    fn move_point_rebuckets() {
        let mut rng = crate::rng::seeded_rng(11);
        let dim = 4;
        let n = 300;
        let mut points: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>()).collect();
        let mut index = NnIndex::build(&points, dim);
        for step in 0..500 {
            let i = step % n;
            let np: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0).collect();
            points[i * dim..(i + 1) * dim].copy_from_slice(&np);
            index.move_point(i, &np);
            let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            assert_eq!(brute(&points, dim, &q).0, index.nearest(&q).0);
        }
    }

    #[test]
    fn constant_points_degenerate_to_full_scan() {
        let points = vec![1.0, 1.0, 1.0, 1.0];
        let index = NnIndex::build(&points, 2);
        assert_eq!(index.nearest(&[1.0, 1.0]).0, 0);
        assert_eq!(index.nearest(&[9.0, -3.0]).0, 0);
    }
}
