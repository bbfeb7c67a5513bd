//! Exact 1-Wasserstein distances on a finite (pseudo)metric space, plus the
//! simplex-grid enumeration the primal oracle walks.
//!
//! `W1(a, b) = max { sum_i f_i (a_i - b_i) : f_i - f_j <= d_ij }` by
//! Kantorovich-Rubinstein duality. With `f_0` pinned to zero the feasible
//! set is a bounded polytope that depends only on the metric, so its
//! vertices are enumerated once per space and every later distance query is
//! a max of dot products over that vertex list. The point counts this lab
//! allows (at most 6) keep the basis enumeration cheap.

use crate::numerics::Mat;

/// Precomputed vertex list of the 1-Lipschitz polytope of a metric.
#[derive(Debug, Clone)]
pub struct LipschitzDual {
    n: usize,
    /// Each vertex is a full potential `f` in R^n with `f[0] = 0`, stored
    /// in descending max-norm order so infeasibility certificates fire
    /// early.
    vertices: Vec<Vec<f64>>,
}

impl LipschitzDual {
    pub fn new(metric: &Mat) -> Self {
        let n = metric.nrows();
        if n <= 1 {
            return Self {
                n,
                vertices: vec![vec![0.0; n]],
            };
        }
        let scale = metric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
        let dim = n - 1;
        // Constraint rows over g = (f_1 .. f_{n-1}): f_i - f_j <= d_ij.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut row = vec![0.0; dim];
                if i > 0 {
                    row[i - 1] += 1.0;
                }
                if j > 0 {
                    row[j - 1] -= 1.0;
                }
                rows.push(row);
                rhs.push(metric[(i, j)]);
            }
        }
        let feas_slack = 1e-9 * scale;
        let mut keys = std::collections::BTreeSet::new();
        let mut vertices: Vec<Vec<f64>> = vec![vec![0.0; n]];
        keys.insert(vec![0i64; n]);

        let mut subset = vec![0usize; dim];
        enumerate_subsets(rows.len(), dim, &mut subset, 0, 0, &mut |chosen| {
            let mut a = Mat::zeros(dim, dim);
            let mut b = nalgebra::DVector::<f64>::zeros(dim);
            for (r, &ci) in chosen.iter().enumerate() {
                for c in 0..dim {
                    a[(r, c)] = rows[ci][c];
                }
                b[r] = rhs[ci];
            }
            let lu = a.lu();
            let Some(g) = lu.solve(&b) else { return };
            if g.iter().any(|v| !v.is_finite() || v.abs() > 16.0 * scale) {
                return;
            }
            // Feasibility against every constraint.
            for (row, r) in rows.iter().zip(&rhs) {
                let mut lhs = 0.0;
                for (rv, gv) in row.iter().zip(g.iter()) {
                    lhs += rv * gv;
                }
                if lhs > r + feas_slack {
                    return;
                }
            }
            let mut f = Vec::with_capacity(n);
            f.push(0.0);
            f.extend(g.iter().copied());
            let key: Vec<i64> = f.iter().map(|v| (v / (1e-9 * scale)).round() as i64).collect();
            if keys.insert(key) {
                vertices.push(f);
            }
        });

        vertices.sort_by(|a, b| {
            let na = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let nb = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            nb.total_cmp(&na)
        });
        Self { n, vertices }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Exact `W1(a, b)` for two weight vectors over the space's points.
    pub fn wasserstein1(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.n);
        debug_assert_eq!(b.len(), self.n);
        let mut best = 0.0f64;
        for f in &self.vertices {
            let mut s = 0.0;
            for ((fv, av), bv) in f.iter().zip(a).zip(b) {
                s += fv * (av - bv);
            }
            if s > best {
                best = s;
            }
        }
        best
    }

    /// True as soon as some vertex certifies `W1(a, b) > budget`.
    pub fn exceeds(&self, a: &[f64], b: &[f64], budget: f64) -> bool {
        for f in &self.vertices {
            let mut s = 0.0;
            for ((fv, av), bv) in f.iter().zip(a).zip(b) {
                s += fv * (av - bv);
            }
            if s > budget {
                return true;
            }
        }
        false
    }
}

fn enumerate_subsets(
    n_items: usize,
    k: usize,
    buf: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == k {
        f(buf);
        return;
    }
    for i in start..n_items {
        buf[depth] = i;
        enumerate_subsets(n_items, k, buf, depth + 1, i + 1, f);
    }
}

/// Number of weak compositions of `m` into `n` parts, `C(m + n - 1, n - 1)`,
/// or `None` on overflow.
pub fn composition_count(m: usize, n: usize) -> Option<u128> {
    if n == 0 {
        return Some(0);
    }
    let mut num: u128 = 1;
    for i in 0..(n - 1) {
        num = num.checked_mul((m + n - 1 - i) as u128)?;
        num /= (i + 1) as u128;
    }
    Some(num)
}

/// Visit every weak composition of `total` into `parts` nonnegative counts.
pub fn for_each_composition(total: u32, parts: usize, f: &mut impl FnMut(&[u32])) {
    assert!(parts >= 1);
    let mut buf = vec![0u32; parts];
    fn rec(left: u32, idx: usize, buf: &mut Vec<u32>, f: &mut impl FnMut(&[u32])) {
        if idx + 1 == buf.len() {
            buf[idx] = left;
            f(buf);
            return;
        }
        for v in 0..=left {
            buf[idx] = v;
            rec(left - v, idx + 1, buf, f);
        }
    }
    rec(total, 0, &mut buf, f);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_metric(points: &[f64]) -> Mat {
        let n = points.len();
        Mat::from_fn(n, n, |i, j| (points[i] - points[j]).abs())
    }

    /// Independent 1-D oracle: `W1 = integral of |CDF_a - CDF_b|` over
    /// points sorted by position.
    fn w1_line_oracle(points: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&x, &y| points[x].total_cmp(&points[y]));
        let mut acc = 0.0;
        let mut cdf_gap = 0.0;
        for w in order.windows(2) {
            cdf_gap += a[w[0]] - b[w[0]];
            acc += cdf_gap.abs() * (points[w[1]] - points[w[0]]);
        }
        acc
    }

    #[test]
    fn two_point_distance_is_the_moved_mass() {
        let dual = LipschitzDual::new(&line_metric(&[0.0, 1.0]));
        let w = dual.wasserstein1(&[1.0, 0.0], &[0.6, 0.4]);
        assert!((w - 0.4).abs() < 1e-12);
        assert!(dual.wasserstein1(&[0.3, 0.7], &[0.3, 0.7]) < 1e-12);
    }

    #[test]
    fn matches_the_line_oracle() {
        let pts = [0.0, 0.35, 1.1, 2.0];
        let dual = LipschitzDual::new(&line_metric(&pts));
        let cases = [
            ([0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]),
            ([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]),
            ([0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1]),
        ];
        for (a, b) in cases {
            let w = dual.wasserstein1(&a, &b);
            let oracle = w1_line_oracle(&pts, &a, &b);
            assert!(
                (w - oracle).abs() < 1e-9,
                "w = {w}, oracle = {oracle}"
            );
            // Symmetry.
            assert!((dual.wasserstein1(&b, &a) - w).abs() < 1e-9);
        }
    }

    #[test]
    fn triangle_inequality_on_random_distributions() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(5, &[1]);
        let pts: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let n = pts.len();
        let metric = Mat::from_fn(n, n, |i, j| {
            pts[i]
                .iter()
                .zip(&pts[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        });
        let dual = LipschitzDual::new(&metric);
        let mut simplex = || {
            let mut v: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        for _ in 0..30 {
            let a = simplex();
            let b = simplex();
            let c = simplex();
            let ab = dual.wasserstein1(&a, &b);
            let bc = dual.wasserstein1(&b, &c);
            let ac = dual.wasserstein1(&a, &c);
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn composition_counts() {
        assert_eq!(composition_count(100, 2), Some(101));
        assert_eq!(composition_count(3, 3), Some(10));
        let mut seen = 0usize;
        for_each_composition(3, 3, &mut |c| {
            assert_eq!(c.iter().sum::<u32>(), 3);
            seen += 1;
        });
        assert_eq!(seen, 10);
    }
}
