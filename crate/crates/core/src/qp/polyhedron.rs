//! Halfspace polyhedra `{z : G z <= w}`: feasibility, Chebyshev balls and
//! redundancy removal.

use nalgebra::{DMatrix, DVector};

use super::simplex::{minimize, LpOutcome};

/// Radius cap for the Chebyshev LP, which keeps it bounded on unbounded
/// polyhedra.
const RADIUS_CAP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    /// `radius` is the Chebyshev radius (capped at 1); zero for a
    /// nonempty polyhedron without interior.
    Feasible { witness: DVector<f64>, radius: f64 },
    Infeasible,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

/// Largest inscribed ball, or `Infeasible`.
pub fn lp_feasible(g: &DMatrix<f64>, w: &DVector<f64>, tol: f64) -> Feasibility {
    chebyshev_ball(g, w, None, tol)
}

/// Chebyshev ball, optionally restricted to the hyperplane of row `on_facet`.
pub fn chebyshev_ball(
    g: &DMatrix<f64>,
    w: &DVector<f64>,
    on_facet: Option<usize>,
    tol: f64,
) -> Feasibility {
    let (m, n) = g.shape();
    let extra = if on_facet.is_some() { 2 } else { 1 };
    let mut a = DMatrix::zeros(m + extra, n + 1);
    let mut b = Vec::with_capacity(m + extra);
    for i in 0..m {
        let row = g.row(i);
        let norm = row.norm();
        if Some(i) == on_facet {
            // Equality as two inequalities; the ball lives in the hyperplane.
            a.view_mut((i, 0), (1, n)).copy_from(&row);
            b.push(w[i]);
            continue;
        }
        a.view_mut((i, 0), (1, n)).copy_from(&row);
        a[(i, n)] = norm;
        b.push(w[i]);
    }
    a[(m, n)] = 1.0;
    b.push(RADIUS_CAP);
    if let Some(f) = on_facet {
        let row = -g.row(f);
        a.view_mut((m + 1, 0), (1, n)).copy_from(&row);
        b.push(-w[f]);
    }
    let mut c = vec![0.0; n + 1];
    c[n] = -1.0;
    match minimize(&c, &a, &b) {
        LpOutcome::Optimal { x, .. } => {
            let radius = x[n];
            if radius < -tol {
                Feasibility::Infeasible
            } else {
                Feasibility::Feasible {
                    witness: DVector::from_column_slice(&x[..n]),
                    radius: radius.max(0.0),
                }
            }
        }
        _ => Feasibility::Infeasible,
    }
}

/// Irredundant subset of the rows of `{z : g z <= w}`.
///
/// Rows are scanned in order; row `i` is dropped when maximizing `g_i z`
/// over the rows still kept (excluding `i`) cannot exceed `w_i + tol`. For
/// duplicated rows the last copy survives.
pub fn remove_redundant(
    g: &DMatrix<f64>,
    w: &DVector<f64>,
    tol: f64,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let (m, n) = g.shape();
    let mut keep: Vec<bool> = (0..m).map(|i| g.row(i).norm() > tol || w[i] < -tol).collect();
    for i in 0..m {
        if !keep[i] {
            continue;
        }
        let others: Vec<usize> = (0..m).filter(|&j| j != i && keep[j]).collect();
        // Bound the probe direction so the LP stays bounded.
        let mut a = DMatrix::zeros(others.len() + 1, n);
        let mut b = Vec::with_capacity(others.len() + 1);
        for (r, &j) in others.iter().enumerate() {
            a.set_row(r, &g.row(j));
            b.push(w[j]);
        }
        a.set_row(others.len(), &g.row(i));
        b.push(w[i] + 1.0);
        let c: Vec<f64> = g.row(i).iter().map(|v| -v).collect();
        let redundant = match minimize(&c, &a, &b) {
            LpOutcome::Optimal { value, .. } => -value <= w[i] + tol,
            // Empty without row i: every row is redundant, keep i as witness.
            LpOutcome::Infeasible => false,
            _ => false,
        };
        if redundant {
            keep[i] = false;
        }
    }
    let kept: Vec<usize> = (0..m).filter(|&i| keep[i]).collect();
    let g_red = DMatrix::from_fn(kept.len(), n, |r, c| g[(kept[r], c)]);
    let w_red = DVector::from_iterator(kept.len(), kept.iter().map(|&i| w[i]));
    (g_red, w_red, kept)
}

/// Scales each row to unit Euclidean norm. Zero rows are left unchanged.
pub fn normalize_rows(g: &mut DMatrix<f64>, w: &mut DVector<f64>) {
    for i in 0..g.nrows() {
        let norm = g.row(i).norm();
        if norm > 0.0 {
            g.row_mut(i).scale_mut(1.0 / norm);
            w[i] /= norm;
        }
    }
}

pub fn contains(g: &DMatrix<f64>, w: &DVector<f64>, z: &DVector<f64>, tol: f64) -> bool {
    (0..g.nrows()).all(|i| g.row(i).dot(&z.transpose()) <= w[i] + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poly(rows: &[[f64; 2]], rhs: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        (
            DMatrix::from_row_slice(rows.len(), 2, &flat),
            DVector::from_column_slice(rhs),
        )
    }

    #[test]
    fn interval_witness() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        match lp_feasible(&g, &DVector::from_vec(vec![1.0, 0.0]), 1e-9) {
            Feasibility::Feasible { witness, radius } => {
                assert_abs_diff_eq!(witness[0], 0.5, epsilon = 1e-12);
                assert_abs_diff_eq!(radius, 0.5, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let infeasible = lp_feasible(&g, &DVector::from_vec(vec![0.0, -1.0]), 1e-9);
        assert_eq!(infeasible, Feasibility::Infeasible);
    }

    #[test]
    fn redundant_bound_dropped() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let (g2, w2, kept) = remove_redundant(&g, &DVector::from_vec(vec![1.0, 2.0]), 1e-9);
        assert_eq!(kept, vec![0]);
        assert_eq!(g2.nrows(), 1);
        assert_eq!(w2[0], 1.0);
    }

    #[test]
    fn duplicated_square_face() {
        let (g, w) = poly(
            &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]],
            &[1.0, 1.0, 0.0, 0.0, 1.0],
        );
        let (_, _, kept) = remove_redundant(&g, &w, 1e-9);
        assert_eq!(kept.len(), 4);
        assert_eq!(kept, vec![1, 2, 3, 4]);
    }

    #[test]
    fn facet_ball_lies_on_facet() {
        let (g, w) = poly(
            &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
            &[1.0, 1.0, 0.0, 0.0],
        );
        match chebyshev_ball(&g, &w, Some(0), 1e-9) {
            Feasibility::Feasible { witness, radius } => {
                assert_abs_diff_eq!(witness[0], 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(witness[1], 0.5, epsilon = 1e-12);
                assert_abs_diff_eq!(radius, 0.5, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    /// Vertices of a 2-D polygon by enumerating pairwise intersections.
    fn vertices(g: &DMatrix<f64>, w: &DVector<f64>) -> Vec<[f64; 2]> {
        let mut out = vec![];
        for i in 0..g.nrows() {
            for j in i + 1..g.nrows() {
                let det = g[(i, 0)] * g[(j, 1)] - g[(i, 1)] * g[(j, 0)];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (w[i] * g[(j, 1)] - g[(i, 1)] * w[j]) / det;
                let y = (g[(i, 0)] * w[j] - w[i] * g[(j, 0)]) / det;
                let p = DVector::from_vec(vec![x, y]);
                if contains(g, w, &p, 1e-9) {
                    out.push([x, y]);
                }
            }
        }
        out
    }

    fn random_polygon(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
        let m = rng.random_range(3..9);
        let mut rows = vec![];
        let mut rhs = vec![];
        for _ in 0..m {
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            rows.push([t.cos(), t.sin()]);
            rhs.push(rng.random_range(-0.5..1.0));
        }
        // Bounding box keeps the vertex oracle finite.
        for r in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
            rows.push(r);
            rhs.push(3.0);
        }
        poly(&rows, &rhs)
    }

    #[test]
    fn feasibility_agrees_with_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let (g, w) = random_polygon(&mut rng);
            let has_vertices = !vertices(&g, &w).is_empty();
            let feas = lp_feasible(&g, &w, 1e-9);
            assert_eq!(feas.is_feasible(), has_vertices);
            if let Feasibility::Feasible { witness, radius } = feas {
                assert!(contains(&g, &w, &witness, 1e-9));
                for i in 0..g.nrows() {
                    let slack = w[i] - g.row(i).dot(&witness.transpose());
                    assert!(slack >= radius - 1e-9);
                }
            }
        }
    }

    #[test]
    fn reduction_preserves_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 20 {
            let (g, w) = random_polygon(&mut rng);
            if !lp_feasible(&g, &w, 1e-9).is_feasible() {
                continue;
            }
            checked += 1;
            let (g2, w2, _) = remove_redundant(&g, &w, 1e-9);
            for _ in 0..500 {
                let p = DVector::from_vec(vec![
                    rng.random_range(-3.5..3.5),
                    rng.random_range(-3.5..3.5),
                ]);
                let a = contains(&g, &w, &p, 0.0);
                let b = contains(&g2, &w2, &p, 0.0);
                let margin = (0..g.nrows())
                    .map(|i| (w[i] - g.row(i).dot(&p.transpose())).abs())
                    .fold(f64::INFINITY, f64::min);
                if margin > 1e-9 {
                    assert_eq!(a, b);
                }
            }
        }
    }
}
