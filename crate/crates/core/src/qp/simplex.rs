//! Dense two-phase tableau simplex for small LPs with free variables.
//!
//! Solves `min c'x  s.t.  A x <= b` with `x` unrestricted in sign. Bland's
//! rule is used in both phases, so degenerate problems terminate.

use nalgebra::DMatrix;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const MAX_PIVOTS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl LpOutcome {
    pub fn optimal(self) -> Option<(Vec<f64>, f64)> {
        match self {
            LpOutcome::Optimal { x, value } => Some((x, value)),
            _ => None,
        }
    }
}

struct Tableau {
    width: usize,
    cells: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn rhs(&self, row: usize) -> f64 {
        self.cells[row * (self.width + 1) + self.width]
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.cells[row * (self.width + 1) + col]
    }

    fn row(&self, row: usize) -> &[f64] {
        let stride = self.width + 1;
        &self.cells[row * stride..(row + 1) * stride]
    }

    fn pivot(&mut self, objective: &mut [f64], r: usize, c: usize) {
        let stride = self.width + 1;
        let p = self.at(r, c);
        for v in &mut self.cells[r * stride..(r + 1) * stride] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.row(r).to_vec();
        for i in 0..self.basis.len() {
            if i == r {
                continue;
            }
            let f = self.at(i, c);
            if f != 0.0 {
                let row = &mut self.cells[i * stride..(i + 1) * stride];
                for (v, pr) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                row[c] = 0.0;
            }
        }
        let f = objective[c];
        if f != 0.0 {
            for (v, pr) in objective.iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            objective[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Reduced-cost row for `cost` under the current basis.
    fn objective_row(&self, cost: &[f64]) -> Vec<f64> {
        let mut obj = vec![0.0; self.width + 1];
        obj[..cost.len()].copy_from_slice(cost);
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = obj[b];
            if cb != 0.0 {
                for (v, t) in obj.iter_mut().zip(self.row(i)) {
                    *v -= cb * t;
                }
            }
        }
        obj
    }

    /// Runs Bland-rule pivots. Returns `Some(false)` when unbounded.
    fn run(&mut self, objective: &mut [f64], allowed: impl Fn(usize) -> bool) -> Option<bool> {
        for _ in 0..MAX_PIVOTS {
            let Some(enter) = (0..self.width).find(|&j| allowed(j) && objective[j] < -COST_TOL)
            else {
                return Some(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.basis.len() {
                let a = self.at(i, enter);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            let tie = (ratio - best).abs() <= 1e-12 * best.abs().max(1.0);
                            if ratio < best && !tie
                                || tie && self.basis[i] < self.basis[r]
                            {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return Some(false),
                Some((r, _)) => self.pivot(objective, r, enter),
            }
        }
        None
    }
}

/// Minimizes `c'x` subject to `a x <= b` with free `x`.
pub fn minimize(c: &[f64], a: &DMatrix<f64>, b: &[f64]) -> LpOutcome {
    let (m, n) = a.shape();
    assert_eq!(c.len(), n);
    assert_eq!(b.len(), m);

    // Columns: x+ (n), x- (n), slacks (m), artificials (one per negative rhs).
    let negative: Vec<usize> = (0..m).filter(|&i| b[i] < 0.0).collect();
    let n_art = negative.len();
    let art_start = 2 * n + m;
    let width = art_start + n_art;
    let stride = width + 1;
    let mut cells = vec![0.0; m * stride];
    let mut basis = vec![0; m];
    let mut art = 0;
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let row = &mut cells[i * stride..(i + 1) * stride];
        for j in 0..n {
            row[j] = sign * a[(i, j)];
            row[n + j] = -sign * a[(i, j)];
        }
        row[2 * n + i] = sign;
        row[width] = sign * b[i];
        if sign < 0.0 {
            row[art_start + art] = 1.0;
            basis[i] = art_start + art;
            art += 1;
        } else {
            basis[i] = 2 * n + i;
        }
    }
    let mut tab = Tableau {
        width,
        cells,
        basis,
    };

    if n_art > 0 {
        let mut phase1 = vec![0.0; width];
        for v in &mut phase1[art_start..] {
            *v = 1.0;
        }
        let mut obj = tab.objective_row(&phase1);
        if tab.run(&mut obj, |_| true).is_none() {
            return LpOutcome::IterationLimit;
        }
        let infeasibility = -obj[width];
        let scale = b.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        if infeasibility > 1e-9 * scale {
            return LpOutcome::Infeasible;
        }
        // Drive zero-level artificials out of the basis where possible.
        for r in 0..m {
            if tab.basis[r] >= art_start {
                if let Some(c) = (0..art_start).find(|&j| tab.at(r, j).abs() > 1e-9) {
                    let mut dummy = vec![0.0; stride];
                    tab.pivot(&mut dummy, r, c);
                }
            }
        }
    }

    let mut cost = vec![0.0; width];
    cost[..n].copy_from_slice(c);
    for j in 0..n {
        cost[n + j] = -c[j];
    }
    let mut obj = tab.objective_row(&cost);
    match tab.run(&mut obj, |j| j < art_start) {
        None => return LpOutcome::IterationLimit,
        Some(false) => return LpOutcome::Unbounded,
        Some(true) => {}
    }

    let mut x = vec![0.0; n];
    for (i, &bvar) in tab.basis.iter().enumerate() {
        let v = tab.rhs(i);
        if bvar < n {
            x[bvar] += v;
        } else if bvar < 2 * n {
            x[bvar - n] -= v;
        }
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { x, value }
}
