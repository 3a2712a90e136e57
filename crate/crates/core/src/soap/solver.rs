//! Tile-size optimization in logarithmic variables.
//!
//! Maximize `sum_d y_d` subject to `log sum_a exp(sum_{d in a} y_d) <= log X`
//! and `0 <= y_d <= log N_d`, where `t_d = exp(y_d)`. The problem is a
//! geometric program, hence concave in `y`, and is solved with a log-barrier
//! Newton method.

use nalgebra::{DMatrix, DVector};

/// Gap at which the barrier method hands over to the KKT polish.
const GAP: f64 = 1e-8;
/// Distance from a bound below which a variable is treated as fixed there.
const ACTIVE: f64 = 1e-5;
const NEWTON_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SolveError {
    /// The budget cannot hold one element of every access array.
    Infeasible { budget: f64, arrays: usize },
}

struct Problem {
    /// access arrays as lists of free-variable positions
    arrays: Vec<Vec<usize>>,
    upper: Vec<f64>,
    log_budget: f64,
}

impl Problem {
    fn n(&self) -> usize {
        self.upper.len()
    }

    /// (g, softmax weights)
    fn lse(&self, y: &DVector<f64>) -> (f64, Vec<f64>) {
        let z: Vec<f64> = self
            .arrays
            .iter()
            .map(|a| a.iter().map(|&d| y[d]).sum::<f64>())
            .collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let g = zmax + s.ln();
        let w = z.iter().map(|v| (v - g).exp()).collect();
        (g, w)
    }

    fn interior(&self, y: &DVector<f64>) -> bool {
        (0..self.n()).all(|d| y[d] > 0.0 && y[d] < self.upper[d]) && self.lse(y).0 < self.log_budget
    }

    fn barrier(&self, t: f64, y: &DVector<f64>) -> f64 {
        let (g, _) = self.lse(y);
        let mut v = t * y.sum() + (self.log_budget - g).ln();
        for d in 0..self.n() {
            v += y[d].ln();
            if self.upper[d].is_finite() {
                v += (self.upper[d] - y[d]).ln();
            }
        }
        v
    }

    /// Gradient and negated Hessian of the barrier objective.
    fn derivatives(&self, t: f64, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n();
        let slack = self.log_budget - self.lse(y).0;
        let (hess_g, grad_g) = self.gradient_hessian(y);
        let mut grad = DVector::from_element(n, t) - &grad_g / slack;
        let mut neg_h = &hess_g / slack + (&grad_g * grad_g.transpose()) / (slack * slack);
        for d in 0..n {
            grad[d] += 1.0 / y[d];
            neg_h[(d, d)] += 1.0 / (y[d] * y[d]);
            if self.upper[d].is_finite() {
                let u = self.upper[d] - y[d];
                grad[d] -= 1.0 / u;
                neg_h[(d, d)] += 1.0 / (u * u);
            }
        }
        (grad, neg_h)
    }

    fn constraint_count(&self) -> usize {
        1 + self.n() + self.upper.iter().filter(|u| u.is_finite()).count()
    }

    fn solve(&self) -> DVector<f64> {
        let n = self.n();
        let max_len = self.arrays.iter().map(Vec::len).max().unwrap_or(1).max(1) as f64;
        // strictly feasible start: sum_a exp(c |a|) <= m sqrt(X/m) < X
        let m = self.arrays.len() as f64;
        let mut c = (self.log_budget - m.ln()) / (2.0 * max_len);
        for &u in &self.upper {
            c = c.min(u / 2.0);
        }
        let mut y = DVector::from_element(n, c.max(1e-12));
        debug_assert!(self.interior(&y));

        let mut t = 1.0;
        let k = self.constraint_count() as f64;
        loop {
            for _ in 0..MAX_NEWTON {
                let (grad, neg_h) = self.derivatives(t, &y);
                let step = match neg_h.clone().cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => match neg_h.lu().solve(&grad) {
                        Some(s) => s,
                        None => break,
                    },
                };
                let decrement = grad.dot(&step);
                // objective error of the centering step is about decrement / (2 t)
                if decrement < NEWTON_TOL {
                    break;
                }
                let f0 = self.barrier(t, &y);
                let mut alpha = 1.0;
                let mut moved = false;
                while alpha > 1e-16 {
                    let cand = &y + &step * alpha;
                    if self.interior(&cand)
                        && self.barrier(t, &cand) >= f0 + 0.25 * alpha * decrement
                    {
                        y = cand;
                        moved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            if k / t < GAP {
                break;
            }
            t *= 10.0;
        }
        self.polish(&y).unwrap_or(y)
    }

    /// Newton's method on the KKT system of the active budget constraint,
    /// with variables near a bound held there. Returns `None` when the
    /// result is not an acceptable optimum.
    fn polish(&self, y0: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.n();
        let free: Vec<usize> = (0..n)
            .filter(|&d| y0[d] > ACTIVE && y0[d] < self.upper[d] - ACTIVE)
            .collect();
        if free.is_empty() {
            return None;
        }
        let mut y = y0.clone();
        for d in 0..n {
            if !free.contains(&d) {
                y[d] = if y0[d] <= ACTIVE { 0.0 } else { self.upper[d] };
            }
        }
        let f = free.len();
        let (_, grad) = self.gradient_hessian(&y);
        let gf: f64 = free.iter().map(|&d| grad[d] * grad[d]).sum();
        let mut nu = free.iter().map(|&d| grad[d]).sum::<f64>() / gf;
        for _ in 0..50 {
            let (hess, grad) = self.gradient_hessian(&y);
            let (g, _) = self.lse(&y);
            let mut jac = DMatrix::zeros(f + 1, f + 1);
            let mut rhs = DVector::zeros(f + 1);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    jac[(a, b)] = nu * hess[(i, j)];
                }
                jac[(a, f)] = grad[i];
                jac[(f, a)] = grad[i];
                rhs[a] = 1.0 - nu * grad[i];
            }
            rhs[f] = self.log_budget - g;
            let step = jac.lu().solve(&rhs)?;
            for (a, &i) in free.iter().enumerate() {
                y[i] += step[a];
            }
            nu -= step[f];
            if step.amax() < 1e-15 {
                break;
            }
        }
        let (g, _) = self.lse(&y);
        let objective = |v: &DVector<f64>| v.sum();
        let ok = nu > 0.0
            && g <= self.log_budget + 1e-14
            && free.iter().all(|&d| y[d] >= 0.0 && y[d] <= self.upper[d])
            && objective(&y) >= objective(y0) - 1e-12;
        ok.then_some(y)
    }

    /// Hessian and gradient of the log-sum-exp constraint.
    fn gradient_hessian(&self, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n();
        let (_, w) = self.lse(y);
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for (a, &wa) in self.arrays.iter().zip(&w) {
            for &i in a {
                grad[i] += wa;
                for &j in a {
                    hess[(i, j)] += wa;
                }
            }
        }
        hess -= &grad * grad.transpose();
        (hess, grad)
    }
}

/// Optimal continuous tiles for `arrays` (each a list of variable indices)
/// under element budget `budget`, with `1 <= t_d <= extents[d]`.
pub(crate) fn max_tiles(
    arrays: &[Vec<usize>],
    extents: &[f64],
    budget: f64,
) -> Result<Vec<f64>, SolveError> {
    let m = arrays.len();
    if budget.is_nan() || budget < m as f64 {
        return Err(SolveError::Infeasible { budget, arrays: m });
    }
    let nvars = extents.len();
    let used: Vec<bool> = (0..nvars)
        .map(|d| arrays.iter().any(|a| a.contains(&d)))
        .collect();

    // all upper bounds fit
    let full: f64 = arrays
        .iter()
        .map(|a| a.iter().map(|&d| extents[d]).product::<f64>())
        .sum();
    if full <= budget {
        return Ok(extents.to_vec());
    }
    let mut tiles = vec![1.0; nvars];
    for d in 0..nvars {
        if !used[d] {
            tiles[d] = extents[d];
        }
    }
    if budget <= m as f64 * (1.0 + 1e-12) {
        return Ok(tiles);
    }

    let free: Vec<usize> = (0..nvars)
        .filter(|&d| used[d] && extents[d] > 1.0)
        .collect();
    if free.is_empty() {
        return Ok(tiles);
    }
    let pos = |d: usize| free.iter().position(|&f| f == d);
    let problem = Problem {
        arrays: arrays
            .iter()
            .map(|a| a.iter().filter_map(|&d| pos(d)).collect())
            .collect(),
        upper: free.iter().map(|&d| extents[d].ln()).collect(),
        log_budget: budget.ln(),
    };
    let y = problem.solve();
    for (k, &d) in free.iter().enumerate() {
        tiles[d] = y[k].exp().clamp(1.0, extents[d]);
    }
    Ok(tiles)
}
