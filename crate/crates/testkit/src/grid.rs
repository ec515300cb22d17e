//! Brute-force search oracles for box-constrained quadratic programs.
//!
//! All arithmetic is done here on plain slices, straight from the matrix
//! entries, so the oracle shares no code with the solvers it checks.

/// Evaluates `q' R q - b' q + extra' q` on a full-length setpoint vector.
fn objective(rmat: &[Vec<f64>], b: &[f64], extra: &[f64], q: &[f64]) -> f64 {
    let n = q.len();
    let mut quad = 0.0;
    for i in 0..n {
        if q[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += q[i] * rmat[i][j] * q[j];
        }
    }
    let lin: f64 = (0..n).map(|i| (extra[i] - b[i]) * q[i]).sum();
    quad + lin
}

/// Checks the voltage band `v_lo <= X q + y <= v_hi` elementwise.
fn feasible(xmat: &[Vec<f64>], y: &[f64], v_lo: &[f64], v_hi: &[f64], q: &[f64]) -> bool {
    let n = q.len();
    for i in 0..n {
        let mut v = y[i];
        for j in 0..n {
            v += xmat[i][j] * q[j];
        }
        if v > v_hi[i] || v < v_lo[i] {
            return false;
        }
    }
    true
}

/// Enumerates `q` over a regular grid of spacing `step` on the box
/// `|q_i| <= qbar_i` for the listed free coordinates (all other entries are
/// held at zero) and returns the minimizer of
/// `q' R q - b' q + extra' q`. `extra` carries any fixed linear term, e.g.
/// `X' (lambda_up - lambda_lo)` when checking a Lagrangian subproblem.
pub fn grid_search_quadratic(
    rmat: &[Vec<f64>],
    b: &[f64],
    extra: &[f64],
    free: &[(usize, f64)],
    step: f64,
) -> (Vec<f64>, f64) {
    let n = b.len();
    let mut best_q = vec![0.0; n];
    let mut best_f = f64::INFINITY;
    enumerate(free, step, &mut vec![0.0; n], 0, &mut |q| {
        let f = objective(rmat, b, extra, q);
        if f < best_f {
            best_f = f;
            best_q = q.to_vec();
        }
    });
    (best_q, best_f)
}

/// Same enumeration but restricted to grid points satisfying the voltage
/// band. Returns `None` when no grid point is feasible.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_constrained(
    rmat: &[Vec<f64>],
    b: &[f64],
    xmat: &[Vec<f64>],
    y: &[f64],
    v_lo: &[f64],
    v_hi: &[f64],
    free: &[(usize, f64)],
    step: f64,
) -> Option<(Vec<f64>, f64)> {
    let n = b.len();
    let zero_extra = vec![0.0; n];
    let mut best: Option<(Vec<f64>, f64)> = None;
    enumerate(free, step, &mut vec![0.0; n], 0, &mut |q| {
        if !feasible(xmat, y, v_lo, v_hi, q) {
            return;
        }
        let f = objective(rmat, b, &zero_extra, q);
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((q.to_vec(), f));
        }
    });
    best
}

fn enumerate(
    free: &[(usize, f64)],
    step: f64,
    q: &mut Vec<f64>,
    depth: usize,
    visit: &mut dyn FnMut(&[f64]),
) {
    if depth == free.len() {
        visit(q);
        return;
    }
    let (idx, qbar) = free[depth];
    let steps = (2.0 * qbar / step).round() as usize;
    for k in 0..=steps {
        q[idx] = (-qbar + k as f64 * step).min(qbar);
        enumerate(free, step, q, depth + 1, visit);
    }
    q[idx] = 0.0;
}
