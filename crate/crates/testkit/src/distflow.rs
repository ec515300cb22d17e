//! Exact single-phase DistFlow solver for radial feeders.
//!
//! Solves the full nonlinear branch-flow equations by backward/forward
//! sweeps and reports *squared* voltage magnitudes. Finite differences of
//! this solve at the flat point are the reference against which linearized
//! sensitivity matrices are checked.

/// A radial network rooted at bus 0, parsed from an undirected line list.
///
/// `bus_count` excludes the substation; buses are `1..=bus_count`.
pub struct RadialNetwork {
    bus_count: usize,
    /// Parent bus of bus `n` (index `n - 1`).
    parent: Vec<usize>,
    /// Impedance of the line feeding bus `n` (index `n - 1`).
    r: Vec<f64>,
    x: Vec<f64>,
    /// Buses in breadth-first order from the root.
    order: Vec<usize>,
}

impl RadialNetwork {
    /// Builds the network from `(from, to, r_pu, x_pu)` lines. Panics on
    /// malformed input; this is test scaffolding, not production code.
    pub fn new(bus_count: usize, lines: &[(usize, usize, f64, f64)]) -> Self {
        assert_eq!(lines.len(), bus_count, "a radial feeder has one line per bus");
        let mut adj: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); bus_count + 1];
        for &(a, b, r, x) in lines {
            assert!(a <= bus_count && b <= bus_count, "line endpoint out of range");
            adj[a].push((b, r, x));
            adj[b].push((a, r, x));
        }
        let mut parent = vec![usize::MAX; bus_count];
        let mut r = vec![0.0; bus_count];
        let mut x = vec![0.0; bus_count];
        let mut order = Vec::with_capacity(bus_count);
        let mut seen = vec![false; bus_count + 1];
        seen[0] = true;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            for &(j, rj, xj) in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    parent[j - 1] = i;
                    r[j - 1] = rj;
                    x[j - 1] = xj;
                    order.push(j);
                    queue.push_back(j);
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "disconnected bus in oracle network");
        Self { bus_count, parent, r, x, order }
    }

    /// Solves the nonlinear DistFlow equations for net injections `p`, `q`
    /// (length `bus_count`, generation positive) and substation voltage
    /// `v0`. Returns squared voltage magnitudes at buses `1..=bus_count`.
    pub fn solve_squared_voltages(&self, p: &[f64], q: &[f64], v0: f64) -> Vec<f64> {
        let n = self.bus_count;
        assert_eq!(p.len(), n);
        assert_eq!(q.len(), n);
        let mut u = vec![v0 * v0; n + 1]; // index by bus id, u[0] fixed
        let mut ell = vec![0.0; n]; // squared current on the line feeding bus n+1
        let mut pf = vec![0.0; n]; // sending-end active flow into bus n+1
        let mut qf = vec![0.0; n];
        for _ in 0..200 {
            // Backward sweep: aggregate flows from the leaves up.
            let mut next_pf = vec![0.0; n];
            let mut next_qf = vec![0.0; n];
            for &bus in self.order.iter().rev() {
                let k = bus - 1;
                let mut psum = -p[k] + self.r[k] * ell[k];
                let mut qsum = -q[k] + self.x[k] * ell[k];
                for &child in &self.order {
                    if self.parent[child - 1] == bus {
                        psum += next_pf[child - 1];
                        qsum += next_qf[child - 1];
                    }
                }
                next_pf[k] = psum;
                next_qf[k] = qsum;
            }
            pf = next_pf;
            qf = next_qf;
            // Forward sweep: propagate squared voltages from the root down.
            let mut max_delta = 0.0f64;
            for &bus in &self.order {
                let k = bus - 1;
                let up = u[self.parent[k]];
                let new_u = up - 2.0 * (self.r[k] * pf[k] + self.x[k] * qf[k])
                    + (self.r[k] * self.r[k] + self.x[k] * self.x[k]) * ell[k];
                max_delta = max_delta.max((new_u - u[bus]).abs());
                u[bus] = new_u;
            }
            // Refresh squared currents from the sending-end voltage.
            for &bus in &self.order {
                let k = bus - 1;
                ell[k] = (pf[k] * pf[k] + qf[k] * qf[k]) / u[self.parent[k]];
            }
            if max_delta < 1e-14 {
                break;
            }
        }
        u[1..].to_vec()
    }
}

/// Central finite differences of the squared-voltage DistFlow solve at the
/// flat point (zero injections). Returns `(d u / d p, d u / d q)` as dense
/// row-major matrices; these approximate the linearized sensitivity
/// matrices.
pub fn sensitivity_jacobians(
    net: &RadialNetwork,
    v0: f64,
    h: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = net.bus_count;
    let mut jr = vec![vec![0.0; n]; n];
    let mut jx = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut p = vec![0.0; n];
        let q = vec![0.0; n];
        p[col] = h;
        let up = net.solve_squared_voltages(&p, &q, v0);
        p[col] = -h;
        let um = net.solve_squared_voltages(&p, &q, v0);
        for row in 0..n {
            jr[row][col] = (up[row] - um[row]) / (2.0 * h);
        }
        let p = vec![0.0; n];
        let mut q = vec![0.0; n];
        q[col] = h;
        let up = net.solve_squared_voltages(&p, &q, v0);
        q[col] = -h;
        let um = net.solve_squared_voltages(&p, &q, v0);
        for row in 0..n {
            jx[row][col] = (up[row] - um[row]) / (2.0 * h);
        }
    }
    (jr, jx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_point_has_flat_voltage() {
        let net = RadialNetwork::new(2, &[(0, 1, 0.1, 0.2), (1, 2, 0.05, 0.1)]);
        let u = net.solve_squared_voltages(&[0.0, 0.0], &[0.0, 0.0], 1.0);
        assert!((u[0] - 1.0).abs() < 1e-15);
        assert!((u[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_line_jacobian_matches_hand_value() {
        // One line 0->1 with r=0.03: du/dp at the flat point is 2r = 0.06.
        let net = RadialNetwork::new(1, &[(0, 1, 0.03, 0.04)]);
        let (jr, jx) = sensitivity_jacobians(&net, 1.0, 1e-5);
        assert!((jr[0][0] - 0.06).abs() < 1e-9, "got {}", jr[0][0]);
        assert!((jx[0][0] - 0.08).abs() < 1e-9, "got {}", jx[0][0]);
    }

    #[test]
    fn load_drops_voltage_nonlinearly() {
        // A real load (negative injection) must drop the voltage a bit more
        // than the linear term because of line losses.
        let net = RadialNetwork::new(1, &[(0, 1, 0.05, 0.05)]);
        let u = net.solve_squared_voltages(&[-0.5], &[0.0], 1.0);
        assert!(u[0] < 1.0 - 2.0 * 0.05 * 0.5 + 1e-12);
    }
}
