//! Server-selection policies: the myopic threshold, switching curves and
//! finite-state controllers.
//!
//! A finite-state controller keeps a cell index `psi_j` in `1..=M` per server
//! instead of a continuous belief. Cell `i` stands for belief `(i-1)/M` when
//! the belief operators are discretised, and a continuous belief `w` maps to
//! cell `ceil(M w)` (cell 1 for `w = 0`).

use serde::{Deserialize, Serialize};

use crate::belief::{tau_f, tau_n, tau_s, BeliefPair};
use crate::error::{Error, Result};
use crate::model::{ServerId, ServerParams, SystemConfig};

/// Default irreducibility smoothing for controller matrices.
pub const DEFAULT_EPSILON: f64 = 0.001;

#[cfg(test)]
const STOCHASTIC_TOL: f64 = 1e-12;
const THRESHOLD_TOL: f64 = 1e-12;

/// Choose the server with the larger immediate success probability.
///
/// Server 2 is chosen iff `omega2 >= slope * omega1 + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MyopicPolicy {
    pub slope: f64,
    pub intercept: f64,
}

impl MyopicPolicy {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        let (a, b) = (&config.server1, &config.server2);
        let spread2 = b.mu1 - b.mu0;
        if spread2 <= 0.0 {
            return Err(Error::Domain("myopic threshold needs mu1(2) > mu0(2)".to_string()));
        }
        Ok(Self { slope: (a.mu1 - a.mu0) / spread2, intercept: (a.mu0 - b.mu0) / spread2 })
    }

    /// Smallest `omega2` at which server 2 is chosen.
    pub fn threshold(&self, omega1: f64) -> f64 {
        self.slope * omega1 + self.intercept
    }

    pub fn choose(&self, beliefs: BeliefPair) -> ServerId {
        if beliefs.omega2 >= self.threshold(beliefs.omega1) {
            ServerId::Two
        } else {
            ServerId::One
        }
    }
}

pub fn myopic_choice(beliefs: BeliefPair, config: &SystemConfig) -> Result<ServerId> {
    Ok(MyopicPolicy::new(config)?.choose(beliefs))
}

/// Continuous belief to controller cell, `ceil(M w)` clamped to `1..=M`.
pub fn belief_to_cell(omega: f64, m: usize) -> usize {
    ((omega * m as f64).ceil() as usize).clamp(1, m)
}

/// Belief represented by controller cell `i` when operators are discretised.
pub fn cell_to_belief(i: usize, m: usize) -> f64 {
    (i - 1) as f64 / m as f64
}

/// Boundary `omega2*(omega1)` between the two action regions.
///
/// `thresholds[k]` is the smallest `omega2` at which server 2 is chosen in
/// column `columns[k]`, or `None` if server 1 is chosen for every `omega2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingCurve {
    columns: Vec<f64>,
    thresholds: Vec<Option<f64>>,
    /// Probability of choosing server 2 exactly on the curve.
    tie: f64,
}

impl SwitchingCurve {
    pub fn new(columns: Vec<f64>, thresholds: Vec<Option<f64>>, tie: f64) -> Result<Self> {
        if columns.is_empty() || columns.len() != thresholds.len() {
            return Err(Error::Dimension(format!("{} columns but {} thresholds", columns.len(), thresholds.len())));
        }
        if columns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("curve columns must be increasing".to_string()));
        }
        if !(0.0..=1.0).contains(&tie) {
            return Err(Error::Domain(format!("tie value {tie} is outside [0, 1]")));
        }
        Ok(Self { columns, thresholds, tie })
    }

    /// The myopic line sampled on the controller lattice of size `m`, with
    /// thresholds snapped up to the next cell.
    pub fn myopic(config: &SystemConfig, m: usize) -> Result<Self> {
        let policy = MyopicPolicy::new(config)?;
        let columns: Vec<f64> = (1..=m).map(|i| cell_to_belief(i, m)).collect();
        let thresholds = columns
            .iter()
            .map(|&w1| {
                let line = policy.threshold(w1);
                (1..=m).map(|j| cell_to_belief(j, m)).find(|&w2| w2 >= line)
            })
            .collect();
        let tie = if config.identical_servers() { 0.5 } else { 1.0 };
        Self::new(columns, thresholds, tie)
    }

    pub fn resolution(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[f64] {
        &self.columns
    }

    pub fn thresholds(&self) -> &[Option<f64>] {
        &self.thresholds
    }

    pub fn tie(&self) -> f64 {
        self.tie
    }

    fn nearest_column(&self, omega1: f64) -> usize {
        let k = self.columns.partition_point(|&c| c < omega1);
        if k == 0 {
            return 0;
        }
        if k == self.columns.len() {
            return k - 1;
        }
        if omega1 - self.columns[k - 1] <= self.columns[k] - omega1 {
            k - 1
        } else {
            k
        }
    }

    /// Threshold of the column nearest to `omega1`.
    pub fn threshold_at(&self, omega1: f64) -> Option<f64> {
        self.thresholds[self.nearest_column(omega1)]
    }

    /// Deterministic decision: server 2 on or above the curve.
    pub fn choose(&self, beliefs: BeliefPair) -> ServerId {
        match self.threshold_at(beliefs.omega1) {
            Some(t) if beliefs.omega2 >= t - THRESHOLD_TOL => ServerId::Two,
            _ => ServerId::One,
        }
    }

    /// Columns whose threshold is lower than that of the previous column.
    pub fn monotonicity_violations(&self) -> Vec<usize> {
        let key = |t: Option<f64>| t.unwrap_or(f64::INFINITY);
        (1..self.thresholds.len())
            .filter(|&k| key(self.thresholds[k]) < key(self.thresholds[k - 1]) - THRESHOLD_TOL)
            .collect()
    }

    /// Re-samples the curve on the controller lattice of size `m`.
    pub fn resample(&self, m: usize) -> Result<Self> {
        let columns: Vec<f64> = (1..=m).map(|i| cell_to_belief(i, m)).collect();
        let thresholds = columns
            .iter()
            .map(|&w1| {
                self.threshold_at(w1)
                    .and_then(|t| (1..=m).map(|j| cell_to_belief(j, m)).find(|&w2| w2 >= t - THRESHOLD_TOL))
            })
            .collect();
        Self::new(columns, thresholds, self.tie)
    }
}

/// Symmetric myopic control matrix: 1 above the diagonal, 0.5 on it, 0 below.
pub fn myopic_control_matrix(m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        c[i * m + i] = 0.5;
        for j in i + 1..m {
            c[i * m + j] = 1.0;
        }
    }
    c
}

/// Control matrix of a curve whose columns are the `m` controller cells.
pub fn curve_control_matrix(curve: &SwitchingCurve, m: usize) -> Result<Vec<f64>> {
    if curve.resolution() != m {
        return Err(Error::Dimension(format!(
            "curve has {} columns but the controller has M = {m}",
            curve.resolution()
        )));
    }
    let mut c = vec![0.0; m * m];
    for (i, t) in curve.thresholds.iter().enumerate() {
        let Some(t) = *t else { continue };
        for j in 0..m {
            let w2 = cell_to_belief(j + 1, m);
            c[i * m + j] = if (w2 - t).abs() <= THRESHOLD_TOL {
                curve.tie
            } else if w2 > t {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(c)
}

/// Row-stochastic `M x M` matrix stored as a sparse part plus a constant
/// added to every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerMatrix {
    m: usize,
    rows: Vec<Vec<(usize, f64)>>,
    floor: f64,
}

impl ControllerMatrix {
    /// One-hot rows at `columns` (0-based) after adding `epsilon / M` to every
    /// entry and renormalising.
    pub fn smoothed_placement(columns: &[usize], epsilon: f64) -> Self {
        let m = columns.len();
        let scale = 1.0 / (1.0 + epsilon);
        Self { m, rows: columns.iter().map(|&j| vec![(j, scale)]).collect(), floor: epsilon / m as f64 * scale }
    }

    /// Accepts any nonnegative row-stochastic matrix; the smallest entry
    /// becomes the floor.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("controller matrices must be square and nonempty".into()));
        }
        let mut floor = f64::INFINITY;
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Domain(format!("row {} has a negative or NaN entry", i + 1)));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("row {} sums to {sum}, not 1", i + 1)));
            }
            floor = floor.min(r.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        let sparse = rows
            .iter()
            .map(|r| r.iter().enumerate().filter_map(|(j, &x)| (x - floor > 0.0).then_some((j, x - floor))).collect())
            .collect();
        Ok(Self { m, rows: sparse, floor })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn sparse_row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Entry at 0-based `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.floor + self.rows[i].iter().filter(|(c, _)| *c == j).map(|(_, v)| v).sum::<f64>()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.m)
            .map(|i| {
                let mut row = vec![self.floor; self.m];
                for &(j, v) in &self.rows[i] {
                    row[j] += v;
                }
                row
            })
            .collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|(_, v)| v).sum::<f64>() + self.floor * self.m as f64
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ControllerMatrix, b: f64) -> ControllerMatrix {
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(r1, r2)| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(r1.len() + r2.len());
                for (j, v) in r1.iter().map(|&(j, v)| (j, a * v)).chain(r2.iter().map(|&(j, v)| (j, b * v))) {
                    match row.iter_mut().find(|(c, _)| *c == j) {
                        Some(slot) => slot.1 += v,
                        None => row.push((j, v)),
                    }
                }
                row.retain(|&(_, v)| v != 0.0);
                row
            })
            .collect();
        ControllerMatrix { m: self.m, rows, floor: a * self.floor + b * other.floor }
    }

    /// Samples a 0-based column of row `i` from a uniform draw `u`.
    pub fn sample(&self, i: usize, u: f64) -> usize {
        let mut acc = 0.0;
        for &(j, v) in &self.rows[i] {
            acc += v;
            if u < acc {
                return j;
            }
        }
        if self.floor > 0.0 {
            let k = ((u - acc) / self.floor) as usize;
            return k.min(self.m - 1);
        }
        self.rows[i].last().map(|&(j, _)| j).unwrap_or(self.m - 1)
    }

    /// `out = X * self` for a row-major `M x M` matrix `X`.
    pub fn mul_right(&self, x: &[f64], out: &mut [f64]) {
        let m = self.m;
        for (xr, or) in x.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            let shift = self.floor * xr.iter().sum::<f64>();
            or.fill(shift);
            for (k, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for &(j, v) in &self.rows[k] {
                    or[j] += xv * v;
                }
            }
        }
    }

    /// `out = self^T * X` for a row-major `M x M` matrix `X`.
    pub fn mul_left_transposed(&self, x: &[f64], out: &mut [f64]) {
        let m = self.m;
        let mut colsum = vec![0.0; m];
        for xr in x.chunks_exact(m) {
            for (c, v) in colsum.iter_mut().zip(xr) {
                *c += v;
            }
        }
        for or in out.chunks_exact_mut(m) {
            for (o, c) in or.iter_mut().zip(&colsum) {
                *o = self.floor * c;
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            let xr = &x[i * m..(i + 1) * m];
            for &(j, v) in row {
                let or = &mut out[j * m..(j + 1) * m];
                for (o, xv) in or.iter_mut().zip(xr) {
                    *o += v * xv;
                }
            }
        }
    }
}

/// Column chosen for a continuous target index `j = M tau((i-1)/M)`: `j`
/// itself when integral, else its floor when that is a valid column, else its
/// ceiling. Returned 1-based.
pub fn placement_column(j: f64, m: usize) -> usize {
    let r = j.round();
    if (j - r).abs() <= 1e-9 * m as f64 && r >= 1.0 && r <= m as f64 {
        return r as usize;
    }
    let fl = j.floor();
    if fl >= 1.0 && fl <= m as f64 {
        return fl as usize;
    }
    (j.ceil() as usize).clamp(1, m)
}

/// Discretised `(N, S, F)` for one server from `tau_n`, `tau_s`, `tau_f`.
pub fn build_controller_matrices(
    m: usize,
    epsilon: f64,
    server: &ServerParams,
) -> Result<(ControllerMatrix, ControllerMatrix, ControllerMatrix)> {
    if m == 0 {
        return Err(Error::Domain("controller grid size M must be at least 1".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} is outside (0, 1)")));
    }
    let place = |op: &dyn Fn(f64) -> Result<f64>| -> Result<ControllerMatrix> {
        let cols = (1..=m)
            .map(|i| Ok(placement_column(m as f64 * op(cell_to_belief(i, m))?, m) - 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControllerMatrix::smoothed_placement(&cols, epsilon))
    };
    let n = place(&|w| Ok(tau_n(w, server)))?;
    let s = place(&|w| tau_s(w, server))?;
    let f = place(&|w| tau_f(w, server))?;
    Ok((n, s, f))
}

/// Finite-state controller: control matrix `C` (probability of choosing
/// server 2 in each cell pair) and belief-cell update matrices per server.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteController {
    m: usize,
    epsilon: f64,
    c: Vec<f64>,
    n: [ControllerMatrix; 2],
    s: [ControllerMatrix; 2],
    f: [ControllerMatrix; 2],
}

impl FiniteController {
    pub fn new(
        epsilon: f64,
        c: Vec<f64>,
        n: [ControllerMatrix; 2],
        s: [ControllerMatrix; 2],
        f: [ControllerMatrix; 2],
    ) -> Result<Self> {
        let m = n[0].dim();
        let dims_ok = [&n, &s, &f].iter().all(|mats| mats.iter().all(|x| x.dim() == m));
        if !dims_ok || c.len() != m * m {
            return Err(Error::Dimension(format!("controller matrices must all be {m} x {m}")));
        }
        if let Some(x) = c.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain(format!("control entry {x} is outside [0, 1]")));
        }
        for mat in n.iter().chain(&s).chain(&f) {
            for i in 0..m {
                let sum = mat.row_sum(i);
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!("row {} sums to {sum}", i + 1)));
                }
            }
        }
        Ok(Self { m, epsilon, c, n, s, f })
    }

    /// Controller with matrices discretised from the belief operators.
    pub fn build(config: &SystemConfig, m: usize, epsilon: f64, c: Vec<f64>) -> Result<Self> {
        let (n1, s1, f1) = build_controller_matrices(m, epsilon, &config.server1)?;
        let (n2, s2, f2) = build_controller_matrices(m, epsilon, &config.server2)?;
        Self::new(epsilon, c, [n1, n2], [s1, s2], [f1, f2])
    }

    /// Controller running the symmetric myopic rule.
    pub fn symmetric_myopic(config: &SystemConfig, m: usize, epsilon: f64) -> Result<Self> {
        Self::build(config, m, epsilon, myopic_control_matrix(m))
    }

    /// Controller following a switching curve, re-sampled to `m` cells.
    pub fn from_curve(config: &SystemConfig, curve: &SwitchingCurve, m: usize, epsilon: f64) -> Result<Self> {
        let curve =
            if curve.resolution() == m && curve.columns[0] == 0.0 { curve.clone() } else { curve.resample(m)? };
        Self::build(config, m, epsilon, curve_control_matrix(&curve, m)?)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Probability of choosing server 2 in cells `(psi1, psi2)`, 1-based.
    pub fn control(&self, psi1: usize, psi2: usize) -> f64 {
        self.c[(psi1 - 1) * self.m + (psi2 - 1)]
    }

    /// Row-major control matrix.
    pub fn control_matrix(&self) -> &[f64] {
        &self.c
    }

    pub fn idle(&self, id: ServerId) -> &ControllerMatrix {
        &self.n[id.index()]
    }

    pub fn success(&self, id: ServerId) -> &ControllerMatrix {
        &self.s[id.index()]
    }

    pub fn failure(&self, id: ServerId) -> &ControllerMatrix {
        &self.f[id.index()]
    }

    pub fn to_doc(&self) -> ControllerDoc {
        let c = self.c.chunks(self.m).map(|r| r.to_vec()).collect();
        ControllerDoc {
            m: self.m,
            epsilon: self.epsilon,
            c,
            n1: self.n[0].to_dense(),
            s1: self.s[0].to_dense(),
            f1: self.f[0].to_dense(),
            n2: self.n[1].to_dense(),
            s2: self.s[1].to_dense(),
            f2: self.f[1].to_dense(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ControllerDoc = serde_json::from_str(text)?;
        doc.into_controller()
    }
}

/// JSON layout of a controller, dense row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerDoc {
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "N1")]
    pub n1: Vec<Vec<f64>>,
    #[serde(rename = "S1")]
    pub s1: Vec<Vec<f64>>,
    #[serde(rename = "F1")]
    pub f1: Vec<Vec<f64>>,
    #[serde(rename = "N2")]
    pub n2: Vec<Vec<f64>>,
    #[serde(rename = "S2")]
    pub s2: Vec<Vec<f64>>,
    #[serde(rename = "F2")]
    pub f2: Vec<Vec<f64>>,
}

impl ControllerDoc {
    pub fn into_controller(self) -> Result<FiniteController> {
        if self.c.len() != self.m || self.c.iter().any(|r| r.len() != self.m) {
            return Err(Error::Dimension(format!("C must be {0} x {0}", self.m)));
        }
        let m = |rows: &[Vec<f64>]| -> Result<ControllerMatrix> {
            let mat = ControllerMatrix::from_dense(rows)?;
            if mat.dim() != self.m {
                return Err(Error::Dimension(format!("expected {0} x {0} matrices", self.m)));
            }
            Ok(mat)
        };
        FiniteController::new(
            self.epsilon,
            self.c.concat(),
            [m(&self.n1)?, m(&self.n2)?],
            [m(&self.s1)?, m(&self.s2)?],
            [m(&self.f1)?, m(&self.f2)?],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChannelChain;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bench() -> SystemConfig {
        SystemConfig::benchmark(0.5, 0.5, 0.5).unwrap()
    }

    #[test]
    fn myopic_identical_servers_is_argmax() {
        let p = MyopicPolicy::new(&bench()).unwrap();
        assert_eq!((p.slope, p.intercept), (1.0, 0.0));
        let b = |a, c| BeliefPair::new(a, c).unwrap();
        assert_eq!(p.choose(b(0.3, 0.6)), ServerId::Two);
        assert_eq!(p.choose(b(0.6, 0.3)), ServerId::One);
        assert_eq!(p.choose(b(0.4, 0.4)), ServerId::Two);
    }

    #[test]
    fn myopic_corners_under_strict_ordering() {
        let s1 = ServerParams::new(ChannelChain::new(0.3, 0.3).unwrap(), 0.2, 0.8).unwrap();
        let s2 = ServerParams::new(ChannelChain::new(0.3, 0.3).unwrap(), 0.1, 0.9).unwrap();
        let cfg = SystemConfig::new(0.5, s1, s2).unwrap();
        assert!(cfg.strictly_ordered());
        assert_eq!(myopic_choice(BeliefPair::new(0.0, 0.0).unwrap(), &cfg).unwrap(), ServerId::One);
        assert_eq!(myopic_choice(BeliefPair::new(1.0, 1.0).unwrap(), &cfg).unwrap(), ServerId::Two);
    }

    #[test]
    fn myopic_line_matches_success_comparison_on_cells() {
        let s1 = ServerParams::new(ChannelChain::new(0.3, 0.3).unwrap(), 0.25, 0.7).unwrap();
        let s2 = ServerParams::new(ChannelChain::new(0.2, 0.4).unwrap(), 0.1, 0.9).unwrap();
        let cfg = SystemConfig::new(0.5, s1, s2).unwrap();
        let p = MyopicPolicy::new(&cfg).unwrap();
        let m = 37;
        for i in 0..m {
            for j in 0..m {
                let b = BeliefPair::new((i as f64 + 0.5) / m as f64, (j as f64 + 0.5) / m as f64).unwrap();
                let r1 = crate::belief::success_prob(b.omega1, &s1);
                let r2 = crate::belief::success_prob(b.omega2, &s2);
                if (r1 - r2).abs() > 1e-12 {
                    let expect = if r2 > r1 { ServerId::Two } else { ServerId::One };
                    assert_eq!(p.choose(b), expect);
                }
            }
        }
    }

    #[test]
    fn myopic_control_matrix_examples() {
        assert_eq!(myopic_control_matrix(2), vec![0.5, 1.0, 0.0, 0.5]);
        assert_eq!(myopic_control_matrix(1), vec![0.5]);
        let c = myopic_control_matrix(6);
        for row in c.chunks(6) {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn single_cell_controller_is_identity() {
        let (n, s, f) = build_controller_matrices(1, DEFAULT_EPSILON, &bench().server1).unwrap();
        for mat in [n, s, f] {
            assert_eq!(mat.dim(), 1);
            assert_abs_diff_eq!(mat.get(0, 0), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn placement_rule_example() {
        // M = 4, row i = 3: tau_s(0.5) = 0.65, j = 2.6 -> column 2
        let server = bench().server1;
        let (_, s, _) = build_controller_matrices(4, DEFAULT_EPSILON, &server).unwrap();
        assert_eq!(s.sparse_row(2), &[(1, 1.0 / 1.001)]);
        assert_eq!(placement_column(2.0, 4), 2);
        assert_eq!(placement_column(0.4, 4), 1);
        assert_eq!(placement_column(0.0, 4), 1);
        assert_eq!(placement_column(4.0, 4), 4);
        assert_eq!(placement_column(3.999_999, 4), 3);
    }

    #[test]
    fn smoothing_bounds_and_stochasticity() {
        let server = SystemConfig::benchmark(0.7, 0.2, 0.5).unwrap().server1;
        for m in [1, 2, 5, 17, 64] {
            let eps = 0.01;
            let (n, s, f) = build_controller_matrices(m, eps, &server).unwrap();
            for mat in [&n, &s, &f] {
                for (i, row) in mat.to_dense().iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= STOCHASTIC_TOL, "row {i}: {sum}");
                    assert!(row.iter().all(|&x| x >= eps / (m as f64 * (1.0 + eps)) - 1e-18));
                }
            }
        }
    }

    #[test]
    fn placement_converges_to_operator() {
        let server = SystemConfig::benchmark(0.6, 0.6, 0.5).unwrap().server1;
        for m in [10, 100, 1000] {
            let (n, s, f) = build_controller_matrices(m, DEFAULT_EPSILON, &server).unwrap();
            for (mat, op) in [
                (&n, Box::new(|w| tau_n(w, &server)) as Box<dyn Fn(f64) -> f64>),
                (&s, Box::new(|w| tau_s(w, &server).unwrap())),
                (&f, Box::new(|w| tau_f(w, &server).unwrap())),
            ] {
                for i in 1..=m {
                    let col = mat.sparse_row(i - 1)[0].0 + 1;
                    let target = op(cell_to_belief(i, m));
                    assert!((col as f64 / m as f64 - target).abs() <= 1.0 / m as f64 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn curve_control_matrix_examples() {
        let cfg = bench();
        for m in [1, 3, 8] {
            let curve = SwitchingCurve::myopic(&cfg, m).unwrap();
            assert_eq!(curve_control_matrix(&curve, m).unwrap(), myopic_control_matrix(m));
        }
        let cols: Vec<f64> = (1..=4).map(|i| cell_to_belief(i, 4)).collect();
        let never = SwitchingCurve::new(cols.clone(), vec![None; 4], 0.0).unwrap();
        assert!(curve_control_matrix(&never, 4).unwrap().iter().all(|&x| x == 0.0));
        assert!(matches!(curve_control_matrix(&never, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn curve_choice_and_resampling() {
        let cols = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let curve = SwitchingCurve::new(cols, vec![Some(0.1), Some(0.3), Some(0.5), Some(0.6), None], 1.0).unwrap();
        assert!(curve.monotonicity_violations().is_empty());
        assert_eq!(curve.choose(BeliefPair::new(0.48, 0.5).unwrap()), ServerId::Two);
        assert_eq!(curve.choose(BeliefPair::new(0.48, 0.49).unwrap()), ServerId::One);
        assert_eq!(curve.choose(BeliefPair::new(0.99, 1.0).unwrap()), ServerId::One);
        let r = curve.resample(4).unwrap();
        // columns 0, .25, .5, .75 -> thresholds snapped up to the lattice
        assert_eq!(r.thresholds(), &[Some(0.25), Some(0.5), Some(0.5), Some(0.75)]);
        let bumpy = SwitchingCurve::new(vec![0.0, 0.5, 1.0], vec![Some(0.4), Some(0.2), None], 1.0).unwrap();
        assert_eq!(bumpy.monotonicity_violations(), vec![1]);
    }

    #[test]
    fn controller_json_round_trip() {
        let cfg = SystemConfig::benchmark(0.6, 0.3, 0.5).unwrap();
        let ctrl = FiniteController::symmetric_myopic(&cfg, 5, DEFAULT_EPSILON).unwrap();
        let text = ctrl.to_json().unwrap();
        let back = FiniteController::from_json(&text).unwrap();
        assert_eq!(back.m(), 5);
        assert_eq!(back.control_matrix(), ctrl.control_matrix());
        for id in ServerId::BOTH {
            for (a, b) in [
                (back.idle(id), ctrl.idle(id)),
                (back.success(id), ctrl.success(id)),
                (back.failure(id), ctrl.failure(id)),
            ] {
                for (ra, rb) in a.to_dense().iter().zip(b.to_dense()) {
                    for (x, y) in ra.iter().zip(rb) {
                        assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
                    }
                }
            }
        }
        let broken = text.replace("\"M\":5", "\"M\":4");
        assert!(FiniteController::from_json(&broken).is_err());
    }

    proptest! {
        #[test]
        fn structured_products_match_dense(
            cols in proptest::collection::vec(0usize..6, 6),
            x in proptest::collection::vec(-1.0f64..1.0, 36),
            eps in 0.0001f64..0.5,
        ) {
            let m = 6;
            let a = ControllerMatrix::smoothed_placement(&cols, eps);
            let d = a.to_dense();
            let mut right = vec![0.0; 36];
            let mut left = vec![0.0; 36];
            a.mul_right(&x, &mut right);
            a.mul_left_transposed(&x, &mut left);
            for i in 0..m {
                for j in 0..m {
                    let r: f64 = (0..m).map(|k| x[i * m + k] * d[k][j]).sum();
                    let l: f64 = (0..m).map(|k| d[k][i] * x[k * m + j]).sum();
                    prop_assert!((right[i * m + j] - r).abs() < 1e-12);
                    prop_assert!((left[i * m + j] - l).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn sampling_follows_row_masses(cols in proptest::collection::vec(0usize..5, 5), eps in 0.01f64..0.9) {
            let a = ControllerMatrix::smoothed_placement(&cols, eps);
            let dense = a.to_dense();
            let n = 20_000;
            for i in 0..5 {
                let mut counts = [0usize; 5];
                for k in 0..n {
                    counts[a.sample(i, (k as f64 + 0.5) / n as f64)] += 1;
                }
                for j in 0..5 {
                    prop_assert!((counts[j] as f64 / n as f64 - dense[i][j]).abs() < 1e-3);
                }
            }
        }
    }
}
