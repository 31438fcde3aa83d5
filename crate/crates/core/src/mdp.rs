//! Average-reward relative value iteration on a grid over the belief square.
//!
//! The grid has nodes `omega = i / M` for `i = 0..=M` on each axis, so the
//! corners of `[0, 1]^2` are nodes. Values at successor beliefs are read by
//! bilinear interpolation. Sweeps are synchronous: every node of the next
//! table is computed from the previous table only, so results do not depend
//! on the number of threads.
//!
//! For each action only the selected server's belief branches; the other one
//! moves by `tau_n`. A backup therefore factors into a one-axis interpolation
//! of `h` along the idle server's successor, shared by all branches, followed
//! by a one-axis interpolation along the selected server's successors.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::belief::{belief_space, success_prob, tau_c_with, tau_f, tau_n, tau_s, ObservationScheme, QueueUpdate};
use crate::error::{Error, Result};
use crate::model::{ServerId, ServerParams, SystemConfig};
use crate::output::{sig6, CsvTable};
use crate::policy::SwitchingCurve;

pub const DEFAULT_CELLS: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Uniform grid of `M + 1` nodes per axis covering `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeliefGrid {
    m: usize,
}

impl BeliefGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain(format!("belief grid needs M >= 2 cells, got {m}")));
        }
        Ok(Self { m })
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    /// Nodes per axis.
    pub fn len(&self) -> usize {
        self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }

    /// Node nearest to `omega`.
    pub fn nearest(&self, omega: f64) -> usize {
        ((omega.clamp(0.0, 1.0) * self.m as f64).round() as usize).min(self.m)
    }

    fn lerp(&self, omega: f64) -> Lerp {
        let pos = omega.clamp(0.0, 1.0) * self.m as f64;
        let lo = (pos.floor() as usize).min(self.m - 1);
        Lerp { lo, w: pos - lo as f64 }
    }
}

/// Interpolation weight `w` between nodes `lo` and `lo + 1`.
#[derive(Debug, Clone, Copy)]
struct Lerp {
    lo: usize,
    w: f64,
}

/// One belief branch of the selected server: probability and successor.
#[derive(Debug, Clone)]
struct Branch {
    weight: Vec<f64>,
    next: Vec<Lerp>,
}

/// Precomputed successor structure of one action.
#[derive(Debug, Clone)]
struct ActionModel {
    reward: Vec<f64>,
    branches: Vec<Branch>,
    /// Successor of the other (idle) server.
    idle_other: Vec<Lerp>,
}

fn branches_for(
    scheme: ObservationScheme,
    grid: &BeliefGrid,
    server: &ServerParams,
    lambda: f64,
    rule: QueueUpdate,
) -> Result<Vec<Branch>> {
    let n = grid.len();
    let omegas: Vec<f64> = (0..n).map(|i| grid.node(i)).collect();
    let branch = |w: &dyn Fn(f64) -> f64, next: &dyn Fn(f64) -> Result<f64>| -> Result<Branch> {
        let mut weight = Vec::with_capacity(n);
        let mut succ = Vec::with_capacity(n);
        for &om in &omegas {
            let wt = w(om);
            // A zero-probability branch may have no defined successor.
            let x = if wt > 0.0 { next(om)? } else { om };
            weight.push(wt);
            succ.push(grid.lerp(x));
        }
        Ok(Branch { weight, next: succ })
    };
    let r = |om: f64| success_prob(om, server);
    let c = &server.chain;
    Ok(match scheme {
        ObservationScheme::State => {
            vec![branch(&|om| 1.0 - om, &|_| Ok(c.p()))?, branch(&|om| om, &|_| Ok(1.0 - c.q()))?]
        }
        ObservationScheme::Output => {
            vec![branch(&|om| 1.0 - r(om), &|om| tau_f(om, server))?, branch(&r, &|om| tau_s(om, server))?]
        }
        ObservationScheme::Queue => {
            let lam = lambda;
            vec![
                // queue grew: arrival and failure
                branch(&|om| lam * (1.0 - r(om)), &|om| tau_f(om, server))?,
                // queue shrank: no arrival and success
                branch(&|om| (1.0 - lam) * r(om), &|om| tau_s(om, server))?,
                // unchanged: ambiguous between the two
                branch(&|om| (1.0 - lam) * (1.0 - r(om)) + lam * r(om), &|om| tau_c_with(om, server, lam, rule))?,
            ]
        }
        other => return Err(Error::UnsupportedScheme(other)),
    })
}

/// Bellman operator of one scheme on one grid, with all successors cached.
#[derive(Debug, Clone)]
pub struct RviProblem {
    scheme: ObservationScheme,
    grid: BeliefGrid,
    actions: [ActionModel; 2],
}

/// Output of one synchronous sweep.
#[derive(Debug, Clone)]
pub struct Backup {
    pub h_next: Vec<f64>,
    /// `h2 - h1` per node; positive means server 2 is strictly better.
    pub advantage: Vec<f64>,
    /// Span midpoint of `h_next - h`.
    pub mu_estimate: f64,
    /// `max(h_next - h) - min(h_next - h)`.
    pub span: f64,
}

impl RviProblem {
    pub fn new(scheme: ObservationScheme, grid: BeliefGrid, config: &SystemConfig, rule: QueueUpdate) -> Result<Self> {
        let n = grid.len();
        let build = |id: ServerId| -> Result<ActionModel> {
            let me = config.server(id);
            let other = config.server(id.other());
            Ok(ActionModel {
                reward: (0..n).map(|i| success_prob(grid.node(i), me)).collect(),
                branches: branches_for(scheme, &grid, me, config.lambda, rule)?,
                idle_other: (0..n).map(|i| grid.lerp(tau_n(grid.node(i), other))).collect(),
            })
        };
        Ok(Self { scheme, grid, actions: [build(ServerId::One)?, build(ServerId::Two)?] })
    }

    pub fn grid(&self) -> BeliefGrid {
        self.grid
    }

    pub fn scheme(&self) -> ObservationScheme {
        self.scheme
    }

    /// One synchronous Bellman sweep of `h` (row-major, `omega1` outer).
    pub fn backup(&self, h: &[f64]) -> Result<Backup> {
        let n = self.grid.len();
        if h.len() != n * n {
            return Err(Error::Dimension(format!("value table has {} entries, expected {}", h.len(), n * n)));
        }
        let [a1, a2] = &self.actions;

        // g2[a][j] = h(a, tau_n2(omega_j)), used when server 1 is selected.
        let mut g2 = vec![0.0; n * n];
        g2.par_chunks_mut(n).zip(h.par_chunks(n)).for_each(|(out, row)| {
            for (o, l) in out.iter_mut().zip(&a1.idle_other) {
                *o = (1.0 - l.w) * row[l.lo] + l.w * row[l.lo + 1];
            }
        });
        // g1[i][b] = h(tau_n1(omega_i), b), used when server 2 is selected.
        let mut g1 = vec![0.0; n * n];
        g1.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let l = a2.idle_other[i];
            let (r0, r1) = (&h[l.lo * n..(l.lo + 1) * n], &h[(l.lo + 1) * n..(l.lo + 2) * n]);
            for ((o, x0), x1) in out.iter_mut().zip(r0).zip(r1) {
                *o = (1.0 - l.w) * x0 + l.w * x1;
            }
        });

        let mut h_next = vec![0.0; n * n];
        let mut advantage = vec![0.0; n * n];
        let (dmax, dmin) = h_next
            .par_chunks_mut(n)
            .zip(advantage.par_chunks_mut(n))
            .enumerate()
            .map(|(i, (out, adv))| {
                let g1_row = &g1[i * n..(i + 1) * n];
                let mut row1 = vec![a1.reward[i]; n];
                for br in &a1.branches {
                    let wt = br.weight[i];
                    if wt == 0.0 {
                        continue;
                    }
                    let l = br.next[i];
                    let (r0, r1) = (&g2[l.lo * n..(l.lo + 1) * n], &g2[(l.lo + 1) * n..(l.lo + 2) * n]);
                    for ((o, x0), x1) in row1.iter_mut().zip(r0).zip(r1) {
                        *o += wt * ((1.0 - l.w) * x0 + l.w * x1);
                    }
                }
                let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
                for j in 0..n {
                    let mut v2 = a2.reward[j];
                    for br in &a2.branches {
                        let wt = br.weight[j];
                        if wt != 0.0 {
                            let l = br.next[j];
                            v2 += wt * ((1.0 - l.w) * g1_row[l.lo] + l.w * g1_row[l.lo + 1]);
                        }
                    }
                    let v1 = row1[j];
                    out[j] = v1.max(v2);
                    adv[j] = v2 - v1;
                    let d = out[j] - h[i * n + j];
                    hi = hi.max(d);
                    lo = lo.min(d);
                }
                (hi, lo)
            })
            .reduce(|| (f64::NEG_INFINITY, f64::INFINITY), |a, b| (a.0.max(b.0), a.1.min(b.1)));
        Ok(Backup { h_next, advantage, mu_estimate: 0.5 * (dmax + dmin), span: dmax - dmin })
    }
}

/// One sweep from `h`, building the operator on the fly.
pub fn bellman_backup(scheme: ObservationScheme, grid: BeliefGrid, h: &[f64], config: &SystemConfig) -> Result<Backup> {
    RviProblem::new(scheme, grid, config, QueueUpdate::Mixture)?.backup(h)
}

#[derive(Debug, Clone, Copy)]
pub struct RviOptions {
    pub cells: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Successor rule for an unchanged queue under the queue scheme.
    pub queue_update: QueueUpdate,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self {
            cells: DEFAULT_CELLS,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            queue_update: QueueUpdate::Mixture,
        }
    }
}

impl RviOptions {
    pub fn with_cells(cells: usize) -> Self {
        Self { cells, ..Self::default() }
    }
}

/// Solved relative value function and greedy policy.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub scheme: ObservationScheme,
    pub grid: BeliefGrid,
    /// Row-major, `omega1` outer; zero at `reference`.
    pub h: Vec<f64>,
    pub advantage: Vec<f64>,
    pub mu_star: f64,
    pub residual_span: f64,
    pub iterations: usize,
    pub tol: f64,
    pub reference: (usize, usize),
}

impl ValueTable {
    fn index(&self, i: usize, j: usize) -> usize {
        i * self.grid.len() + j
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.h[self.index(i, j)]
    }

    /// Greedy action at node `(i, j)`; ties go to server 1.
    pub fn action(&self, i: usize, j: usize) -> ServerId {
        if self.advantage[self.index(i, j)] > 0.0 {
            ServerId::Two
        } else {
            ServerId::One
        }
    }

    pub fn summary(&self) -> RviSummary {
        RviSummary {
            scheme: self.scheme,
            mu_star: self.mu_star,
            iterations: self.iterations,
            span: self.residual_span,
            m_cells: self.grid.cells(),
            tol: self.tol,
        }
    }

    /// CSV of `omega1, omega2, h, action` over all nodes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.grid.len();
        let mut t = CsvTable::new("value-table", &["omega1", "omega2", "h", "action"]);
        for i in 0..n {
            for j in 0..n {
                t.push(vec![
                    sig6(self.grid.node(i)),
                    sig6(self.grid.node(j)),
                    sig6(self.value(i, j)),
                    self.action(i, j).number().to_string(),
                ])?;
            }
        }
        t.write_to(out)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RviSummary {
    pub scheme: ObservationScheme,
    pub mu_star: f64,
    pub iterations: usize,
    pub span: f64,
    #[serde(rename = "M_cells")]
    pub m_cells: usize,
    pub tol: f64,
}

/// Relative value iteration until the span of `h_next - h` drops below `tol`.
pub fn solve_rvi(scheme: ObservationScheme, config: &SystemConfig, opts: RviOptions) -> Result<ValueTable> {
    if !(opts.tol > 0.0) {
        return Err(Error::Domain(format!("tolerance {} must be positive", opts.tol)));
    }
    let grid = BeliefGrid::new(opts.cells)?;
    let problem = RviProblem::new(scheme, grid, config, opts.queue_update)?;
    let n = grid.len();
    let reference = (grid.nearest(config.server1.gamma()?), grid.nearest(config.server2.gamma()?));
    let ref_idx = reference.0 * n + reference.1;
    let mut h = vec![0.0; n * n];
    let mut last_span = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let b = problem.backup(&h)?;
        let shift = b.h_next[ref_idx];
        h = b.h_next;
        h.iter_mut().for_each(|x| *x -= shift);
        last_span = b.span;
        if it % 100 == 0 {
            log::debug!("rvi {scheme} sweep {it}: mu ~ {:.6}, span {:.3e}", b.mu_estimate, b.span);
        }
        if b.span < opts.tol {
            log::info!("rvi {scheme} converged after {it} sweeps: mu = {:.6}", b.mu_estimate);
            return Ok(ValueTable {
                scheme,
                grid,
                h,
                advantage: b.advantage,
                mu_star: b.mu_estimate,
                residual_span: b.span,
                iterations: it,
                tol: opts.tol,
                reference,
            });
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iters, residual: last_span })
}

/// Per column, the least node at which the greedy action is server 2.
pub fn extract_switching_curve(table: &ValueTable) -> SwitchingCurve {
    let n = table.grid.len();
    let columns = (0..n).map(|i| table.grid.node(i)).collect();
    let thresholds =
        (0..n).map(|i| (0..n).find(|&j| table.action(i, j) == ServerId::Two).map(|j| table.grid.node(j))).collect();
    SwitchingCurve::new(columns, thresholds, 1.0).expect("grid columns are increasing")
}

/// Monotonicity violations of `curve` restricted to columns inside the
/// reachable belief interval of server 1 and thresholds inside that of
/// server 2.
pub fn violations_in_belief_space(curve: &SwitchingCurve, config: &SystemConfig) -> Result<Vec<usize>> {
    let (o1, o2) = (belief_space(&config.server1)?, belief_space(&config.server2)?);
    let inside: Vec<usize> =
        curve.columns().iter().enumerate().filter(|(_, &c)| o1.contains(c, 0.0)).map(|(k, _)| k).collect();
    let clip = |t: Option<f64>| t.unwrap_or(f64::INFINITY).clamp(o2.lo, o2.hi);
    Ok(inside
        .windows(2)
        .filter(|w| clip(curve.thresholds()[w[1]]) < clip(curve.thresholds()[w[0]]) - 1e-12)
        .map(|w| w[1])
        .collect())
}

/// Queue scheme at the arrival-rate extremes against the output scheme.
#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    pub mu_output: f64,
    pub mu_queue_lambda0: f64,
    pub mu_queue_lambda1: f64,
    pub mu_queue_config: f64,
    pub max_limit_diff: f64,
    /// Largest fraction of nodes on which a limit policy differs from the
    /// output-scheme policy.
    pub policy_disagreement: f64,
}

pub fn scheme_iv_limit_check(config: &SystemConfig, opts: RviOptions) -> Result<LimitReport> {
    let out = solve_rvi(ObservationScheme::Output, config, opts)?;
    let q = |lam: f64| solve_rvi(ObservationScheme::Queue, &(*config).with_lambda(lam)?, opts);
    let (q0, q1, qc) = (q(0.0)?, q(1.0)?, q(config.lambda)?);
    let disagree = |t: &ValueTable| {
        let n = t.grid.len();
        let count = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| t.action(i, j) != out.action(i, j))
            .count();
        count as f64 / (n * n) as f64
    };
    Ok(LimitReport {
        mu_output: out.mu_star,
        mu_queue_lambda0: q0.mu_star,
        mu_queue_lambda1: q1.mu_star,
        mu_queue_config: qc.mu_star,
        max_limit_diff: (q0.mu_star - out.mu_star).abs().max((q1.mu_star - out.mu_star).abs()),
        policy_disagreement: disagree(&q0).max(disagree(&q1)),
    })
}
