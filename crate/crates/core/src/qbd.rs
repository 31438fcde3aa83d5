//! Quasi-birth-death model of the queue under a finite-state controller with
//! output observations, and its stability bound.
//!
//! Phases are `(X1, X2, psi1, psi2)`, laid out environment-major
//! (`2 * X1 + X2`), then `psi1`, then `psi2`:
//! `index = ((2 * x1 + x2) * M + psi1 - 1) * M + psi2 - 1`.
//!
//! Two routes compute the same operators. [`build_env_blocks`] and
//! [`assemble_tilde`] form dense matrices from Kronecker products and are
//! limited to small `M`. [`StructuredKernel`] applies `S~ + F~` without
//! forming it, using that every controller matrix is sparse plus a constant,
//! and is what [`stability_bound`] uses.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ServerId, SystemConfig};
use crate::output::{sig6, CsvTable};
use crate::policy::{ControllerMatrix, FiniteController};

/// Largest `M` for which dense blocks are built.
pub const DENSE_LIMIT: usize = 16;
/// Target for the 1-norm residual `||pi P - pi||`.
pub const STATIONARY_TOL: f64 = 1e-12;
pub const MAX_POWER_ITERS: usize = 1_000_000;
/// Phase counts up to this size are solved directly.
const DIRECT_SOLVE_LIMIT: usize = 1024;

/// Phase index of `(x1, x2, psi1, psi2)`, with `psi` 1-based.
pub fn phase_index(x1: bool, x2: bool, psi1: usize, psi2: usize, m: usize) -> usize {
    (((x1 as usize) * 2 + x2 as usize) * m + psi1 - 1) * m + psi2 - 1
}

/// Inverse of [`phase_index`].
pub fn phase_of(index: usize, m: usize) -> (bool, bool, usize, usize) {
    let env = index / (m * m);
    let rest = index % (m * m);
    (env & 2 != 0, env & 1 != 0, rest / m + 1, rest % m + 1)
}

fn dense(mat: &ControllerMatrix) -> DMatrix<f64> {
    let m = mat.dim();
    DMatrix::from_fn(m, m, |i, j| mat.get(i, j))
}

fn check_dense(m: usize) -> Result<()> {
    if m > DENSE_LIMIT {
        return Err(Error::Resource(format!("dense QBD blocks are limited to M <= {DENSE_LIMIT}, got {m}")));
    }
    Ok(())
}

/// Per-environment-state blocks, indexed `[x1][x2]`.
#[derive(Debug, Clone)]
pub struct EnvBlocks {
    pub s: [[DMatrix<f64>; 2]; 2],
    pub f: [[DMatrix<f64>; 2]; 2],
    pub n: [[DMatrix<f64>; 2]; 2],
}

pub fn build_env_blocks(controller: &FiniteController, config: &SystemConfig) -> Result<EnvBlocks> {
    let m = controller.m();
    check_dense(m)?;
    let (one, two) = (ServerId::One, ServerId::Two);
    let n1 = dense(controller.idle(one));
    let n2 = dense(controller.idle(two));
    let s1 = dense(controller.success(one));
    let s2 = dense(controller.success(two));
    let f1 = dense(controller.failure(one));
    let f2 = dense(controller.failure(two));
    // diag(vec(C')) has C[psi1, psi2] at position (psi1 - 1) M + psi2 - 1.
    let c = DVector::from_column_slice(controller.control_matrix());
    let dc = DMatrix::from_diagonal(&c);
    let dcbar = DMatrix::from_diagonal(&c.map(|x| 1.0 - x));
    let n1s2 = n1.kronecker(&s2);
    let s1n2 = s1.kronecker(&n2);
    let n1f2 = n1.kronecker(&f2);
    let f1n2 = f1.kronecker(&n2);
    let nn = n1.kronecker(&n2);
    let (a, b) = (&config.server1, &config.server2);
    let block = |k: usize, l: usize, success: bool| {
        let (mu1, mu2) = (a.mu(k == 1), b.mu(l == 1));
        if success {
            &dc * &n1s2 * mu2 + &dcbar * &s1n2 * mu1
        } else {
            &dc * &n1f2 * (1.0 - mu2) + &dcbar * &f1n2 * (1.0 - mu1)
        }
    };
    Ok(EnvBlocks {
        s: [[block(0, 0, true), block(0, 1, true)], [block(1, 0, true), block(1, 1, true)]],
        f: [[block(0, 0, false), block(0, 1, false)], [block(1, 0, false), block(1, 1, false)]],
        n: [[nn.clone(), nn.clone()], [nn.clone(), nn]],
    })
}

fn env_kron(config: &SystemConfig) -> [[f64; 4]; 4] {
    let p1 = config.server1.chain.transition();
    let p2 = config.server2.chain.transition();
    let mut out = [[0.0; 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            *x = p1[r >> 1][c >> 1] * p2[r & 1][c & 1];
        }
    }
    out
}

/// Block `(r, c)` is `(P1 kron P2)[r, c]` times the row's environment block.
pub fn assemble_tilde(env: &EnvBlocks, config: &SystemConfig) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mm = env.n[0][0].nrows();
    let p = env_kron(config);
    let assemble = |blocks: &[[DMatrix<f64>; 2]; 2]| {
        let mut out = DMatrix::zeros(4 * mm, 4 * mm);
        for (r, prow) in p.iter().enumerate() {
            let d = &blocks[r >> 1][r & 1];
            for (c, &w) in prow.iter().enumerate() {
                if w != 0.0 {
                    out.view_mut((r * mm, c * mm), (mm, mm)).copy_from(&(d * w));
                }
            }
        }
        out
    };
    (assemble(&env.s), assemble(&env.f), assemble(&env.n))
}

/// Level-independent QBD blocks.
#[derive(Debug, Clone)]
pub struct QbdBlocks {
    pub s_tilde: DMatrix<f64>,
    pub f_tilde: DMatrix<f64>,
    pub n_tilde: DMatrix<f64>,
    pub a_minus1: DMatrix<f64>,
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a0_boundary: DMatrix<f64>,
    pub a1_boundary: DMatrix<f64>,
    pub lambda: f64,
}

pub fn level_blocks(tilde: (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), lambda: f64) -> Result<QbdBlocks> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda = {lambda} is outside [0, 1]")));
    }
    let (s, f, n) = tilde;
    let lb = 1.0 - lambda;
    Ok(QbdBlocks {
        a0_boundary: &n * lb,
        a1_boundary: &n * lambda,
        a_minus1: &s * lb,
        a0: &f * lb + &s * lambda,
        a1: &f * lambda,
        s_tilde: s,
        f_tilde: f,
        n_tilde: n,
        lambda,
    })
}

impl QbdBlocks {
    pub fn build(controller: &FiniteController, config: &SystemConfig) -> Result<Self> {
        let env = build_env_blocks(controller, config)?;
        level_blocks(assemble_tilde(&env, config), config.lambda)
    }

    /// `pi (A1 - A_{-1}) 1` evaluated with the dense blocks.
    pub fn drift(&self, pi: &[f64]) -> f64 {
        let ones = DVector::from_element(self.a1.ncols(), 1.0);
        let d = (&self.a1 - &self.a_minus1) * ones;
        pi.iter().zip(d.iter()).map(|(a, b)| a * b).sum()
    }

    /// Writes the named block as `row,col,value` triplets of nonzero entries.
    pub fn write_triplets<W: Write>(&self, name: &str, out: W) -> Result<()> {
        let mat = match name {
            "S_tilde" => &self.s_tilde,
            "F_tilde" => &self.f_tilde,
            "N_tilde" => &self.n_tilde,
            "A_minus1" => &self.a_minus1,
            "A0" => &self.a0,
            "A1" => &self.a1,
            "A0_boundary" => &self.a0_boundary,
            "A1_boundary" => &self.a1_boundary,
            other => return Err(Error::Config(format!("unknown block name {other}"))),
        };
        let mut t = CsvTable::new(&format!("qbd-triplets {name}"), &["row", "col", "value"]);
        for r in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                let v = mat[(r, c)];
                if v != 0.0 {
                    t.push(vec![r.to_string(), c.to_string(), sig6(v)])?;
                }
            }
        }
        t.write_to(out)
    }

    pub const BLOCK_NAMES: [&'static str; 8] =
        ["S_tilde", "F_tilde", "N_tilde", "A_minus1", "A0", "A1", "A0_boundary", "A1_boundary"];
}

/// The phase process `S~ + F~` seen as a row-vector operator.
pub trait PhaseKernel {
    fn dim(&self) -> usize;
    /// `out = v (S~ + F~)`.
    fn apply(&self, v: &[f64], out: &mut [f64]);
    /// `S~ 1`: per-phase success probability.
    fn success_rates(&self) -> Vec<f64>;
    /// `F~ 1`: per-phase failure probability.
    fn failure_rates(&self) -> Vec<f64>;
    /// Dense `S~ + F~` when small enough to solve directly.
    fn dense_transition(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// Dense kernel from explicit `S~` and `F~`.
pub struct DenseKernel {
    p: DMatrix<f64>,
    s_rows: Vec<f64>,
    f_rows: Vec<f64>,
}

impl DenseKernel {
    pub fn new(s_tilde: &DMatrix<f64>, f_tilde: &DMatrix<f64>) -> Self {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.sum()).collect();
        Self { p: s_tilde + f_tilde, s_rows: rows(s_tilde), f_rows: rows(f_tilde) }
    }
}

impl PhaseKernel for DenseKernel {
    fn dim(&self) -> usize {
        self.p.nrows()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let r = DVector::from_column_slice(v).transpose() * &self.p;
        out.copy_from_slice(r.as_slice());
    }

    fn success_rates(&self) -> Vec<f64> {
        self.s_rows.clone()
    }

    fn failure_rates(&self) -> Vec<f64> {
        self.f_rows.clone()
    }

    fn dense_transition(&self) -> Option<DMatrix<f64>> {
        (self.dim() <= DIRECT_SOLVE_LIMIT).then(|| self.p.clone())
    }
}

/// Matrix-free `S~ + F~` for any `M`.
///
/// For environment state `(k, l)` and phase slice `V` (an `M x M` matrix over
/// `(psi1, psi2)`), the mass moved by one slot is
/// `N1' (V o C) G2_l + G1_k' (V o (1 - C)) N2` with
/// `Gj_x = mu_x S_j + (1 - mu_x) F_j`, then spread over the next environment
/// states by `P1 kron P2`.
pub struct StructuredKernel {
    m: usize,
    c: Vec<f64>,
    n1: ControllerMatrix,
    n2: ControllerMatrix,
    /// `G1_k` for `k = 0, 1`.
    g1: [ControllerMatrix; 2],
    /// `G2_l` for `l = 0, 1`.
    g2: [ControllerMatrix; 2],
    mu1: [f64; 2],
    mu2: [f64; 2],
    env: [[f64; 4]; 4],
}

impl StructuredKernel {
    pub fn new(controller: &FiniteController, config: &SystemConfig) -> Self {
        let g = |id: ServerId, mu: f64| controller.success(id).combine(mu, controller.failure(id), 1.0 - mu);
        let (a, b) = (&config.server1, &config.server2);
        Self {
            m: controller.m(),
            c: controller.control_matrix().to_vec(),
            n1: controller.idle(ServerId::One).clone(),
            n2: controller.idle(ServerId::Two).clone(),
            g1: [g(ServerId::One, a.mu0), g(ServerId::One, a.mu1)],
            g2: [g(ServerId::Two, b.mu0), g(ServerId::Two, b.mu1)],
            mu1: [a.mu0, a.mu1],
            mu2: [b.mu0, b.mu1],
            env: env_kron(config),
        }
    }

    fn rates(&self, mu1: [f64; 2], mu2: [f64; 2]) -> Vec<f64> {
        let mm = self.m * self.m;
        let mut out = vec![0.0; 4 * mm];
        for r in 0..4 {
            let (k, l) = (r >> 1, r & 1);
            for (o, c) in out[r * mm..(r + 1) * mm].iter_mut().zip(&self.c) {
                *o = c * mu2[l] + (1.0 - c) * mu1[k];
            }
        }
        out
    }
}

impl PhaseKernel for StructuredKernel {
    fn dim(&self) -> usize {
        4 * self.m * self.m
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let mm = self.m * self.m;
        out.fill(0.0);
        let mut masked = vec![0.0; mm];
        let mut tmp = vec![0.0; mm];
        let mut y = vec![0.0; mm];
        let mut part = vec![0.0; mm];
        for r in 0..4 {
            let (k, l) = (r >> 1, r & 1);
            let x = &v[r * mm..(r + 1) * mm];
            // server 2 chosen
            for ((o, xv), c) in masked.iter_mut().zip(x).zip(&self.c) {
                *o = xv * c;
            }
            self.g2[l].mul_right(&masked, &mut tmp);
            self.n1.mul_left_transposed(&tmp, &mut y);
            // server 1 chosen
            for ((o, xv), c) in masked.iter_mut().zip(x).zip(&self.c) {
                *o = xv * (1.0 - c);
            }
            self.n2.mul_right(&masked, &mut tmp);
            self.g1[k].mul_left_transposed(&tmp, &mut part);
            for (a, b) in y.iter_mut().zip(&part) {
                *a += b;
            }
            for (cidx, &w) in self.env[r].iter().enumerate() {
                if w != 0.0 {
                    for (o, yv) in out[cidx * mm..(cidx + 1) * mm].iter_mut().zip(&y) {
                        *o += w * yv;
                    }
                }
            }
        }
    }

    fn success_rates(&self) -> Vec<f64> {
        self.rates(self.mu1, self.mu2)
    }

    fn failure_rates(&self) -> Vec<f64> {
        self.rates(self.mu1.map(|x| 1.0 - x), self.mu2.map(|x| 1.0 - x))
    }
}

/// Stationary vector of a phase kernel.
#[derive(Debug, Clone)]
pub struct StationaryPhase {
    pub pi: Vec<f64>,
    /// `||pi P - pi||_1`.
    pub residual: f64,
    /// Power iterations used; zero for the direct solve.
    pub iterations: usize,
}

fn residual(kernel: &dyn PhaseKernel, pi: &[f64]) -> f64 {
    let mut out = vec![0.0; pi.len()];
    kernel.apply(pi, &mut out);
    out.iter().zip(pi).map(|(a, b)| (a - b).abs()).sum()
}

fn direct_solve(p: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = p.nrows();
    // pi (P - I) = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = p.transpose() - DMatrix::identity(n, n);
    a.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = a.lu().solve(&rhs)?;
    Some(sol.iter().map(|&x| x.max(0.0)).collect())
}

/// Stationary distribution by a direct solve for small kernels, otherwise by
/// power iteration from the uniform vector.
pub fn stationary_distribution(kernel: &dyn PhaseKernel, tol: f64, max_iters: usize) -> Result<StationaryPhase> {
    let n = kernel.dim();
    if let Some(p) = kernel.dense_transition() {
        if let Some(mut pi) = direct_solve(&p) {
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|x| *x /= s);
            let res = residual(kernel, &pi);
            if res <= tol.max(1e-10) {
                return Ok(StationaryPhase { pi, residual: res, iterations: 0 });
            }
        }
    }
    let mut v = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut res = f64::INFINITY;
    for it in 1..=max_iters {
        kernel.apply(&v, &mut next);
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        res = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut v, &mut next);
        if res < tol {
            return Ok(StationaryPhase { pi: v, residual: res, iterations: it });
        }
    }
    Err(Error::NonConvergence { iterations: max_iters, residual: res })
}

/// Stationary phase distribution of explicit `S~ + F~`.
pub fn stationary_phase_distribution(s_tilde: &DMatrix<f64>, f_tilde: &DMatrix<f64>) -> Result<StationaryPhase> {
    stationary_distribution(&DenseKernel::new(s_tilde, f_tilde), STATIONARY_TOL, MAX_POWER_ITERS)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of the stability analysis of one controller.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    pub mu_star: f64,
    pub residual: f64,
    pub iterations: usize,
}

pub fn stability_analysis(controller: &FiniteController, config: &SystemConfig) -> Result<StabilityReport> {
    let kernel = StructuredKernel::new(controller, config);
    let st = stationary_distribution(&kernel, STATIONARY_TOL, MAX_POWER_ITERS)?;
    Ok(StabilityReport {
        m: controller.m(),
        epsilon: controller.epsilon(),
        mu_star: dot(&st.pi, &kernel.success_rates()),
        residual: st.residual,
        iterations: st.iterations,
    })
}

/// `pi S~ 1`: the queue is positive recurrent for arrival rates below it.
/// The arrival rate of `config` is never read.
pub fn stability_bound(controller: &FiniteController, config: &SystemConfig) -> Result<f64> {
    Ok(stability_analysis(controller, config)?.mu_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftReport {
    pub stable: bool,
    /// `mu* - lambda`.
    pub margin: f64,
    /// `pi (A1 - A_{-1}) 1`.
    pub drift: f64,
    pub mu_star: f64,
}

/// Mean drift of the level under the stationary phase distribution at the
/// arrival rate of `config`.
pub fn drift_check(controller: &FiniteController, config: &SystemConfig) -> Result<DriftReport> {
    let lambda = config.lambda;
    let kernel = StructuredKernel::new(controller, config);
    let st = stationary_distribution(&kernel, STATIONARY_TOL, MAX_POWER_ITERS)?;
    let s = dot(&st.pi, &kernel.success_rates());
    let f = dot(&st.pi, &kernel.failure_rates());
    // A1 1 = lambda F~ 1 and A_{-1} 1 = (1 - lambda) S~ 1.
    let drift = lambda * f - (1.0 - lambda) * s;
    Ok(DriftReport { stable: drift < 0.0, margin: s - lambda, drift, mu_star: s })
}
