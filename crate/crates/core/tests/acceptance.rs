//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) and exits nonzero if any
//! criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qstab::belief::{belief_space, BeliefPair, ObservationScheme};
use qstab::mdp::{extract_switching_curve, scheme_iv_limit_check, solve_rvi, RviOptions};
use qstab::model::{mu_star_full, mu_star_no, ChannelChain, ServerId, ServerParams, SystemConfig};
use qstab::oracle::{filter_gap, sample_trajectory};
use qstab::policy::{FiniteController, MyopicPolicy, DEFAULT_EPSILON};
use qstab::qbd::{stability_bound, stationary_phase_distribution, QbdBlocks};
use qstab::simulate::{estimate_mu_star, Policy};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const TABLE1_RHO1: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
/// Published (state, output, queue) bounds per row.
const TABLE1: [[f64; 3]; 4] =
    [[0.5543, 0.5314, 0.5190], [0.5673, 0.5400, 0.5231], [0.5823, 0.5489, 0.5289], [0.6009, 0.5647, 0.5360]];
const QBD_M100: [f64; 4] = [0.5179, 0.5359, 0.5539, 0.5815];
const TOL: f64 = 1e-4;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn closed_forms() -> Outcome {
    let cfg = SystemConfig::benchmark(0.5, 0.5, 0.5).map_err(|e| e.to_string())?;
    let no = mu_star_no(&cfg).map_err(|e| e.to_string())?;
    let full = mu_star_full(&cfg).map_err(|e| e.to_string())?;
    verdict((no - 0.5).abs() <= 1e-12 && (full - 0.65).abs() <= 1e-12, format!("mu*_no = {no}, mu*_full = {full}"))
}

fn table1(cells: usize, tol_abs: f64) -> Outcome {
    let mut worst = 0.0f64;
    let mut cells_out = Vec::new();
    for (row, &rho1) in TABLE1_RHO1.iter().enumerate() {
        let cfg = SystemConfig::benchmark(rho1, 0.5, 0.5).map_err(|e| e.to_string())?;
        for (col, scheme) in ObservationScheme::PARTIAL.into_iter().enumerate() {
            let t = solve_rvi(scheme, &cfg, RviOptions { tol: TOL, ..RviOptions::with_cells(cells) })
                .map_err(|e| format!("rho1 = {rho1}, {scheme}: {e}"))?;
            let gap = (t.mu_star - TABLE1[row][col]).abs();
            worst = worst.max(gap);
            cells_out.push(format!("{:.4}", t.mu_star));
        }
    }
    verdict(
        worst <= tol_abs,
        format!("M = {cells}, max |gap| = {worst:.5} (limit {tol_abs}); [{}]", cells_out.join(" ")),
    )
}

fn qbd_limits() -> Outcome {
    let mut worst = 0.0f64;
    let mut vals = Vec::new();
    let mut invariant = true;
    for (k, &rho) in TABLE1_RHO1.iter().enumerate() {
        let cfg = SystemConfig::benchmark(rho, rho, 0.5).map_err(|e| e.to_string())?;
        let ctrl = FiniteController::symmetric_myopic(&cfg, 100, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        let bounds = [0.1, 0.5, 0.9]
            .iter()
            .map(|&l| stability_bound(&ctrl, &cfg.with_lambda(l)?))
            .collect::<qstab::Result<Vec<f64>>>()
            .map_err(|e| e.to_string())?;
        invariant &= bounds.iter().all(|b| b.to_bits() == bounds[0].to_bits());
        worst = worst.max((bounds[0] - QBD_M100[k]).abs());
        vals.push(format!("{:.4}", bounds[0]));
    }
    verdict(
        worst <= 0.002 && invariant,
        format!("M = 100: [{}], max |gap| = {worst:.5}, lambda-invariant bitwise: {invariant}", vals.join(" ")),
    )
}

fn figure2() -> Outcome {
    let mut rhos: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
    rhos.push(0.99);
    let seeds: Vec<u64> = (1..=4).collect();
    let horizon = 1_000_000;
    let mut problems = Vec::new();
    let mut at_one = f64::NAN;
    for &rho in &rhos {
        let cfg = SystemConfig::benchmark(rho, rho, 0.5).map_err(|e| e.to_string())?;
        // decreasing information: full, state, output, queue, none
        let est = ObservationScheme::ALL
            .iter()
            .map(|&s| estimate_mu_star(&cfg, s, &Policy::Myopic, horizon, &seeds))
            .collect::<qstab::Result<Vec<(f64, f64)>>>()
            .map_err(|e| e.to_string())?;
        for w in est.windows(2) {
            let ((hi, se_hi), (lo, se_lo)) = (w[0], w[1]);
            if hi + 2.0 * (se_hi * se_hi + se_lo * se_lo).sqrt() < lo {
                problems.push(format!("order broken at rho = {rho}: {hi:.4} < {lo:.4}"));
            }
        }
        if rho == 0.0 {
            for &(m, _) in &est[1..] {
                if (m - 0.5).abs() > 0.003 {
                    problems.push(format!("rho = 0 estimate {m:.4} not 0.5"));
                }
            }
        }
        if rho == 0.99 {
            at_one = est[1].0;
            if (at_one - 0.65).abs() > 0.01 {
                problems.push(format!("state scheme at rho = 0.99 is {at_one:.4}"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} rho values x 5 schemes ordered; state scheme at rho = 0.99: {at_one:.4}", rhos.len())
        } else {
            problems.join("; ")
        },
    )
}

fn random_config(rng: &mut impl Rng) -> SystemConfig {
    let server = |rng: &mut dyn rand::RngCore| {
        let p = rng.gen_range(0.02..0.98);
        let q = rng.gen_range(0.02..0.98);
        let mu0 = rng.gen_range(0.02..0.6);
        let mu1 = rng.gen_range(mu0..0.98);
        ServerParams::new(ChannelChain::new(p, q).unwrap(), mu0, mu1).unwrap()
    };
    let s1 = server(rng);
    let s2 = server(rng);
    SystemConfig::new_unordered(rng.gen_range(0.02..0.98), s1, s2).unwrap()
}

fn filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut count = 0;
    for _ in 0..500 {
        let cfg = random_config(&mut rng);
        let prior = BeliefPair::new(rng.gen(), rng.gen()).unwrap();
        for scheme in ObservationScheme::PARTIAL {
            let len = rng.gen_range(0..=8);
            let traj = sample_trajectory(scheme, &cfg, prior, len, &mut rng);
            worst = worst.max(filter_gap(scheme, &cfg, &traj).map_err(|e| e.to_string())?);
            count += 1;
        }
    }
    verdict(worst <= 1e-10, format!("{count} trajectories, max |gap| = {worst:.2e}"))
}

fn strict_variant(rho1: f64) -> SystemConfig {
    let s1 = ServerParams::new(ChannelChain::from_gamma_rho(0.5, rho1).unwrap(), 0.2, 0.8).unwrap();
    let s2 = ServerParams::new(ChannelChain::from_gamma_rho(0.5, 0.5).unwrap(), 0.15, 0.85).unwrap();
    SystemConfig::new(0.5, s1, s2).unwrap()
}

fn corners() -> Outcome {
    let mut problems = Vec::new();
    let cells = 200;
    for &rho1 in &TABLE1_RHO1 {
        let literal = SystemConfig::benchmark(rho1, 0.5, 0.5).unwrap();
        assert!(!literal.strictly_ordered());
        let cfg = strict_variant(rho1);
        for scheme in ObservationScheme::PARTIAL {
            let t = solve_rvi(scheme, &cfg, RviOptions::with_cells(cells)).map_err(|e| e.to_string())?;
            if t.action(0, 0) != ServerId::One || t.action(cells, cells) != ServerId::Two {
                problems.push(format!("rho1 = {rho1}, {scheme}"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "Table 1 correlations with mu(2) = (0.15, 0.85): server 1 at (0,0), server 2 at (1,1) for 12 instances"
                .into()
        } else {
            format!("wrong corner action: {}", problems.join(", "))
        },
    )
}

fn sandwich() -> Outcome {
    let cfg = SystemConfig::benchmark(0.5, 0.7, 0.5).unwrap();
    let cells = 200;
    let opts = RviOptions::with_cells(cells);
    let state = extract_switching_curve(&solve_rvi(ObservationScheme::State, &cfg, opts).map_err(|e| e.to_string())?);
    let output = extract_switching_curve(&solve_rvi(ObservationScheme::Output, &cfg, opts).map_err(|e| e.to_string())?);
    let myopic = MyopicPolicy::new(&cfg).unwrap();
    let omega = belief_space(&cfg.server1).unwrap();
    let slack = 1.0 / cells as f64 + 1e-12;
    let (mut inside, mut ok) = (0, 0);
    for (k, &c) in output.columns().iter().enumerate() {
        if !omega.contains(c, 0.0) {
            continue;
        }
        inside += 1;
        let th = |t: Option<f64>| t.unwrap_or(1.0 + 1.0 / cells as f64);
        let (a, b) = (th(state.thresholds()[k]), myopic.threshold(c).clamp(0.0, 1.0));
        let o = th(output.thresholds()[k]);
        if o >= a.min(b) - slack && o <= a.max(b) + slack {
            ok += 1;
        }
    }
    let frac = ok as f64 / inside as f64;
    verdict(frac >= 0.95, format!("{ok}/{inside} columns inside the belief space ({:.1}%)", 100.0 * frac))
}

fn queue_limits() -> Outcome {
    let cfg = SystemConfig::benchmark(0.6, 0.5, 0.5).unwrap();
    let r = scheme_iv_limit_check(&cfg, RviOptions::with_cells(1000)).map_err(|e| e.to_string())?;
    verdict(
        r.max_limit_diff < 2.0 * TOL && r.mu_queue_config < r.mu_output,
        format!(
            "output {:.6}, queue at lambda 0 / 1 / 0.5: {:.6} / {:.6} / {:.6}, max |diff| = {:.2e}",
            r.mu_output, r.mu_queue_lambda0, r.mu_queue_lambda1, r.mu_queue_config, r.max_limit_diff
        ),
    )
}

fn cross_oracle() -> Outcome {
    let cfg = SystemConfig::benchmark(0.6, 0.6, 0.5).unwrap();
    let ctrl = FiniteController::symmetric_myopic(&cfg, 40, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    let bound = stability_bound(&ctrl, &cfg).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (1..=10).collect();
    let (m, se) = estimate_mu_star(&cfg, ObservationScheme::Output, &Policy::Controller(ctrl), 1_000_000, &seeds)
        .map_err(|e| e.to_string())?;
    let z = (m - bound) / se;
    verdict(z.abs() <= 3.0, format!("bound {bound:.5}, simulated {m:.5} +- {se:.5} (z = {z:.2})"))
}

fn drift_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let cfg = random_config(&mut rng);
        let m = rng.gen_range(1..=6);
        let c: Vec<f64> = (0..m * m).map(|_| rng.gen()).collect();
        let ctrl = FiniteController::build(&cfg, m, rng.gen_range(0.001..0.2), c).map_err(|e| e.to_string())?;
        let blocks = QbdBlocks::build(&ctrl, &cfg).map_err(|e| e.to_string())?;
        let st = stationary_phase_distribution(&blocks.s_tilde, &blocks.f_tilde).map_err(|e| e.to_string())?;
        let rates = blocks.s_tilde.column_sum();
        let pi_s: f64 = st.pi.iter().zip(rates.iter()).map(|(a, b)| a * b).sum();
        worst = worst.max((blocks.drift(&st.pi) - (cfg.lambda - pi_s)).abs());
    }
    verdict(worst <= 1e-10, format!("20 random controllers, max |gap| = {worst:.2e}"))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 closed forms", closed_forms),
        ("2 table 1 at M = 1000 (+-0.002)", || table1(1000, 0.002)),
        ("2 table 1 at M = 200 (+-0.005)", || table1(200, 0.005)),
        ("3 QBD bounds at M = 100", qbd_limits),
        ("4 simulated throughput ordering", figure2),
        ("5 filter equals enumeration", filter_oracle),
        ("6 corner actions under strict ordering", corners),
        ("6 sandwiched output-scheme curve", sandwich),
        ("7 queue scheme at lambda 0 and 1", queue_limits),
        ("8 simulation matches QBD bound", cross_oracle),
        ("9 drift identity", drift_identity),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t0 = Instant::now();
        let outcome = f();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("[PASS] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
