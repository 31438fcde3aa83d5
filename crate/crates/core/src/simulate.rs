//! Monte Carlo engine for the controlled two-server queue.
//!
//! Every slot draws one uniform from each of six substreams of a ChaCha
//! generator (arrivals, the two environments, the two service indicators and
//! the controller, which draws three), whether or not the draw is used. Runs
//! with the same seed therefore share randomness across schemes and policies.
//!
//! Slot order: arrival `E(t)`, environment step to `X(t)`, decision, service
//! `I(t)`, queue update `Q(t+1) = Q(t) + E(t) - I(t)`, observation and belief
//! update. Under full observation the states `X(t)` are revealed before the
//! decision.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{update_belief_with, BeliefPair, Observation, ObservationScheme, Payload, QueueUpdate};
use crate::error::{Error, Result};
use crate::model::{step_environment, EnvState, ServerId, SystemConfig};
use crate::policy::{FiniteController, MyopicPolicy, SwitchingCurve};

/// Default number of discarded initial slots.
pub const DEFAULT_WARMUP: u64 = 10_000;

const BATCHES: usize = 20;

const STREAM_ARRIVAL: u64 = 0;
const STREAM_ENV: [u64; 2] = [1, 2];
const STREAM_SERVICE: [u64; 2] = [3, 4];
const STREAM_CONTROLLER: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Bernoulli arrivals into a queue; no service when the queue is empty.
    Queueing,
    /// Infinite backlog; every slot serves.
    Saturated,
}

/// Server-selection rule used by the simulator.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Policy {
    /// Larger immediate success probability. Uses the true states under full
    /// observation and the stationary beliefs under no observation.
    Myopic,
    Curve(SwitchingCurve),
    Fixed(ServerId),
    /// Finite-state controller; output-observation scheme only.
    Controller(FiniteController),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Myopic => "myopic",
            Policy::Curve(_) => "curve",
            Policy::Fixed(_) => "fixed",
            Policy::Controller(_) => "controller",
        }
    }

    pub fn check_scheme(&self, scheme: ObservationScheme) -> Result<()> {
        let reason = match (self, scheme) {
            (Policy::Controller(_), ObservationScheme::Output) => return Ok(()),
            (Policy::Controller(_), _) => "controller matrices encode success/failure updates",
            (Policy::Curve(_), ObservationScheme::None) => "no observations to form beliefs from",
            _ => return Ok(()),
        };
        Err(Error::IncompatiblePolicy { scheme, reason: format!("{} policy: {reason}", self.name()) })
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub system: SystemConfig,
    pub scheme: ObservationScheme,
    pub horizon: u64,
    pub seed: u64,
    pub mode: SimMode,
    pub warmup: u64,
    pub record_trace: bool,
    pub queue_update: QueueUpdate,
}

impl SimConfig {
    pub fn new(system: SystemConfig, scheme: ObservationScheme, horizon: u64, seed: u64, mode: SimMode) -> Self {
        Self {
            system,
            scheme,
            horizon,
            seed,
            mode,
            warmup: DEFAULT_WARMUP.min(horizon / 10),
            record_trace: false,
            queue_update: QueueUpdate::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon <= self.warmup {
            return Err(Error::Domain(format!("horizon {} must exceed warmup {}", self.horizon, self.warmup)));
        }
        Ok(())
    }
}

/// One slot of a trace. `u` is 0 when idle, else the server number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: u64,
    #[serde(rename = "Q")]
    pub q: u64,
    #[serde(rename = "X1")]
    pub x1: u8,
    #[serde(rename = "X2")]
    pub x2: u8,
    #[serde(rename = "U")]
    pub u: u8,
    #[serde(rename = "E")]
    pub e: u8,
    #[serde(rename = "I")]
    pub i: u8,
    pub omega1: f64,
    pub omega2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Successes per slot after warmup.
    pub throughput: f64,
    /// Time-average queue length after warmup; `None` in saturated mode.
    pub mean_queue: Option<f64>,
    pub final_queue: u64,
    pub final_beliefs: BeliefPair,
    /// Throughput of consecutive equal batches of the post-warmup horizon.
    pub batch_throughputs: Vec<f64>,
    /// Least-squares slope of `Q(t)` against `t` after warmup.
    pub queue_slope: Option<f64>,
    pub trace: Option<Vec<TraceRecord>>,
}

struct Streams {
    arrival: ChaCha8Rng,
    env: [ChaCha8Rng; 2],
    service: [ChaCha8Rng; 2],
    controller: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            arrival: stream(STREAM_ARRIVAL),
            env: STREAM_ENV.map(stream),
            service: STREAM_SERVICE.map(stream),
            controller: stream(STREAM_CONTROLLER),
        }
    }
}

/// Simulates one replication.
pub fn run(sim: &SimConfig, policy: &Policy) -> Result<SimResult> {
    sim.validate()?;
    policy.check_scheme(sim.scheme)?;
    let cfg = &sim.system;
    let myopic = match policy {
        Policy::Myopic => Some(MyopicPolicy::new(cfg)?),
        _ => None,
    };
    let stationary = BeliefPair::stationary(cfg)?;
    let mut rng = Streams::new(sim.seed);

    // X(-1) drawn from stationarity, so X(0) is stationary as well.
    let mut x =
        EnvState { x1: rng.env[0].gen::<f64>() < stationary.omega1, x2: rng.env[1].gen::<f64>() < stationary.omega2 };
    let mut beliefs = stationary;
    let mut psi = match policy {
        Policy::Controller(c) => {
            [crate::policy::belief_to_cell(beliefs.omega1, c.m()), crate::policy::belief_to_cell(beliefs.omega2, c.m())]
        }
        _ => [1, 1],
    };
    let queueing = sim.mode == SimMode::Queueing;
    let mut q: u64 = 0;

    let measured = sim.horizon - sim.warmup;
    let batch_len = (measured / BATCHES as u64).max(1);
    let mut batches = Vec::with_capacity(BATCHES);
    let mut batch_successes = 0u64;
    let mut successes = 0u64;
    let mut queue_sum = 0.0;
    // Slope uses centred time, so the normal equation stays well conditioned.
    let t_mid = (sim.warmup + sim.horizon - 1) as f64 / 2.0;
    let mut tq_sum = 0.0;
    let mut trace = sim.record_trace.then(Vec::new);

    for t in 0..sim.horizon {
        let u_arr: f64 = rng.arrival.gen();
        let u_env = [rng.env[0].gen::<f64>(), rng.env[1].gen::<f64>()];
        let u_srv = [rng.service[0].gen::<f64>(), rng.service[1].gen::<f64>()];
        let u_ctl: [f64; 3] = [rng.controller.gen(), rng.controller.gen(), rng.controller.gen()];

        let e = u_arr < cfg.lambda;
        x = step_environment(x, cfg, u_env[0], u_env[1]);

        let serving = !queueing || q > 0;
        let action = if !serving {
            None
        } else {
            Some(match policy {
                Policy::Fixed(id) => *id,
                Policy::Myopic => {
                    let b = match sim.scheme {
                        ObservationScheme::Full => BeliefPair { omega1: x.x1 as u8 as f64, omega2: x.x2 as u8 as f64 },
                        ObservationScheme::None => stationary,
                        _ => beliefs,
                    };
                    myopic.as_ref().expect("myopic policy prepared").choose(b)
                }
                Policy::Curve(curve) => {
                    let b = match sim.scheme {
                        ObservationScheme::Full => BeliefPair { omega1: x.x1 as u8 as f64, omega2: x.x2 as u8 as f64 },
                        _ => beliefs,
                    };
                    curve.choose(b)
                }
                Policy::Controller(c) => {
                    if u_ctl[0] < c.control(psi[0], psi[1]) {
                        ServerId::Two
                    } else {
                        ServerId::One
                    }
                }
            })
        };

        let success = action.is_some_and(|u| {
            let s = cfg.server(u);
            u_srv[u.index()] < s.mu(x.get(u))
        });

        if let Some(tr) = trace.as_mut() {
            tr.push(TraceRecord {
                t,
                q,
                x1: x.x1 as u8,
                x2: x.x2 as u8,
                u: action.map_or(0, |u| u.number()),
                e: e as u8,
                i: success as u8,
                omega1: beliefs.omega1,
                omega2: beliefs.omega2,
            });
        }

        if t >= sim.warmup {
            if success {
                successes += 1;
                batch_successes += 1;
            }
            if queueing {
                queue_sum += q as f64;
                tq_sum += (t as f64 - t_mid) * q as f64;
            }
            if (t - sim.warmup + 1).is_multiple_of(batch_len) && batches.len() < BATCHES {
                batches.push(batch_successes as f64 / batch_len as f64);
                batch_successes = 0;
            }
        }
        if queueing {
            q = q + e as u64 - success as u64;
        }

        let payload = match (sim.scheme, action) {
            (ObservationScheme::Full, _) => Payload::BothStates(x),
            (ObservationScheme::Queue, None) => Payload::QueueDelta(e as i8),
            (_, None) | (ObservationScheme::None, _) => Payload::Nothing,
            (ObservationScheme::State, Some(u)) => Payload::StateBit(x.get(u)),
            (ObservationScheme::Output, Some(_)) => Payload::Success(success),
            (ObservationScheme::Queue, Some(_)) => Payload::QueueDelta(e as i8 - success as i8),
        };
        let obs = Observation::new(action, payload);
        beliefs = update_belief_with(sim.scheme, action, &obs, beliefs, cfg, sim.queue_update)?;

        if let Policy::Controller(c) = policy {
            for id in ServerId::BOTH {
                let mat = match action {
                    Some(u) if u == id && success => c.success(id),
                    Some(u) if u == id => c.failure(id),
                    _ => c.idle(id),
                };
                psi[id.index()] = mat.sample(psi[id.index()] - 1, u_ctl[1 + id.index()]) + 1;
            }
        }
    }

    let n = measured as f64;
    let centred_sq = n * (n * n - 1.0) / 12.0;
    Ok(SimResult {
        throughput: successes as f64 / n,
        mean_queue: queueing.then(|| queue_sum / n),
        final_queue: q,
        final_beliefs: beliefs,
        batch_throughputs: batches,
        queue_slope: (queueing && centred_sq > 0.0).then(|| tq_sum / centred_sq),
        trace,
    })
}

/// Writes a trace as CSV with a schema comment line.
pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRecord]) -> Result<()> {
    let mut out = out;
    writeln!(out, "# qstab trace v1")?;
    writeln!(out, "t,Q,X1,X2,U,E,I,omega1,omega2")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.q,
            r.x1,
            r.x2,
            r.u,
            r.e,
            r.i,
            crate::output::sig6(r.omega1),
            crate::output::sig6(r.omega2)
        )?;
    }
    Ok(())
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Saturated throughput averaged over seeds, with its standard error.
///
/// With a single seed the error comes from batch means. Replications run in
/// parallel; the reduction is ordered by seed.
pub fn estimate_mu_star(
    system: &SystemConfig,
    scheme: ObservationScheme,
    policy: &Policy,
    horizon: u64,
    seeds: &[u64],
) -> Result<(f64, f64)> {
    if seeds.is_empty() {
        return Err(Error::Domain("at least one seed is required".into()));
    }
    let results = seeds
        .par_iter()
        .map(|&seed| run(&SimConfig::new(*system, scheme, horizon, seed, SimMode::Saturated), policy))
        .collect::<Result<Vec<_>>>()?;
    if let [single] = results.as_slice() {
        let (_, se) = mean_and_stderr(&single.batch_throughputs);
        return Ok((single.throughput, se));
    }
    let per_seed: Vec<f64> = results.iter().map(|r| r.throughput).collect();
    Ok(mean_and_stderr(&per_seed))
}

/// Queue-growth slope for each arrival rate, from one queueing run each.
pub fn stability_probe(
    system: &SystemConfig,
    scheme: ObservationScheme,
    policy: &Policy,
    lambdas: &[f64],
    horizon: u64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    lambdas
        .par_iter()
        .map(|&lambda| {
            let sys = (*system).with_lambda(lambda)?;
            let res = run(&SimConfig::new(sys, scheme, horizon, seed, SimMode::Queueing), policy)?;
            Ok((lambda, res.queue_slope.unwrap_or(0.0)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DEFAULT_EPSILON;

    fn bench(rho: f64) -> SystemConfig {
        SystemConfig::benchmark(rho, rho, 0.5).unwrap()
    }

    #[test]
    fn no_observation_throughput_is_best_mean() {
        let (mu, se) =
            estimate_mu_star(&bench(0.6), ObservationScheme::None, &Policy::Myopic, 1_000_000, &[1, 2, 3, 4]).unwrap();
        assert!((mu - 0.5).abs() < 0.003, "{mu} +- {se}");
    }

    #[test]
    fn full_observation_reaches_upper_bound() {
        let (mu, se) =
            estimate_mu_star(&bench(0.3), ObservationScheme::Full, &Policy::Myopic, 1_000_000, &[1, 2, 3, 4]).unwrap();
        assert!((mu - 0.65).abs() < 0.003, "{mu} +- {se}");
    }

    #[test]
    fn zero_arrivals_leave_the_queue_empty() {
        let sys = bench(0.5).with_lambda(0.0).unwrap();
        let mut sim = SimConfig::new(sys, ObservationScheme::Output, 5_000, 9, SimMode::Queueing);
        sim.record_trace = true;
        let res = run(&sim, &Policy::Myopic).unwrap();
        assert_eq!(res.throughput, 0.0);
        assert_eq!(res.mean_queue, Some(0.0));
        assert!(res.trace.unwrap().iter().all(|r| r.q == 0 && r.u == 0 && r.i == 0));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut sim = SimConfig::new(bench(0.7), ObservationScheme::Queue, 20_000, 42, SimMode::Queueing);
        sim.record_trace = true;
        let a = run(&sim, &Policy::Myopic).unwrap();
        let b = run(&sim, &Policy::Myopic).unwrap();
        assert_eq!(a, b);
        sim.seed = 43;
        assert_ne!(a.trace, run(&sim, &Policy::Myopic).unwrap().trace);
    }

    #[test]
    fn trace_respects_queue_dynamics() {
        let sys = bench(0.7).with_lambda(0.55).unwrap();
        let mut sim = SimConfig::new(sys, ObservationScheme::State, 50_000, 5, SimMode::Queueing);
        sim.record_trace = true;
        let tr = run(&sim, &Policy::Myopic).unwrap().trace.unwrap();
        for w in tr.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert_eq!(b.q as i64, a.q as i64 + a.e as i64 - a.i as i64);
            if a.q == 0 {
                assert_eq!((a.u, a.i), (0, 0));
            }
        }
    }

    #[test]
    fn controller_requires_output_scheme() {
        let cfg = bench(0.5);
        let ctrl = FiniteController::symmetric_myopic(&cfg, 4, DEFAULT_EPSILON).unwrap();
        let sim = SimConfig::new(cfg, ObservationScheme::State, 1000, 1, SimMode::Saturated);
        assert!(matches!(run(&sim, &Policy::Controller(ctrl)), Err(Error::IncompatiblePolicy { .. })));
    }

    #[test]
    fn horizon_must_exceed_warmup() {
        let mut sim = SimConfig::new(bench(0.5), ObservationScheme::Output, 1000, 1, SimMode::Saturated);
        sim.warmup = 1000;
        assert!(run(&sim, &Policy::Myopic).is_err());
        assert!(estimate_mu_star(&bench(0.5), ObservationScheme::Output, &Policy::Myopic, 1000, &[]).is_err());
    }

    #[test]
    fn probe_slopes() {
        let cfg = bench(0.5);
        let out = stability_probe(&cfg, ObservationScheme::None, &Policy::Myopic, &[0.45, 0.7], 400_000, 3).unwrap();
        assert!(out[0].1.abs() < 0.001, "{:?}", out);
        assert!((out[1].1 - 0.2).abs() < 0.01, "{:?}", out);
    }
}
