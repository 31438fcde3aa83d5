//! Belief operators and per-scheme filters.
//!
//! A belief `omega` is the probability that a server's environment is in the
//! good state at the next decision epoch, given everything observed so far.
//! With `r(omega) = (1-omega) mu0 + omega mu1` the one-step operators are
//!
//! ```text
//! tau_n(w) = w rho + gamma (1 - rho)                         no information
//! tau_f(w) = ((1-q)(1-mu1) w + p (1-mu0)(1-w)) / (1 - r(w))  observed failure
//! tau_s(w) = ((1-q) mu1 w + p mu0 (1-w)) / r(w)              observed success
//! tau_c(w) = lambda tau_s(w) + (1-lambda) tau_f(w)           queue unchanged
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EnvState, ServerId, ServerParams, SystemConfig};

/// Posterior good-state probabilities of both servers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefPair {
    pub omega1: f64,
    pub omega2: f64,
}

impl BeliefPair {
    pub fn new(omega1: f64, omega2: f64) -> Result<Self> {
        for (name, w) in [("omega1", omega1), ("omega2", omega2)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Domain(format!("{name} = {w} is outside [0, 1]")));
            }
        }
        Ok(Self { omega1, omega2 })
    }

    /// Stationary beliefs `(gamma1, gamma2)`.
    pub fn stationary(config: &SystemConfig) -> Result<Self> {
        Ok(Self { omega1: config.server1.gamma()?, omega2: config.server2.gamma()? })
    }

    pub fn get(&self, id: ServerId) -> f64 {
        match id {
            ServerId::One => self.omega1,
            ServerId::Two => self.omega2,
        }
    }

    fn with(mut self, id: ServerId, w: f64) -> Self {
        match id {
            ServerId::One => self.omega1 = w,
            ServerId::Two => self.omega2 = w,
        }
        self
    }
}

/// The five information regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationScheme {
    /// Both environment states are seen before each decision.
    Full,
    /// The environment state of the selected server is seen.
    State,
    /// Success or failure of the selected server is seen.
    Output,
    /// Only queue-length increments are seen.
    Queue,
    /// Nothing is seen.
    None,
}

impl ObservationScheme {
    pub const ALL: [ObservationScheme; 5] = [
        ObservationScheme::Full,
        ObservationScheme::State,
        ObservationScheme::Output,
        ObservationScheme::Queue,
        ObservationScheme::None,
    ];

    /// Schemes handled by the belief-space dynamic program.
    pub const PARTIAL: [ObservationScheme; 3] =
        [ObservationScheme::State, ObservationScheme::Output, ObservationScheme::Queue];

    pub fn name(self) -> &'static str {
        match self {
            ObservationScheme::Full => "full",
            ObservationScheme::State => "state",
            ObservationScheme::Output => "output",
            ObservationScheme::Queue => "queue",
            ObservationScheme::None => "none",
        }
    }
}

impl fmt::Display for ObservationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObservationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "i" => Ok(Self::Full),
            "state" | "ii" => Ok(Self::State),
            "output" | "iii" => Ok(Self::Output),
            "queue" | "iv" => Ok(Self::Queue),
            "none" | "v" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown observation scheme '{other}'"))),
        }
    }
}

/// What a single slot reveals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    /// Environment state of the selected server.
    StateBit(bool),
    /// Service success of the selected server.
    Success(bool),
    /// Queue increment `E(t) - I(t)` in `{-1, 0, 1}`.
    QueueDelta(i8),
    BothStates(EnvState),
    Nothing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub selected: Option<ServerId>,
    pub payload: Payload,
}

impl Observation {
    pub fn new(selected: Option<ServerId>, payload: Payload) -> Self {
        Self { selected, payload }
    }
}

/// How the queue scheme updates the served server's belief when the queue
/// length does not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueUpdate {
    /// Exact Bayesian posterior given `E(t) = I(t)`.
    #[default]
    Posterior,
    /// The convex mixture `lambda tau_s + (1 - lambda) tau_f`.
    Mixture,
}

/// Believed chance of success `r(omega)`.
pub fn success_prob(omega: f64, server: &ServerParams) -> f64 {
    (1.0 - omega) * server.mu0 + omega * server.mu1
}

pub fn tau_n(omega: f64, server: &ServerParams) -> f64 {
    let c = &server.chain;
    omega * c.rho() + c.p()
}

pub fn tau_f(omega: f64, server: &ServerParams) -> Result<f64> {
    let r = success_prob(omega, server);
    if r >= 1.0 {
        return Err(Error::DegenerateObservation(format!("failure has probability zero at omega = {omega}")));
    }
    let c = &server.chain;
    let num = (1.0 - c.q()) * (1.0 - server.mu1) * omega + c.p() * (1.0 - server.mu0) * (1.0 - omega);
    Ok((num / (1.0 - r)).clamp(0.0, 1.0))
}

pub fn tau_s(omega: f64, server: &ServerParams) -> Result<f64> {
    let r = success_prob(omega, server);
    if r <= 0.0 {
        return Err(Error::DegenerateObservation(format!("success has probability zero at omega = {omega}")));
    }
    let c = &server.chain;
    let num = (1.0 - c.q()) * server.mu1 * omega + c.p() * server.mu0 * (1.0 - omega);
    Ok((num / r).clamp(0.0, 1.0))
}

/// Convex mixture used by the queue scheme's dynamic program.
pub fn tau_c(omega: f64, server: &ServerParams, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return tau_f(omega, server);
    }
    if lambda >= 1.0 {
        return tau_s(omega, server);
    }
    Ok(lambda * tau_s(omega, server)? + (1.0 - lambda) * tau_f(omega, server)?)
}

/// Exact posterior after an unchanged queue: either no arrival and a failed
/// service, or an arrival and a successful one.
pub fn tau_c_posterior(omega: f64, server: &ServerParams, lambda: f64) -> Result<f64> {
    let r = success_prob(omega, server);
    let w_fail = (1.0 - lambda) * (1.0 - r);
    let w_succ = lambda * r;
    let total = w_fail + w_succ;
    if total <= 0.0 {
        return Err(Error::DegenerateObservation(format!("unchanged queue has probability zero at omega = {omega}")));
    }
    let mut acc = 0.0;
    if w_fail > 0.0 {
        acc += w_fail * tau_f(omega, server)?;
    }
    if w_succ > 0.0 {
        acc += w_succ * tau_s(omega, server)?;
    }
    Ok((acc / total).clamp(0.0, 1.0))
}

pub fn tau_c_with(omega: f64, server: &ServerParams, lambda: f64, rule: QueueUpdate) -> Result<f64> {
    match rule {
        QueueUpdate::Posterior => tau_c_posterior(omega, server, lambda),
        QueueUpdate::Mixture => tau_c(omega, server, lambda),
    }
}

/// Belief after observing the environment state `good` of a server, carried
/// forward to the next epoch.
pub fn propagate_observed(good: bool, server: &ServerParams) -> f64 {
    if good {
        1.0 - server.chain.q()
    } else {
        server.chain.p()
    }
}

/// Which operator a fixed point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Idle,
    Failure,
    Success,
}

/// Stable fixed point of `tau_n`, `tau_f` or `tau_s`.
///
/// `tau_f` and `tau_s` are Möbius maps `(a w + b) / (c w + d)`; their stable
/// fixed point is `(a - d + sqrt((a-d)^2 + 4bc)) / 2c`.
pub fn stable_fixed_point(kind: OperatorKind, server: &ServerParams) -> Result<f64> {
    let c = &server.chain;
    let (p, q) = (c.p(), c.q());
    if kind == OperatorKind::Idle {
        return server.gamma();
    }
    if c.rho() == 0.0 || server.mu0 == server.mu1 || [p, q].iter().any(|&x| x == 0.0 || x == 1.0) {
        return Err(Error::DegenerateTransform(format!(
            "no hyperbolic fixed point for p = {p}, q = {q}, mu0 = {}, mu1 = {}",
            server.mu0, server.mu1
        )));
    }
    let (m0, m1) = match kind {
        OperatorKind::Failure => (1.0 - server.mu0, 1.0 - server.mu1),
        _ => (server.mu0, server.mu1),
    };
    let a = (1.0 - q) * m1 - p * m0;
    let b = p * m0;
    let cc = m1 - m0;
    let d = m0;
    let disc = (a - d) * (a - d) + 4.0 * b * cc;
    if disc < 0.0 {
        return Err(Error::DegenerateTransform(format!("negative discriminant {disc}")));
    }
    let root = (a - d + disc.sqrt()) / (2.0 * cc);
    if !(0.0..=1.0).contains(&root) {
        return Err(Error::DegenerateTransform(format!("fixed point {root} outside [0, 1]")));
    }
    Ok(root)
}

/// Closed interval of beliefs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64, slack: f64) -> bool {
        x >= self.lo - slack && x <= self.hi + slack
    }
}

/// Interval between the stable fixed points of `tau_f` and `tau_s`; every
/// belief trajectory is eventually confined to it.
pub fn belief_space(server: &ServerParams) -> Result<Interval> {
    let wf = stable_fixed_point(OperatorKind::Failure, server)?;
    let ws = stable_fixed_point(OperatorKind::Success, server)?;
    Ok(Interval { lo: wf.min(ws), hi: wf.max(ws) })
}

/// One filter step for the given scheme, using the exact posterior for the
/// queue scheme.
pub fn update_belief(
    scheme: ObservationScheme,
    action: Option<ServerId>,
    obs: &Observation,
    beliefs: BeliefPair,
    config: &SystemConfig,
) -> Result<BeliefPair> {
    update_belief_with(scheme, action, obs, beliefs, config, QueueUpdate::Posterior)
}

/// [`update_belief`] with an explicit rule for an unchanged queue.
pub fn update_belief_with(
    scheme: ObservationScheme,
    action: Option<ServerId>,
    obs: &Observation,
    beliefs: BeliefPair,
    config: &SystemConfig,
    rule: QueueUpdate,
) -> Result<BeliefPair> {
    if obs.selected != action {
        return Err(Error::Contract(format!(
            "observation refers to server {:?} but action was {:?}",
            obs.selected, action
        )));
    }
    let idle = |b: BeliefPair| BeliefPair {
        omega1: tau_n(b.omega1, &config.server1),
        omega2: tau_n(b.omega2, &config.server2),
    };
    let mismatch = || Err(Error::Contract(format!("payload {:?} does not belong to the {scheme} scheme", obs.payload)));

    if scheme == ObservationScheme::Full {
        return match obs.payload {
            Payload::BothStates(x) => Ok(BeliefPair {
                omega1: propagate_observed(x.x1, &config.server1),
                omega2: propagate_observed(x.x2, &config.server2),
            }),
            _ => mismatch(),
        };
    }

    let Some(served) = action else {
        // Empty queue: nothing is learnt about either environment.
        return match (scheme, obs.payload) {
            (_, Payload::Nothing) => Ok(idle(beliefs)),
            (ObservationScheme::Queue, Payload::QueueDelta(0 | 1)) => Ok(idle(beliefs)),
            _ => mismatch(),
        };
    };

    let server = config.server(served);
    let w = beliefs.get(served);
    let updated = match (scheme, obs.payload) {
        (ObservationScheme::None, Payload::Nothing) => return Ok(idle(beliefs)),
        (ObservationScheme::State, Payload::StateBit(good)) => propagate_observed(good, server),
        (ObservationScheme::Output, Payload::Success(true)) => tau_s(w, server)?,
        (ObservationScheme::Output, Payload::Success(false)) => tau_f(w, server)?,
        (ObservationScheme::Queue, Payload::QueueDelta(1)) => tau_f(w, server)?,
        (ObservationScheme::Queue, Payload::QueueDelta(0)) => tau_c_with(w, server, config.lambda, rule)?,
        (ObservationScheme::Queue, Payload::QueueDelta(-1)) => tau_s(w, server)?,
        _ => return mismatch(),
    };
    Ok(idle(beliefs).with(served, updated))
}
