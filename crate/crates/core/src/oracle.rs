//! Brute-force filtering by enumeration of environment paths.
//!
//! Independent of the operators in [`crate::belief`]: it multiplies transition
//! probabilities and observation likelihoods along every joint path of both
//! environments and normalises. Cost grows as `4^(T+1)`, so it is only meant
//! for short trajectories in tests and in the `validate` command.

use rand::Rng;

use crate::belief::{update_belief, BeliefPair, Observation, ObservationScheme, Payload};
use crate::error::{Error, Result};
use crate::model::{step_environment, EnvState, ServerId, SystemConfig};

/// Longest trajectory accepted by [`exact_filter_oracle`].
pub const MAX_ORACLE_STEPS: usize = 12;

fn bernoulli(p: f64, x: bool) -> f64 {
    if x {
        p
    } else {
        1.0 - p
    }
}

fn likelihood(
    scheme: ObservationScheme,
    action: Option<ServerId>,
    obs: &Observation,
    x: [bool; 2],
    config: &SystemConfig,
) -> Result<f64> {
    let mu = |id: ServerId| {
        let s = config.server(id);
        if x[id.index()] {
            s.mu1
        } else {
            s.mu0
        }
    };
    let lam = config.lambda;
    let bad = || {
        Err(Error::Contract(format!("payload {:?} with action {action:?} is not a {scheme} observation", obs.payload)))
    };
    Ok(match (scheme, action, obs.payload) {
        (ObservationScheme::Full, _, Payload::BothStates(s)) => ((s.x1 == x[0]) && (s.x2 == x[1])) as u8 as f64,
        (_, None, Payload::Nothing) => 1.0,
        (ObservationScheme::Queue, None, Payload::QueueDelta(d @ (0 | 1))) => bernoulli(lam, d == 1),
        (ObservationScheme::None, Some(_), Payload::Nothing) => 1.0,
        (ObservationScheme::State, Some(u), Payload::StateBit(b)) => (x[u.index()] == b) as u8 as f64,
        (ObservationScheme::Output, Some(u), Payload::Success(ok)) => bernoulli(mu(u), ok),
        (ObservationScheme::Queue, Some(u), Payload::QueueDelta(d)) => {
            let m = mu(u);
            match d {
                1 => lam * (1.0 - m),
                -1 => (1.0 - lam) * m,
                0 => (1.0 - lam) * (1.0 - m) + lam * m,
                _ => return bad(),
            }
        }
        _ => return bad(),
    })
}

/// `P(X_j(T) = 1 | Y(0), ..., Y(T-1))` for both servers, where `T` is the
/// number of observed slots and `X(0)` has independent good-state
/// probabilities given by `prior`.
pub fn exact_filter_oracle(
    scheme: ObservationScheme,
    actions: &[Option<ServerId>],
    observations: &[Observation],
    config: &SystemConfig,
    prior: BeliefPair,
) -> Result<BeliefPair> {
    let t_len = actions.len();
    if observations.len() != t_len {
        return Err(Error::Dimension(format!("{} actions but {} observations", t_len, observations.len())));
    }
    if t_len > MAX_ORACLE_STEPS {
        return Err(Error::Resource(format!(
            "trajectory of length {t_len} exceeds the enumeration limit {MAX_ORACLE_STEPS}"
        )));
    }
    let trans = [config.server1.chain.transition(), config.server2.chain.transition()];
    let likes: Vec<[f64; 4]> = (0..t_len)
        .map(|t| {
            let mut row = [0.0; 4];
            for (code, slot) in row.iter_mut().enumerate() {
                let x = [code & 2 != 0, code & 1 != 0];
                *slot = likelihood(scheme, actions[t], &observations[t], x, config)?;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let n_states = t_len + 1;
    let mut total = 0.0;
    let mut good = [0.0; 2];
    // Each path is a base-4 number; digit t encodes (X1(t), X2(t)).
    for path in 0..(1u64 << (2 * n_states)) {
        let digit = |t: usize| ((path >> (2 * t)) & 3) as usize;
        let x0 = digit(0);
        let mut w = bernoulli(prior.omega1, x0 & 2 != 0) * bernoulli(prior.omega2, x0 & 1 != 0);
        for (t, like) in likes.iter().enumerate() {
            if w == 0.0 {
                break;
            }
            let (a, b) = (digit(t), digit(t + 1));
            w *= like[a];
            w *= trans[0][(a >> 1) & 1][(b >> 1) & 1] * trans[1][a & 1][b & 1];
        }
        if w == 0.0 {
            continue;
        }
        let last = digit(t_len);
        total += w;
        if last & 2 != 0 {
            good[0] += w;
        }
        if last & 1 != 0 {
            good[1] += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateObservation("observation sequence has probability zero".to_string()));
    }
    Ok(BeliefPair { omega1: good[0] / total, omega2: good[1] / total })
}

/// A random action/observation sequence drawn from the model.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prior: BeliefPair,
    pub actions: Vec<Option<ServerId>>,
    pub observations: Vec<Observation>,
}

/// Draws `X(0)` from `prior`, then for each slot a uniformly random action
/// (idle with probability 0.1) and the observation it produces.
pub fn sample_trajectory<R: Rng>(
    scheme: ObservationScheme,
    config: &SystemConfig,
    prior: BeliefPair,
    len: usize,
    rng: &mut R,
) -> Trajectory {
    let mut x = EnvState::new(rng.gen::<f64>() < prior.omega1, rng.gen::<f64>() < prior.omega2);
    let mut actions = Vec::with_capacity(len);
    let mut observations = Vec::with_capacity(len);
    for _ in 0..len {
        let action = if rng.gen::<f64>() < 0.1 {
            None
        } else if rng.gen::<bool>() {
            Some(ServerId::One)
        } else {
            Some(ServerId::Two)
        };
        let arrival = rng.gen::<f64>() < config.lambda;
        let success = action.is_some_and(|u| rng.gen::<f64>() < config.server(u).mu(x.get(u)));
        let payload = match (scheme, action) {
            (ObservationScheme::Full, _) => Payload::BothStates(x),
            (ObservationScheme::Queue, None) => Payload::QueueDelta(arrival as i8),
            (_, None) | (ObservationScheme::None, _) => Payload::Nothing,
            (ObservationScheme::State, Some(u)) => Payload::StateBit(x.get(u)),
            (ObservationScheme::Output, Some(_)) => Payload::Success(success),
            (ObservationScheme::Queue, Some(_)) => Payload::QueueDelta(arrival as i8 - success as i8),
        };
        actions.push(action);
        observations.push(Observation::new(action, payload));
        x = step_environment(x, config, rng.gen(), rng.gen());
    }
    Trajectory { prior, actions, observations }
}

/// Largest absolute gap between the recursive filter and enumeration.
pub fn filter_gap(scheme: ObservationScheme, config: &SystemConfig, traj: &Trajectory) -> Result<f64> {
    let mut b = traj.prior;
    for (a, o) in traj.actions.iter().zip(&traj.observations) {
        b = update_belief(scheme, *a, o, b, config)?;
    }
    let exact = exact_filter_oracle(scheme, &traj.actions, &traj.observations, config, traj.prior)?;
    Ok((b.omega1 - exact.omega1).abs().max((b.omega2 - exact.omega2).abs()))
}
