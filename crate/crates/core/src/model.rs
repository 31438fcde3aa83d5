//! System parameters and closed-form quantities.
//!
//! Each server's environment is a two-state Markov chain with transition
//! matrix
//!
//! ```text
//!     [ 1-p   p  ]
//!     [  q   1-q ]
//! ```
//!
//! equivalently described by its stationary probability of the good state
//! `gamma = p / (p + q)` and its second eigenvalue `rho = 1 - p - q`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PARAM_TOL: f64 = 1e-12;

fn check_probability(name: &str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) || value.is_nan() {
        return Err(Error::Domain(format!("{name} = {value} is outside [0, 1]")));
    }
    Ok(())
}

/// Server identifier. Server 2 is the one with the wider spread of success rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ServerId {
    One,
    Two,
}

impl ServerId {
    pub const BOTH: [ServerId; 2] = [ServerId::One, ServerId::Two];

    pub fn index(self) -> usize {
        match self {
            ServerId::One => 0,
            ServerId::Two => 1,
        }
    }

    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn other(self) -> ServerId {
        match self {
            ServerId::One => ServerId::Two,
            ServerId::Two => ServerId::One,
        }
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Two-state environment chain of one server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelChain {
    p: f64,
    q: f64,
}

impl ChannelChain {
    /// Chain with `p = P(0 -> 1)` and `q = P(1 -> 0)`.
    pub fn new(p: f64, q: f64) -> Result<Self> {
        check_probability("p", p)?;
        check_probability("q", q)?;
        Ok(Self { p, q })
    }

    /// Builds the chain from its stationary good-state probability and
    /// second eigenvalue.
    ///
    /// `rho` must lie in `[1 - min(1/gamma, 1/(1-gamma)), 1]`, which is exactly
    /// the range for which `p` and `q` are probabilities.
    pub fn from_gamma_rho(gamma: f64, rho: f64) -> Result<Self> {
        check_probability("gamma", gamma)?;
        let lower = 1.0 - f64::min(1.0 / gamma, 1.0 / (1.0 - gamma));
        if rho.is_nan() || rho > 1.0 + PARAM_TOL {
            return Err(Error::Domain(format!("rho = {rho} exceeds the upper bound 1")));
        }
        if rho < lower - PARAM_TOL {
            return Err(Error::Domain(format!(
                "rho = {rho} is below the lower bound 1 - min(1/gamma, 1/(1-gamma)) = {lower}"
            )));
        }
        let p = (gamma * (1.0 - rho)).clamp(0.0, 1.0);
        let q = ((1.0 - gamma) * (1.0 - rho)).clamp(0.0, 1.0);
        Ok(Self { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Second eigenvalue of the transition matrix.
    pub fn rho(&self) -> f64 {
        1.0 - self.p - self.q
    }

    /// Stationary probability of state 1. Undefined for the frozen chain `p = q = 0`.
    pub fn gamma(&self) -> Result<f64> {
        let s = self.p + self.q;
        if s <= 0.0 {
            return Err(Error::Domain("gamma is undefined for a chain with p + q = 0".to_string()));
        }
        Ok(self.p / s)
    }

    pub fn to_gamma_rho(&self) -> Result<(f64, f64)> {
        Ok((self.gamma()?, self.rho()))
    }

    /// Row-stochastic transition matrix indexed `[from][to]`.
    pub fn transition(&self) -> [[f64; 2]; 2] {
        [[1.0 - self.p, self.p], [self.q, 1.0 - self.q]]
    }

    /// One transition driven by a uniform draw `u` in `[0, 1)`.
    pub fn step(&self, good: bool, u: f64) -> bool {
        if good {
            u >= self.q
        } else {
            u < self.p
        }
    }
}

/// A server: environment chain plus success probabilities in each state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerParams {
    pub chain: ChannelChain,
    pub mu0: f64,
    pub mu1: f64,
}

impl ServerParams {
    pub fn new(chain: ChannelChain, mu0: f64, mu1: f64) -> Result<Self> {
        check_probability("mu0", mu0)?;
        check_probability("mu1", mu1)?;
        if mu0 > mu1 {
            return Err(Error::Domain(format!("mu0 = {mu0} exceeds mu1 = {mu1}; state 1 must be the good state")));
        }
        Ok(Self { chain, mu0, mu1 })
    }

    /// Success probability in environment state `good`.
    pub fn mu(&self, good: bool) -> f64 {
        if good {
            self.mu1
        } else {
            self.mu0
        }
    }

    pub fn gamma(&self) -> Result<f64> {
        self.chain.gamma()
    }

    /// Stationary mean and variance of the per-slot service indicator.
    pub fn stationary_moments(&self) -> Result<(f64, f64)> {
        let g = self.gamma()?;
        let gb = 1.0 - g;
        let mean = gb * self.mu0 + g * self.mu1;
        let spread = self.mu1 - self.mu0;
        let var = gb * self.mu0 * (1.0 - self.mu0) + g * self.mu1 * (1.0 - self.mu1) + g * gb * spread * spread;
        Ok((mean, var))
    }
}

/// Free-function form of [`ServerParams::stationary_moments`].
pub fn stationary_moments(server: &ServerParams) -> Result<(f64, f64)> {
    server.stationary_moments()
}

/// Arrival rate plus the two servers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemConfig {
    pub lambda: f64,
    pub server1: ServerParams,
    pub server2: ServerParams,
}

impl SystemConfig {
    /// Validated configuration; the server ordering is enforced.
    pub fn new(lambda: f64, server1: ServerParams, server2: ServerParams) -> Result<Self> {
        let cfg = Self::new_unordered(lambda, server1, server2)?;
        cfg.check_ordering()?;
        Ok(cfg)
    }

    /// Validates ranges only. Use when exploring configurations outside the
    /// ordering `mu0(2) <= mu0(1) < mu1(1) <= mu1(2)`.
    pub fn new_unordered(lambda: f64, server1: ServerParams, server2: ServerParams) -> Result<Self> {
        check_probability("lambda", lambda)?;
        Ok(Self { lambda, server1, server2 })
    }

    /// Two identical servers with `gamma = 0.5`, `mu0 = 0.2`, `mu1 = 0.8`.
    pub fn benchmark(rho1: f64, rho2: f64, lambda: f64) -> Result<Self> {
        let s1 = ServerParams::new(ChannelChain::from_gamma_rho(0.5, rho1)?, 0.2, 0.8)?;
        let s2 = ServerParams::new(ChannelChain::from_gamma_rho(0.5, rho2)?, 0.2, 0.8)?;
        Self::new(lambda, s1, s2)
    }

    pub fn server(&self, id: ServerId) -> &ServerParams {
        match id {
            ServerId::One => &self.server1,
            ServerId::Two => &self.server2,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        check_probability("lambda", lambda)?;
        self.lambda = lambda;
        Ok(self)
    }

    /// Checks `mu0(2) <= mu0(1) < mu1(1) <= mu1(2)` and names the first
    /// violated inequality.
    pub fn check_ordering(&self) -> Result<()> {
        let (a, b) = (&self.server1, &self.server2);
        if b.mu0 > a.mu0 {
            return Err(Error::Ordering(format!("mu0(2) <= mu0(1) fails: {} > {}", b.mu0, a.mu0)));
        }
        if a.mu0 >= a.mu1 {
            return Err(Error::Ordering(format!("mu0(1) < mu1(1) fails: {} >= {}", a.mu0, a.mu1)));
        }
        if a.mu1 > b.mu1 {
            return Err(Error::Ordering(format!("mu1(1) <= mu1(2) fails: {} > {}", a.mu1, b.mu1)));
        }
        Ok(())
    }

    /// True when every inequality of the server ordering is strict.
    pub fn strictly_ordered(&self) -> bool {
        let (a, b) = (&self.server1, &self.server2);
        b.mu0 < a.mu0 && a.mu0 < a.mu1 && a.mu1 < b.mu1
    }

    /// Both servers share all parameters.
    pub fn identical_servers(&self) -> bool {
        self.server1 == self.server2
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ConfigDoc = serde_json::from_str(s)?;
        doc.into_config()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_doc(&self) -> ConfigDoc {
        let side = |s: &ServerParams| ServerDoc {
            gamma: None,
            rho: None,
            p: Some(s.chain.p()),
            q: Some(s.chain.q()),
            mu0: s.mu0,
            mu1: s.mu1,
        };
        ConfigDoc {
            lambda: self.lambda,
            server1: side(&self.server1),
            server2: side(&self.server2),
            allow_unordered: self.check_ordering().is_err(),
        }
    }
}

/// Upper bound of the stability region when no environment information is
/// available: always use the server with the higher stationary mean.
pub fn mu_star_no(config: &SystemConfig) -> Result<f64> {
    let (m1, _) = config.server1.stationary_moments()?;
    let (m2, _) = config.server2.stationary_moments()?;
    Ok(m1.max(m2))
}

/// Stability bound with full environment information, valid under the server
/// ordering: server 1 is used only when both servers are in state 0.
pub fn mu_star_full(config: &SystemConfig) -> Result<f64> {
    config.check_ordering()?;
    let g1 = config.server1.gamma()?;
    let g2 = config.server2.gamma()?;
    let (a, b) = (&config.server1, &config.server2);
    Ok((1.0 - g1) * (1.0 - g2) * a.mu0 + g2 * b.mu1 + g1 * (1.0 - g2) * a.mu1)
}

/// Environment states of both servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EnvState {
    pub x1: bool,
    pub x2: bool,
}

impl EnvState {
    pub fn new(x1: bool, x2: bool) -> Self {
        Self { x1, x2 }
    }

    pub fn get(&self, id: ServerId) -> bool {
        match id {
            ServerId::One => self.x1,
            ServerId::Two => self.x2,
        }
    }

    /// Index in `0..4` with server 1 as the high bit.
    pub fn index(&self) -> usize {
        (self.x1 as usize) * 2 + self.x2 as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self { x1: i & 2 != 0, x2: i & 1 != 0 }
    }
}

/// Advances both environments independently using one uniform draw per server.
pub fn step_environment(state: EnvState, config: &SystemConfig, u1: f64, u2: f64) -> EnvState {
    EnvState { x1: config.server1.chain.step(state.x1, u1), x2: config.server2.chain.step(state.x2, u2) }
}

/// JSON form of one server. Exactly one of `(gamma, rho)` or `(p, q)` must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    pub mu0: f64,
    pub mu1: f64,
}

impl ServerDoc {
    fn into_params(self, name: &str) -> Result<ServerParams> {
        let chain = match (self.gamma, self.rho, self.p, self.q) {
            (Some(g), Some(r), None, None) => ChannelChain::from_gamma_rho(g, r)?,
            (None, None, Some(p), Some(q)) => ChannelChain::new(p, q)?,
            _ => return Err(Error::Config(format!("{name}: give exactly one of {{gamma, rho}} or {{p, q}}"))),
        };
        ServerParams::new(chain, self.mu0, self.mu1)
    }
}

/// JSON configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub lambda: f64,
    pub server1: ServerDoc,
    pub server2: ServerDoc,
    #[serde(default)]
    pub allow_unordered: bool,
}

impl ConfigDoc {
    pub fn into_config(self) -> Result<SystemConfig> {
        let s1 = self.server1.into_params("server1")?;
        let s2 = self.server2.into_params("server2")?;
        if self.allow_unordered {
            SystemConfig::new_unordered(self.lambda, s1, s2)
        } else {
            SystemConfig::new(self.lambda, s1, s2)
        }
    }
}
