use chrono::NaiveDate;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, Geometric, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("configs differ in more than the tracking mode: {0}")]
    NotComparable(String),
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        msg: msg.into(),
    }
}

/// A one-dimensional distribution. Session lengths round to at least 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistSpec {
    Fixed { value: f64 },
    /// Number of trials up to and including the first success; support 1, 2, ...
    Geometric { p: f64 },
    Exponential { mean: f64 },
    Uniform { min: f64, max: f64 },
    Empirical { values: Vec<f64>, weights: Vec<f64> },
}

impl DistSpec {
    pub fn validate(&self, field: &'static str) -> Result<(), ConfigError> {
        let finite = |x: f64| x.is_finite();
        match self {
            DistSpec::Fixed { value } if !finite(*value) || *value < 0.0 => Err(invalid(field, "fixed value must be >= 0")),
            DistSpec::Geometric { p } if !(*p > 0.0 && *p <= 1.0) => Err(invalid(field, "geometric p must be in (0, 1]")),
            DistSpec::Exponential { mean } if !(finite(*mean) && *mean > 0.0) => {
                Err(invalid(field, "exponential mean must be > 0"))
            }
            DistSpec::Uniform { min, max } if !(finite(*min) && finite(*max) && 0.0 <= *min && min <= max) => {
                Err(invalid(field, "uniform needs 0 <= min <= max"))
            }
            DistSpec::Empirical { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(invalid(field, "empirical values and weights must be non-empty and equal length"));
                }
                if values.iter().any(|v| !finite(*v) || *v < 0.0) {
                    return Err(invalid(field, "empirical values must be >= 0"));
                }
                check_weights(field, weights)
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            DistSpec::Fixed { value } => *value,
            DistSpec::Geometric { p } => 1.0 / p,
            DistSpec::Exponential { mean } => *mean,
            DistSpec::Uniform { min, max } => (min + max) / 2.0,
            DistSpec::Empirical { values, weights } => {
                let w: f64 = weights.iter().sum();
                values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / w
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DistSpec::Fixed { value } => *value,
            DistSpec::Geometric { p } => {
                if *p >= 1.0 {
                    1.0
                } else {
                    // rand_distr counts failures before the first success
                    Geometric::new(*p).expect("validated").sample(rng) as f64 + 1.0
                }
            }
            DistSpec::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            DistSpec::Uniform { min, max } => {
                if min == max {
                    *min
                } else {
                    Uniform::new(*min, *max).expect("validated").sample(rng)
                }
            }
            DistSpec::Empirical { values, weights } => {
                values[WeightedIndex::new(weights).expect("validated").sample(rng)]
            }
        }
    }
}

fn check_weights(field: &'static str, w: &[f64]) -> Result<(), ConfigError> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(field, "weights must be finite and non-negative"));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(invalid(field, "weights must not all be zero"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbPolicy {
    RoundRobin,
    Random,
    /// Random, proportional to `server_weights`.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    ServerSide,
    ClientEmulation,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::None, Mode::ServerSide, Mode::ClientEmulation];

    /// Requests reaching a log sink for each pageview.
    pub fn log_requests_per_pageview(self) -> u64 {
        match self {
            Mode::None => 0,
            Mode::ServerSide => 1,
            // page + tag script + beacon
            Mode::ClientEmulation => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::ServerSide => "server_side",
            Mode::ClientEmulation => "client_emulation",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "none" => Ok(Mode::None),
            "server_side" => Ok(Mode::ServerSide),
            "client_emulation" => Ok(Mode::ClientEmulation),
            other => Err(format!("unknown mode `{other}`; expected none, server_side or client_emulation")),
        }
    }
}

/// Modelled costs used for virtual-time response times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Extra server time per pageview for in-process capture.
    pub capture_ms: f64,
    /// Fixed cost of one extra HTTP round trip.
    pub round_trip_ms: f64,
    pub script_bytes: u64,
    pub beacon_bytes: u64,
    pub bytes_per_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            capture_ms: 0.5,
            round_trip_ms: 4.0,
            script_bytes: 50 * 1024,
            beacon_bytes: 1024,
            bytes_per_ms: 1250.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Active server ids.
    pub servers: Vec<u16>,
    pub lb_policy: LbPolicy,
    #[serde(default)]
    pub server_weights: Vec<f64>,
    /// Distinct visitors the sessions are drawn from.
    pub visitors: u64,
    pub total_sessions: u64,
    /// Pageviews per session.
    pub session_length_dist: DistSpec,
    /// Seconds between pageviews of a session; capped below the idle-warning time.
    pub think_time_dist: DistSpec,
    /// Page generation time in milliseconds.
    #[serde(default = "default_service_time")]
    pub service_time_dist: DistSpec,
    pub hour_profile: Vec<f64>,
    /// N/A, male, female; applies to authenticated visitors.
    pub sex_mix: Vec<f64>,
    /// In-house, in-country, out-country.
    pub origin_mix: Vec<f64>,
    /// Direct, main site, subdomain, external, search engine, social.
    pub referrer_mix: Vec<f64>,
    /// Share of visitors browsing without an account.
    #[serde(default = "default_guest_share")]
    pub guest_share: f64,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default = "default_date")]
    pub date: NaiveDate,
    #[serde(default = "default_services")]
    pub services: Vec<String>,
    #[serde(default)]
    pub cost_model: CostModel,
}

fn default_service_time() -> DistSpec {
    DistSpec::Exponential { mean: 60.0 }
}

fn default_guest_share() -> f64 {
    0.3
}

fn default_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 3, 14).expect("valid date")
}

fn default_services() -> Vec<String> {
    ["www", "obs", "ebs", "lms", "mail"].iter().map(|s| s.to_string()).collect()
}

pub const MAIN_SITE: &str = "www.example.edu";
pub const OWN_DOMAIN: &str = "example.edu";

impl SimConfig {
    /// Seven servers, homogeneous visitors, random balancing.
    pub fn homogeneous(total_sessions: u64, seed: u64) -> Self {
        Self {
            servers: (1..=7).collect(),
            lb_policy: LbPolicy::Random,
            server_weights: Vec::new(),
            visitors: total_sessions,
            total_sessions,
            session_length_dist: DistSpec::Geometric { p: 0.27 },
            think_time_dist: DistSpec::Exponential { mean: 40.0 },
            service_time_dist: default_service_time(),
            hour_profile: vec![1.0; 24],
            sex_mix: vec![0.1, 0.5, 0.4],
            origin_mix: vec![0.4, 0.5, 0.1],
            referrer_mix: vec![0.35, 0.1, 0.2, 0.1, 0.2, 0.05],
            guest_share: 0.3,
            seed,
            mode: Mode::None,
            date: default_date(),
            services: default_services(),
            cost_model: CostModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.servers.is_empty() {
            return Err(invalid("servers", "at least one server is required"));
        }
        let mut ids = self.servers.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.servers.len() {
            return Err(invalid("servers", "server ids must be distinct"));
        }
        if self.lb_policy == LbPolicy::Weighted {
            if self.server_weights.len() != self.servers.len() {
                return Err(invalid("server_weights", "weighted balancing needs one weight per server"));
            }
            check_weights("server_weights", &self.server_weights)?;
        }
        if self.visitors == 0 {
            return Err(invalid("visitors", "must be positive"));
        }
        self.session_length_dist.validate("session_length_dist")?;
        self.think_time_dist.validate("think_time_dist")?;
        self.service_time_dist.validate("service_time_dist")?;
        let sized = |field: &'static str, v: &[f64], n: usize| -> Result<(), ConfigError> {
            if v.len() != n {
                return Err(invalid(field, format!("expected {n} weights, got {}", v.len())));
            }
            check_weights(field, v)
        };
        sized("hour_profile", &self.hour_profile, 24)?;
        sized("sex_mix", &self.sex_mix, 3)?;
        sized("origin_mix", &self.origin_mix, 3)?;
        sized("referrer_mix", &self.referrer_mix, 6)?;
        if !(0.0..=1.0).contains(&self.guest_share) {
            return Err(invalid("guest_share", "must be within [0, 1]"));
        }
        if self.services.is_empty() || self.services.iter().any(|s| s.is_empty() || s.contains('.')) {
            return Err(invalid("services", "need at least one non-empty service label without dots"));
        }
        let c = &self.cost_model;
        if [c.capture_ms, c.round_trip_ms].iter().any(|x| !x.is_finite() || *x < 0.0) || !c.bytes_per_ms.is_finite() || c.bytes_per_ms <= 0.0 {
            return Err(invalid("cost_model", "costs must be non-negative and bandwidth positive"));
        }
        Ok(())
    }

    /// Checks that two configs differ at most in `mode`.
    pub fn comparable(&self, other: &SimConfig) -> Result<(), ConfigError> {
        let mut a = self.clone();
        a.mode = other.mode;
        if &a == other {
            Ok(())
        } else {
            let (x, y) = (
                serde_json::to_value(&a).expect("config serializes"),
                serde_json::to_value(other).expect("config serializes"),
            );
            let fields: Vec<String> = x
                .as_object()
                .expect("config is an object")
                .iter()
                .filter(|(k, v)| y.get(k.as_str()) != Some(v))
                .map(|(k, _)| k.clone())
                .collect();
            Err(ConfigError::NotComparable(fields.join(", ")))
        }
    }
}
