//! Deployment configuration: a TOML file, then `CAWAL_*` environment overrides.

use std::path::{Path, PathBuf};

use cawal_core::capture::CaptureConfig;
use cawal_core::clock::EngineTz;
use cawal_core::extract::ExtractConfig;
use cawal_core::model::{Cidr, GeoTable, ProfileDirectory, ReferrerConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("loading profiles: {0}")]
    Profiles(String),
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub listen: String,
    /// Bearer token required on every API call.
    pub token: String,
    /// Above this many open sessions, snapshots are served from a cache.
    pub snapshot_cache_threshold: usize,
    pub snapshot_cache_ms: u64,
    pub sweep_interval_s: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8787".into(),
            token: String::new(),
            snapshot_cache_threshold: 10_000,
            snapshot_cache_ms: 1000,
            sweep_interval_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CawalConfig {
    /// Root for logs/, analytics/, warehouse/ and sessions/.
    pub data_dir: PathBuf,
    /// Overrides `data_dir/sessions`, where the session store is saved.
    pub session_store: Option<PathBuf>,
    /// Overrides `data_dir/warehouse`.
    pub warehouse: Option<PathBuf>,
    pub tz_offset_minutes: i32,
    pub home_country: String,
    pub in_house: Vec<Cidr>,
    /// Optional `user_id,username,sex` CSV.
    pub profiles: Option<PathBuf>,
    pub slow_page_ms: f64,
    /// Host of the main site, for referrer classification.
    pub main_site: String,
    /// Registrable domains whose hosts count as subdomains.
    pub own_domains: Vec<String>,
    pub monitor: MonitorConfig,
}

impl Default for CawalConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("cawal-data"),
            session_store: None,
            warehouse: None,
            tz_offset_minutes: 0,
            home_country: "TR".into(),
            in_house: Vec::new(),
            profiles: None,
            slow_page_ms: 1000.0,
            main_site: "www.example.edu".into(),
            own_domains: vec!["example.edu".into()],
            monitor: MonitorConfig::default(),
        }
    }
}

impl CawalConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    /// Reads `path` if given, then applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `CAWAL_*` overrides from `vars`; other variables are ignored.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| invalid(key, format!("not a number: {v:?}")))
        }
        for (key, v) in vars {
            match key.as_str() {
                "CAWAL_DATA_DIR" => self.data_dir = PathBuf::from(v),
                "CAWAL_SESSION_STORE" => self.session_store = Some(PathBuf::from(v)),
                "CAWAL_WAREHOUSE" => self.warehouse = Some(PathBuf::from(v)),
                "CAWAL_TZ_OFFSET_MINUTES" => self.tz_offset_minutes = num(&key, &v)?,
                "CAWAL_HOME_COUNTRY" => self.home_country = v,
                "CAWAL_IN_HOUSE" => {
                    self.in_house = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|e: cawal_core::model::CidrParseError| invalid(&key, e.to_string())))
                        .collect::<Result<_, _>>()?
                }
                "CAWAL_PROFILES" => self.profiles = Some(PathBuf::from(v)),
                "CAWAL_SLOW_PAGE_MS" => self.slow_page_ms = num(&key, &v)?,
                "CAWAL_MAIN_SITE" => self.main_site = v,
                "CAWAL_OWN_DOMAINS" => {
                    self.own_domains = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
                }
                "CAWAL_LISTEN" => self.monitor.listen = v,
                "CAWAL_TOKEN" => self.monitor.token = v,
                "CAWAL_SNAPSHOT_CACHE_THRESHOLD" => self.monitor.snapshot_cache_threshold = num(&key, &v)?,
                "CAWAL_SNAPSHOT_CACHE_MS" => self.monitor.snapshot_cache_ms = num(&key, &v)?,
                "CAWAL_SWEEP_INTERVAL_S" => self.monitor.sweep_interval_s = num(&key, &v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if EngineTz::from_offset_minutes(self.tz_offset_minutes).is_none() {
            return Err(invalid("tz_offset_minutes", "must be within +-24h"));
        }
        if self.home_country.len() != 2 {
            return Err(invalid("home_country", "expected a two-letter country code"));
        }
        if !(self.slow_page_ms.is_finite() && self.slow_page_ms >= 0.0) {
            return Err(invalid("slow_page_ms", "must be >= 0"));
        }
        if self.main_site.is_empty() {
            return Err(invalid("main_site", "must not be empty"));
        }
        if self.monitor.sweep_interval_s == 0 {
            return Err(invalid("monitor.sweep_interval_s", "must be positive"));
        }
        Ok(())
    }

    pub fn tz(&self) -> EngineTz {
        EngineTz::from_offset_minutes(self.tz_offset_minutes).unwrap_or_else(EngineTz::utc)
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.data_dir.join("logs")
    }

    pub fn analytics_dir(&self) -> PathBuf {
        self.data_dir.join("analytics")
    }

    pub fn warehouse_dir(&self) -> PathBuf {
        self.warehouse.clone().unwrap_or_else(|| self.data_dir.join("warehouse"))
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.session_store.clone().unwrap_or_else(|| self.data_dir.join("sessions"))
    }

    pub fn job_log_path(&self) -> PathBuf {
        self.data_dir.join("nightly.log")
    }

    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            tz: self.tz(),
            in_house: self.in_house.clone(),
            home_country: self.home_country.clone(),
            slow_page_ms: self.slow_page_ms,
        }
    }

    pub fn capture_config(&self) -> CaptureConfig {
        let own: Vec<&str> = self.own_domains.iter().map(String::as_str).collect();
        CaptureConfig::new(ReferrerConfig::with_bundled_tables(&self.main_site, &own), GeoTable::bundled())
    }

    pub fn load_profiles(&self) -> Result<ProfileDirectory, ConfigError> {
        match &self.profiles {
            Some(p) => ProfileDirectory::load_csv(p).map_err(|e| ConfigError::Profiles(format!("{}: {e}", p.display()))),
            None => Ok(ProfileDirectory::default()),
        }
    }
}
