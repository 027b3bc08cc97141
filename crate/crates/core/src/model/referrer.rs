use serde::{Deserialize, Serialize};
use url::Url;

use super::{config_lines, truncate_field};

const BUNDLED_ENGINES: &str = include_str!("../../data/search_engines.csv");
const BUNDLED_SOCIAL: &str = include_str!("../../data/social_hosts.txt");

/// Referrer class code stored in `log_ref_type`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum RefType {
    Direct = 0,
    MainSite = 1,
    Subdomain = 2,
    External = 3,
    SearchEngine = 4,
    Social = 5,
}

impl RefType {
    pub const ALL: [RefType; 6] = [
        Self::Direct,
        Self::MainSite,
        Self::Subdomain,
        Self::External,
        Self::SearchEngine,
        Self::Social,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::MainSite => "main_site",
            Self::Subdomain => "subdomain",
            Self::External => "external",
            Self::SearchEngine => "search_engine",
            Self::Social => "social",
        }
    }
}

impl From<RefType> for u8 {
    fn from(t: RefType) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for RefType {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| format!("invalid referrer type {v}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferrerInfo {
    pub ref_type: RefType,
    /// Display label (`log_ref`): engine name for search engines, else the host.
    pub ref_name: String,
    pub ref_host: String,
    pub search_key: String,
}

impl ReferrerInfo {
    pub fn direct() -> Self {
        Self {
            ref_type: RefType::Direct,
            ref_name: String::new(),
            ref_host: String::new(),
            search_key: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEngine {
    pub name: String,
    /// Either a registrable domain (`bing.com`, suffix match) or a label
    /// prefix ending in '.' (`google.`) that matches at any label boundary.
    pub host: String,
    pub query_param: String,
}

impl SearchEngine {
    fn matches(&self, host: &str) -> bool {
        if self.host.ends_with('.') {
            host.starts_with(&self.host) || host.contains(&format!(".{}", self.host))
        } else {
            domain_matches(host, &self.host)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferrerConfig {
    pub main_site: String,
    pub own_domains: Vec<String>,
    pub search_engines: Vec<SearchEngine>,
    pub social_hosts: Vec<String>,
}

impl ReferrerConfig {
    /// Site-specific hosts plus the bundled search-engine and social tables.
    pub fn with_bundled_tables(main_site: &str, own_domains: &[&str]) -> Self {
        Self {
            main_site: main_site.to_ascii_lowercase(),
            own_domains: own_domains.iter().map(|d| d.to_ascii_lowercase()).collect(),
            search_engines: parse_search_engines(BUNDLED_ENGINES),
            social_hosts: parse_host_list(BUNDLED_SOCIAL),
        }
    }
}

/// Parses `name,host,param` lines.
pub fn parse_search_engines(text: &str) -> Vec<SearchEngine> {
    config_lines(text)
        .filter_map(|line| {
            let mut parts = line.split(',').map(str::trim);
            let name = parts.next()?;
            let host = parts.next()?;
            let param = parts.next()?;
            Some(SearchEngine {
                name: name.to_string(),
                host: host.to_ascii_lowercase(),
                query_param: param.to_string(),
            })
        })
        .collect()
}

pub fn parse_host_list(text: &str) -> Vec<String> {
    config_lines(text).map(|l| l.to_ascii_lowercase()).collect()
}

fn domain_matches(host: &str, domain: &str) -> bool {
    host == domain
        || (host.len() > domain.len()
            && host.ends_with(domain)
            && host.as_bytes()[host.len() - domain.len() - 1] == b'.')
}

/// Classifies how a session arrived. Hosts owned by the site (the configured
/// domains and the landing host itself) are never counted as external.
pub fn classify_referrer(referrer_url: &str, landing_host: &str, cfg: &ReferrerConfig) -> ReferrerInfo {
    let raw = referrer_url.trim();
    if raw.is_empty() {
        return ReferrerInfo::direct();
    }
    let host = match Url::parse(raw).ok().and_then(|u| u.host_str().map(str::to_ascii_lowercase)) {
        Some(h) if !h.is_empty() => h,
        _ => {
            let host = truncate_field(raw);
            return ReferrerInfo {
                ref_type: RefType::External,
                ref_name: host.clone(),
                ref_host: host,
                search_key: String::new(),
            };
        }
    };
    let url = Url::parse(raw).expect("parsed above");
    let mut info = ReferrerInfo {
        ref_type: RefType::External,
        ref_name: truncate_field(&host),
        ref_host: truncate_field(&host),
        search_key: String::new(),
    };
    let landing = landing_host.to_ascii_lowercase();
    if host == cfg.main_site {
        info.ref_type = RefType::MainSite;
    } else if cfg.own_domains.iter().any(|d| domain_matches(&host, d))
        || (!landing.is_empty() && host == landing)
    {
        info.ref_type = RefType::Subdomain;
    } else if let Some(engine) = cfg.search_engines.iter().find(|e| e.matches(&host)) {
        info.ref_type = RefType::SearchEngine;
        info.ref_name = engine.name.clone();
        info.search_key = url
            .query_pairs()
            .find(|(k, _)| k == engine.query_param.as_str())
            .map(|(_, v)| truncate_field(v.trim()))
            .unwrap_or_default();
    } else if cfg.social_hosts.iter().any(|d| domain_matches(&host, d)) {
        info.ref_type = RefType::Social;
    }
    info
}
