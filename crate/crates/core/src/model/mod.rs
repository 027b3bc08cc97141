//! Request-context enrichment: the dimensions stored in session and pageview records.
//!
//! Every function in here is pure. Configuration tables (bot list, search engines,
//! social hosts, GeoIP ranges) are loaded once and shared read-only.

mod geoip;
mod origin;
mod profile;
mod referrer;
mod useragent;

pub use geoip::{geo_lookup, GeoEntry, GeoError, GeoTable, UNKNOWN_COUNTRY};
pub use origin::{classify_origin, classify_origin_by_country, Cidr, CidrParseError, OriginClass};
pub use profile::{ProfileDirectory, Sex, UserProfile};
pub use referrer::{classify_referrer, ReferrerConfig, ReferrerInfo, RefType, SearchEngine};
pub use useragent::{parse_user_agent, BotList, BrowserType, UserAgentInfo, UserAgentParser};

/// Upper bound for every free-text dimension field, in bytes.
pub const MAX_FIELD_BYTES: usize = 255;

/// Truncates `s` to at most [`MAX_FIELD_BYTES`] bytes on a char boundary.
pub fn truncate_field(s: &str) -> String {
    truncate_to(s, MAX_FIELD_BYTES)
}

pub(crate) fn truncate_to(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}

/// Iterates the non-empty, non-comment lines of a plain-text config file.
pub(crate) fn config_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_respects_char_boundaries() {
        let s = "ş".repeat(200); // 2 bytes each
        let t = truncate_field(&s);
        assert!(t.len() <= MAX_FIELD_BYTES);
        assert_eq!(t.len(), 254);
        assert_eq!(truncate_field("short"), "short");
    }
}
