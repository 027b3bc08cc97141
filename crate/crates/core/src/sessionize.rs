//! Offline session reconstruction from raw request events.
//!
//! Visitor identity is the first available of token, user id, or a hash of
//! address and user agent. A visitor's events are split into sessions at the
//! first event, whenever the idle gap exceeds the timeout, and whenever the
//! authenticated user changes.

use std::collections::HashMap;
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::sync::OnceLock;

use chrono::{DateTime, Duration, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub timestamp: Timestamp,
    pub ip: Ipv4Addr,
    #[serde(default)]
    pub ua: String,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub referrer: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub user_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionizerConfig {
    pub timeout: Duration,
}

impl Default for SessionizerConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::minutes(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub visitor_key: String,
    pub start: Timestamp,
    pub end: Timestamp,
    /// Indices into the input slice, in session order.
    pub events: Vec<usize>,
}

impl Session {
    pub fn event_count(&self) -> usize {
        self.events.len()
    }
}

/// Short stable digest of address and user agent.
pub fn visitor_hash(ip: Ipv4Addr, ua: &str) -> String {
    let mut h = Sha256::new();
    h.update(ip.octets());
    h.update([0u8]);
    h.update(ua.as_bytes());
    hex::encode(&h.finalize()[..8])
}

pub fn resolve_visitor(e: &RawEvent) -> String {
    if let Some(t) = e.token.as_deref().filter(|t| !t.is_empty()) {
        format!("t:{t}")
    } else if let Some(u) = e.user_id {
        format!("u:{u}")
    } else {
        format!("h:{}", visitor_hash(e.ip, &e.ua))
    }
}

/// Groups events into sessions. Output is ordered by visitor key, then start;
/// events with equal timestamps keep their input order.
pub fn reconstruct_sessions(events: &[RawEvent], cfg: &SessionizerConfig) -> Vec<Session> {
    let keys: Vec<String> = events.iter().map(resolve_visitor).collect();
    // rank keys once so the main sort compares fixed-size tuples
    let mut distinct: Vec<&str> = keys.iter().map(String::as_str).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let rank: HashMap<&str, u32> = distinct.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
    let mut sortable: Vec<(u32, Timestamp, usize)> = events
        .iter()
        .enumerate()
        .map(|(i, e)| (rank[keys[i].as_str()], e.timestamp, i))
        .collect();
    sortable.sort_unstable();
    let order = sortable.into_iter().map(|(_, _, i)| i);

    let mut sessions: Vec<Session> = Vec::new();
    let mut prev: Option<usize> = None;
    for i in order {
        let e = &events[i];
        let continues = prev.is_some_and(|p| {
            keys[p] == keys[i] && e.timestamp - events[p].timestamp <= cfg.timeout && events[p].user_id == e.user_id
        });
        match sessions.last_mut() {
            Some(s) if continues => {
                s.end = e.timestamp;
                s.events.push(i);
            }
            _ => sessions.push(Session {
                visitor_key: keys[i].clone(),
                start: e.timestamp,
                end: e.timestamp,
                events: vec![i],
            }),
        }
        prev = Some(i);
    }
    sessions
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_ndjson_events<R: BufRead>(reader: R) -> Result<Vec<RawEvent>, ImportError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ImportError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn clf_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"^(\S+) \S+ (\S+) \[([^\]]+)\] "(?:\S+ )?(\S*)(?: [^"]*)?" \d{3} \S+(?: "([^"]*)" "([^"]*)")?"#,
        )
        .expect("valid regex")
    })
}

/// Best-effort parse of a combined-log-format line. Fields the format lacks
/// (token, user id) stay empty; a non-IPv4 client address is rejected.
pub fn parse_combined_log_line(line: &str) -> Option<RawEvent> {
    let caps = clf_regex().captures(line.trim())?;
    let ip: Ipv4Addr = caps.get(1)?.as_str().parse().ok()?;
    let timestamp = DateTime::parse_from_str(caps.get(3)?.as_str(), "%d/%b/%Y:%H:%M:%S %z")
        .ok()?
        .with_timezone(&Utc);
    let dash_empty = |s: Option<regex::Match>| match s.map(|m| m.as_str()) {
        None | Some("-") => String::new(),
        Some(v) => v.to_string(),
    };
    Some(RawEvent {
        timestamp,
        ip,
        ua: dash_empty(caps.get(6)),
        url: caps.get(4).map(|m| m.as_str().to_string()).unwrap_or_default(),
        referrer: dash_empty(caps.get(5)),
        token: None,
        user_id: None,
    })
}

/// Parses every line; unparseable lines are counted and skipped.
pub fn read_combined_log<R: BufRead>(reader: R) -> Result<(Vec<RawEvent>, usize), ImportError> {
    let mut events = Vec::new();
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_combined_log_line(&line) {
            Some(e) => events.push(e),
            None => skipped += 1,
        }
    }
    Ok((events, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(min: i64) -> Timestamp {
        DateTime::parse_from_rfc3339("2018-03-14T10:00:00Z").unwrap().with_timezone(&Utc) + Duration::minutes(min)
    }

    fn ev(min: i64, token: Option<&str>, user: Option<u64>) -> RawEvent {
        RawEvent {
            timestamp: at(min),
            ip: "10.0.0.1".parse().unwrap(),
            ua: "UA".into(),
            url: "/".into(),
            referrer: String::new(),
            token: token.map(String::from),
            user_id: user,
        }
    }

    #[test]
    fn visitor_precedence() {
        assert_eq!(resolve_visitor(&ev(0, Some("abc"), Some(540))), "t:abc");
        assert_eq!(resolve_visitor(&ev(0, None, Some(540))), "u:540");
        let mut a = ev(0, None, None);
        let b = a.clone();
        a.ua = "Other".into();
        assert_ne!(resolve_visitor(&a), resolve_visitor(&b));
        assert!(resolve_visitor(&b).starts_with("h:"));
    }

    #[test]
    fn gap_rule() {
        let events = vec![ev(50, Some("x"), None), ev(0, Some("x"), None), ev(10, Some("x"), None)];
        let s = reconstruct_sessions(&events, &SessionizerConfig::default());
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].events, vec![1, 2]);
        assert_eq!(s[1].events, vec![0]);
        assert_eq!((s[0].start, s[0].end), (at(0), at(10)));
    }

    #[test]
    fn exactly_timeout_gap_continues() {
        let events = vec![ev(0, Some("x"), None), ev(30, Some("x"), None)];
        assert_eq!(reconstruct_sessions(&events, &SessionizerConfig::default()).len(), 1);
    }

    #[test]
    fn single_and_empty() {
        let s = reconstruct_sessions(&[ev(0, None, None)], &SessionizerConfig::default());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].event_count(), 1);
        assert!(reconstruct_sessions(&[], &SessionizerConfig::default()).is_empty());
    }

    #[test]
    fn user_change_splits_token_stream() {
        let events = vec![ev(0, Some("x"), None), ev(1, Some("x"), Some(5)), ev(2, Some("x"), Some(5))];
        let s = reconstruct_sessions(&events, &SessionizerConfig::default());
        assert_eq!(s.iter().map(|s| s.event_count()).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn ua_change_does_not_split_token_stream() {
        let mut b = ev(1, Some("x"), None);
        b.ua = "Different".into();
        let s = reconstruct_sessions(&[ev(0, Some("x"), None), b], &SessionizerConfig::default());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn combined_log_format() {
        let line = r#"193.140.253.81 - - [14/Mar/2018:10:00:00 +0300] "GET /index.php?a=1 HTTP/1.1" 200 5120 "https://www.google.com.tr/" "Mozilla/5.0 (X11)""#;
        let e = parse_combined_log_line(line).unwrap();
        assert_eq!(e.ip.to_string(), "193.140.253.81");
        assert_eq!(e.timestamp, DateTime::parse_from_rfc3339("2018-03-14T07:00:00Z").unwrap());
        assert_eq!(e.url, "/index.php?a=1");
        assert_eq!(e.referrer, "https://www.google.com.tr/");
        assert_eq!(e.ua, "Mozilla/5.0 (X11)");

        let common = r#"10.0.0.2 - bob [14/Mar/2018:10:00:00 +0000] "GET / HTTP/1.0" 304 -"#;
        let e = parse_combined_log_line(common).unwrap();
        assert!(e.referrer.is_empty() && e.ua.is_empty());

        let (events, skipped) = read_combined_log(format!("{line}\ngarbage\n::1 - - [x] \"GET /\" 200 1\n").as_bytes()).unwrap();
        assert_eq!((events.len(), skipped), (1, 2));
    }

    #[test]
    fn ndjson_import() {
        let text = r#"{"timestamp":"2018-03-14T10:00:00Z","ip":"10.0.0.1","token":"a"}
{"timestamp":"2018-03-14T10:05:00Z","ip":"10.0.0.1","user_id":7,"ua":"x"}
"#;
        let events = read_ndjson_events(text.as_bytes()).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].user_id, Some(7));
        assert!(read_ndjson_events("{bad".as_bytes()).is_err());
    }
}
