//! Shared live-session state for every server of the farm.
//!
//! One logical store serves all servers, so a visitor whose requests land on
//! different servers stays in one session. Every mutation happens under a
//! single lock, which makes each operation atomic per visitor key.
//!
//! Lifecycle: `active -> warned -> active` (continue), `active -> warned ->
//! closed(window_close_timeout)`, `active|warned -> closed(explicit|kicked)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{EngineTz, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionPolicy {
    pub warn_after: Duration,
    pub grace: Duration,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        Self {
            warn_after: Duration::minutes(25),
            grace: Duration::minutes(5),
        }
    }
}

impl SessionPolicy {
    pub fn new(warn_after: Duration, grace: Duration) -> Result<Self, StoreError> {
        if warn_after <= Duration::zero() || grace <= Duration::zero() {
            return Err(StoreError::InvalidPolicy);
        }
        Ok(Self { warn_after, grace })
    }

    /// Total inactivity allowed before the session is closed.
    pub fn timeout(&self) -> Duration {
        self.warn_after + self.grace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Warned,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogoutType {
    None,
    Explicit,
    WindowCloseTimeout,
    Kicked,
}

impl LogoutType {
    pub const ALL: [LogoutType; 4] = [Self::None, Self::Explicit, Self::WindowCloseTimeout, Self::Kicked];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveSession {
    pub session_id: String,
    pub visitor_key: String,
    pub user_id: Option<u64>,
    pub ip: Ipv4Addr,
    /// Server that handled the most recent request.
    pub server_id: u16,
    pub service: String,
    pub started_at: Timestamp,
    pub last_activity: Timestamp,
    pub state: SessionState,
    pub logout_type: LogoutType,
    pub closed_at: Option<Timestamp>,
    pub pageview_count: u64,
    /// Requests begun against this session; the next sequence number is this + 1.
    pub requests_started: u64,
}

impl LiveSession {
    pub fn is_open(&self) -> bool {
        self.state != SessionState::Closed
    }

    pub fn is_guest(&self) -> bool {
        self.user_id.is_none()
    }

    fn close(&mut self, logout: LogoutType, now: Timestamp) {
        self.state = SessionState::Closed;
        self.logout_type = logout;
        self.closed_at = Some(now.max(self.last_activity));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    #[serde(alias = "user")]
    BanUser,
    #[serde(alias = "ip")]
    BanIp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlagKey {
    User(u64),
    Ip(Ipv4Addr),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminFlag {
    pub kind: FlagKind,
    pub key: FlagKey,
    pub issued_at: Timestamp,
}

impl AdminFlag {
    pub fn ban_user(user_id: u64, issued_at: Timestamp) -> Self {
        Self {
            kind: FlagKind::BanUser,
            key: FlagKey::User(user_id),
            issued_at,
        }
    }

    pub fn ban_ip(ip: Ipv4Addr, issued_at: Timestamp) -> Self {
        Self {
            kind: FlagKind::BanIp,
            key: FlagKey::Ip(ip),
            issued_at,
        }
    }

    fn is_well_formed(&self) -> bool {
        matches!(
            (self.kind, self.key),
            (FlagKind::BanUser, FlagKey::User(_)) | (FlagKind::BanIp, FlagKey::Ip(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagAck {
    Created,
    Replaced,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("request rejected by {:?} flag", .0.kind)]
    Banned(AdminFlag),
    #[error("session store unavailable")]
    Unavailable,
    #[error("session {0} is closed or unknown")]
    Stale(String),
    #[error("logout type {0:?} cannot be set by close()")]
    InvalidLogoutType(LogoutType),
    #[error("flag kind does not match its key")]
    MalformedFlag,
    #[error("warn_after and grace must be positive")]
    InvalidPolicy,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StoreError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Self::Unavailable)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRequest {
    pub visitor_key: String,
    pub user_id: Option<u64>,
    pub ip: Ipv4Addr,
    pub server_id: u16,
    pub service: String,
}

#[derive(Debug, Clone)]
pub struct Joined {
    pub session: LiveSession,
    pub created: bool,
    /// 1-based sequence number allocated to this request.
    pub seq: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub warned: Vec<LiveSession>,
    pub closed: Vec<LiveSession>,
}

#[derive(Debug, Default)]
struct Inner {
    sessions: HashMap<String, LiveSession>,
    open_by_visitor: HashMap<String, String>,
    flags: BTreeMap<(FlagKind, FlagKey), AdminFlag>,
    // every transition into `closed`, drained by the capture layer
    closed_feed: Vec<LiveSession>,
    counter: u64,
    unavailable: bool,
}

pub struct SessionStore {
    policy: SessionPolicy,
    id_seed: u64,
    inner: Mutex<Inner>,
}

impl SessionStore {
    /// Store whose session ids are derived from `seed`; equal seeds and equal
    /// call sequences produce equal ids.
    pub fn with_seed(policy: SessionPolicy, seed: u64) -> Self {
        Self {
            policy,
            id_seed: seed,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn new(policy: SessionPolicy) -> Self {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or_default();
        Self::with_seed(policy, nanos ^ ((std::process::id() as u64) << 32))
    }

    pub fn policy(&self) -> SessionPolicy {
        self.policy
    }

    /// Simulates losing the backing store; every operation fails until restored.
    pub fn set_available(&self, available: bool) {
        self.inner.lock().unavailable = !available;
    }

    fn next_id(&self, inner: &mut Inner) -> String {
        inner.counter += 1;
        let mut h = Sha256::new();
        h.update(self.id_seed.to_le_bytes());
        h.update(inner.counter.to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }

    fn check_flags(inner: &Inner, user_id: Option<u64>, ip: Ipv4Addr) -> Result<(), StoreError> {
        if let Some(uid) = user_id {
            if let Some(f) = inner.flags.get(&(FlagKind::BanUser, FlagKey::User(uid))) {
                return Err(StoreError::Banned(f.clone()));
            }
        }
        if let Some(f) = inner.flags.get(&(FlagKind::BanIp, FlagKey::Ip(ip))) {
            return Err(StoreError::Banned(f.clone()));
        }
        Ok(())
    }

    fn expire_if_idle(&self, inner: &mut Inner, sid: &str, now: Timestamp) -> bool {
        let timeout = self.policy.timeout();
        let Some(s) = inner.sessions.get_mut(sid) else {
            return false;
        };
        if s.is_open() && now - s.last_activity >= timeout {
            s.close(LogoutType::WindowCloseTimeout, s.last_activity + timeout);
            let closed = s.clone();
            inner.open_by_visitor.remove(&closed.visitor_key);
            inner.closed_feed.push(closed);
            return true;
        }
        false
    }

    /// Joins the visitor's open session, whichever server handles the request,
    /// or starts a new one.
    pub fn open_or_join(&self, req: JoinRequest, now: Timestamp) -> Result<Joined, StoreError> {
        let mut inner = self.inner.lock();
        if inner.unavailable {
            return Err(StoreError::Unavailable);
        }
        Self::check_flags(&inner, req.user_id, req.ip)?;

        if let Some(sid) = inner.open_by_visitor.get(&req.visitor_key).cloned() {
            if !self.expire_if_idle(&mut inner, &sid, now) {
                let s = inner.sessions.get_mut(&sid).expect("indexed session exists");
                s.last_activity = s.last_activity.max(now);
                s.state = SessionState::Active;
                s.server_id = req.server_id;
                s.service = req.service;
                s.ip = req.ip;
                s.requests_started += 1;
                return Ok(Joined {
                    seq: s.requests_started,
                    session: s.clone(),
                    created: false,
                });
            }
        }

        let session_id = self.next_id(&mut inner);
        let session = LiveSession {
            session_id: session_id.clone(),
            visitor_key: req.visitor_key.clone(),
            user_id: req.user_id,
            ip: req.ip,
            server_id: req.server_id,
            service: req.service,
            started_at: now,
            last_activity: now,
            state: SessionState::Active,
            logout_type: LogoutType::None,
            closed_at: None,
            pageview_count: 0,
            requests_started: 1,
        };
        inner.open_by_visitor.insert(req.visitor_key, session_id.clone());
        inner.sessions.insert(session_id, session.clone());
        Ok(Joined {
            session,
            created: true,
            seq: 1,
        })
    }

    /// Records activity; a warned session returns to active (the "continue" signal).
    pub fn touch(&self, session_id: &str, now: Timestamp) -> Result<SessionState, StoreError> {
        let mut inner = self.inner.lock();
        if inner.unavailable {
            return Err(StoreError::Unavailable);
        }
        if self.expire_if_idle(&mut inner, session_id, now) {
            return Err(StoreError::Stale(session_id.to_string()));
        }
        match inner.sessions.get_mut(session_id) {
            Some(s) if s.is_open() => {
                s.last_activity = s.last_activity.max(now);
                s.state = SessionState::Active;
                Ok(s.state)
            }
            _ => Err(StoreError::Stale(session_id.to_string())),
        }
    }

    /// Counts a finished pageview. Closed sessions still count, so the total
    /// always matches the pageview records written for the session.
    pub fn record_pageview(&self, session_id: &str) -> Result<LiveSession, StoreError> {
        let mut inner = self.inner.lock();
        if inner.unavailable {
            return Err(StoreError::Unavailable);
        }
        let s = inner
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| StoreError::Stale(session_id.to_string()))?;
        s.pageview_count += 1;
        Ok(s.clone())
    }

    /// Warns sessions idle for `warn_after` and closes warned sessions idle for
    /// `warn_after + grace`. A session past both thresholds is reported in both lists.
    pub fn sweep(&self, now: Timestamp) -> SweepOutcome {
        let mut inner = self.inner.lock();
        let mut out = SweepOutcome::default();
        let mut closed_keys = Vec::new();
        for s in inner.sessions.values_mut() {
            if !s.is_open() {
                continue;
            }
            let idle = now - s.last_activity;
            if s.state == SessionState::Active && idle >= self.policy.warn_after {
                s.state = SessionState::Warned;
                out.warned.push(s.clone());
            }
            if s.state == SessionState::Warned && idle >= self.policy.timeout() {
                s.close(LogoutType::WindowCloseTimeout, now);
                closed_keys.push(s.visitor_key.clone());
                out.closed.push(s.clone());
            }
        }
        for k in closed_keys {
            inner.open_by_visitor.remove(&k);
        }
        out.warned.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out.closed.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        inner.closed_feed.extend(out.closed.iter().cloned());
        out
    }

    /// Ends a session by explicit logout or admin kick. Closing an already
    /// closed session returns it unchanged; one already past the idle timeout
    /// closes as a timeout instead.
    pub fn close(&self, session_id: &str, logout: LogoutType, now: Timestamp) -> Result<LiveSession, StoreError> {
        if !matches!(logout, LogoutType::Explicit | LogoutType::Kicked) {
            return Err(StoreError::InvalidLogoutType(logout));
        }
        let mut inner = self.inner.lock();
        if inner.unavailable {
            return Err(StoreError::Unavailable);
        }
        self.expire_if_idle(&mut inner, session_id, now);
        let s = inner
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| StoreError::Stale(session_id.to_string()))?;
        if !s.is_open() {
            return Ok(s.clone());
        }
        s.close(logout, now);
        let closed = s.clone();
        inner.open_by_visitor.remove(&closed.visitor_key);
        inner.closed_feed.push(closed.clone());
        Ok(closed)
    }

    pub fn kick(&self, session_id: &str, now: Timestamp) -> Result<LiveSession, StoreError> {
        {
            let mut inner = self.inner.lock();
            self.expire_if_idle(&mut inner, session_id, now);
            match inner.sessions.get(session_id) {
                Some(s) if s.is_open() => {}
                _ => return Err(StoreError::Stale(session_id.to_string())),
            }
        }
        self.close(session_id, LogoutType::Kicked, now)
    }

    /// Closes every open session that started on `date` (engine zone), as a
    /// timeout. Used before the day is rotated out of the live store.
    pub fn force_close_started_on(&self, date: NaiveDate, tz: EngineTz, now: Timestamp) -> Vec<LiveSession> {
        let mut inner = self.inner.lock();
        let mut closed = Vec::new();
        for s in inner.sessions.values_mut() {
            if s.is_open() && tz.date_of(s.started_at) == date {
                s.close(LogoutType::WindowCloseTimeout, now);
                closed.push(s.clone());
            }
        }
        for s in &closed {
            inner.open_by_visitor.remove(&s.visitor_key);
        }
        closed.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        inner.closed_feed.extend(closed.iter().cloned());
        closed
    }

    /// Sessions that closed since the last drain, in closing order.
    pub fn drain_closed(&self) -> Vec<LiveSession> {
        std::mem::take(&mut self.inner.lock().closed_feed)
    }

    /// Forgets closed sessions that ended before `cutoff`.
    pub fn purge_closed_before(&self, cutoff: Timestamp) -> usize {
        let mut inner = self.inner.lock();
        let before = inner.sessions.len();
        inner
            .sessions
            .retain(|_, s| s.is_open() || s.closed_at.is_none_or(|c| c >= cutoff));
        before - inner.sessions.len()
    }

    pub fn set_flag(&self, flag: AdminFlag) -> Result<FlagAck, StoreError> {
        if !flag.is_well_formed() {
            return Err(StoreError::MalformedFlag);
        }
        let mut inner = self.inner.lock();
        if inner.unavailable {
            return Err(StoreError::Unavailable);
        }
        Ok(match inner.flags.insert((flag.kind, flag.key), flag) {
            Some(_) => FlagAck::Replaced,
            None => FlagAck::Created,
        })
    }

    /// Returns whether a flag was removed.
    pub fn clear_flag(&self, kind: FlagKind, key: FlagKey) -> Result<bool, StoreError> {
        let mut inner = self.inner.lock();
        if inner.unavailable {
            return Err(StoreError::Unavailable);
        }
        Ok(inner.flags.remove(&(kind, key)).is_some())
    }

    pub fn flags(&self) -> Vec<AdminFlag> {
        self.inner.lock().flags.values().cloned().collect()
    }

    pub fn get(&self, session_id: &str) -> Option<LiveSession> {
        self.inner.lock().sessions.get(session_id).cloned()
    }

    /// Point-in-time copy of every active or warned session, ordered by id.
    pub fn open_sessions(&self) -> Vec<LiveSession> {
        let inner = self.inner.lock();
        let mut v: Vec<LiveSession> = inner.sessions.values().filter(|s| s.is_open()).cloned().collect();
        drop(inner);
        v.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        v
    }

    pub fn open_count(&self) -> usize {
        self.inner.lock().open_by_visitor.len()
    }

    /// Writes `sessions.ndjson` and `flags.ndjson` into `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        let (mut sessions, flags, counter) = {
            let inner = self.inner.lock();
            (
                inner.sessions.values().cloned().collect::<Vec<_>>(),
                inner.flags.values().cloned().collect::<Vec<_>>(),
                inner.counter,
            )
        };
        sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        write_ndjson(&dir.join("sessions.ndjson"), &sessions)?;
        write_ndjson(&dir.join("flags.ndjson"), &flags)?;
        std::fs::write(dir.join("id_state.json"), serde_json::to_vec(&(self.id_seed, counter))?)?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path, policy: SessionPolicy) -> Result<Self, StoreError> {
        let sessions: Vec<LiveSession> = read_ndjson(&dir.join("sessions.ndjson"))?;
        let flags: Vec<AdminFlag> = read_ndjson(&dir.join("flags.ndjson"))?;
        let (seed, counter): (u64, u64) = match std::fs::read(dir.join("id_state.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => (0, sessions.len() as u64),
        };
        let store = Self::with_seed(policy, seed);
        {
            let mut inner = store.inner.lock();
            inner.counter = counter;
            for s in sessions {
                if s.is_open() {
                    inner.open_by_visitor.insert(s.visitor_key.clone(), s.session_id.clone());
                }
                inner.sessions.insert(s.session_id.clone(), s);
            }
            for f in flags {
                if f.is_well_formed() {
                    inner.flags.insert((f.kind, f.key), f);
                }
            }
        }
        Ok(store)
    }
}

pub(crate) fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{DateTime, Utc};

    fn t(min: i64) -> Timestamp {
        DateTime::parse_from_rfc3339("2018-03-14T10:00:00Z").unwrap().with_timezone(&Utc) + Duration::minutes(min)
    }

    fn req(key: &str, server: u16) -> JoinRequest {
        JoinRequest {
            visitor_key: key.to_string(),
            user_id: None,
            ip: "10.0.0.1".parse().unwrap(),
            server_id: server,
            service: "www".into(),
        }
    }

    fn store() -> SessionStore {
        SessionStore::with_seed(SessionPolicy::default(), 7)
    }

    #[test]
    fn cross_server_join_keeps_session() {
        let s = store();
        let a = s.open_or_join(req("t:abc", 3), t(0)).unwrap();
        let b = s.open_or_join(req("t:abc", 7), t(1)).unwrap();
        assert!(a.created && !b.created);
        assert_eq!(a.session.session_id, b.session.session_id);
        assert_eq!(b.seq, 2);
        assert_eq!(b.session.server_id, 7);
        assert_eq!(a.session.session_id.len(), 32);
        assert!(a.session.session_id.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn same_ip_different_visitors_are_separate() {
        let s = store();
        let a = s.open_or_join(req("t:one", 1), t(0)).unwrap();
        let b = s.open_or_join(req("t:two", 1), t(0)).unwrap();
        assert_ne!(a.session.session_id, b.session.session_id);
    }

    #[test]
    fn bans_reject_and_unban_accepts() {
        let s = store();
        let mut r = req("u:540", 1);
        r.user_id = Some(540);
        s.set_flag(AdminFlag::ban_user(540, t(0))).unwrap();
        assert!(matches!(s.open_or_join(r.clone(), t(1)), Err(StoreError::Banned(_))));
        assert!(s.clear_flag(FlagKind::BanUser, FlagKey::User(540)).unwrap());
        assert!(s.open_or_join(r, t(2)).is_ok());

        s.set_flag(AdminFlag::ban_ip("10.0.0.1".parse().unwrap(), t(0))).unwrap();
        let err = s.open_or_join(req("t:x", 1), t(3)).unwrap_err();
        assert!(matches!(err, StoreError::Banned(AdminFlag { kind: FlagKind::BanIp, .. })));
    }

    #[test]
    fn set_flag_is_upsert() {
        let s = store();
        assert_eq!(s.set_flag(AdminFlag::ban_user(1, t(0))).unwrap(), FlagAck::Created);
        assert_eq!(s.set_flag(AdminFlag::ban_user(1, t(5))).unwrap(), FlagAck::Replaced);
        assert_eq!(s.flags().len(), 1);
        assert_eq!(s.flags()[0].issued_at, t(5));
        let bad = AdminFlag {
            kind: FlagKind::BanIp,
            key: FlagKey::User(3),
            issued_at: t(0),
        };
        assert!(matches!(s.set_flag(bad), Err(StoreError::MalformedFlag)));
    }

    #[test]
    fn timeout_defaults() {
        let s = store();
        let a = s.open_or_join(req("t:a", 1), t(0)).unwrap().session.session_id;
        let b = s.open_or_join(req("t:b", 1), t(0)).unwrap().session.session_id;
        s.touch(&b, t(5)).unwrap();
        let out = s.sweep(t(26));
        assert_eq!(out.warned.len(), 1);
        assert_eq!(out.warned[0].session_id, a);
        assert!(out.closed.is_empty());
        // continue within grace keeps the session
        assert_eq!(s.touch(&a, t(28)).unwrap(), SessionState::Active);
        let out = s.sweep(t(36));
        assert_eq!(out.closed.len(), 1);
        assert_eq!(out.closed[0].session_id, b);
        assert_eq!(out.closed[0].logout_type, LogoutType::WindowCloseTimeout);
        assert!(matches!(s.touch(&b, t(37)), Err(StoreError::Stale(_))));
    }

    #[test]
    fn idle_31_closes_in_one_sweep() {
        let s = store();
        let a = s.open_or_join(req("t:a", 1), t(0)).unwrap().session.session_id;
        let out = s.sweep(t(31));
        assert_eq!(out.warned.len(), 1);
        assert_eq!(out.closed.len(), 1);
        assert_eq!(s.get(&a).unwrap().logout_type, LogoutType::WindowCloseTimeout);
        // the same visitor now gets a fresh session
        let again = s.open_or_join(req("t:a", 1), t(32)).unwrap();
        assert!(again.created);
        assert_ne!(again.session.session_id, a);
    }

    #[test]
    fn touch_past_timeout_without_sweep_is_stale() {
        let s = store();
        let a = s.open_or_join(req("t:a", 1), t(0)).unwrap().session.session_id;
        assert!(matches!(s.touch(&a, t(30)), Err(StoreError::Stale(_))));
        let closed = s.drain_closed();
        assert_eq!(closed.len(), 1);
        assert_eq!(closed[0].closed_at, Some(t(30)));
    }

    #[test]
    fn close_and_kick() {
        let s = store();
        let a = s.open_or_join(req("t:a", 1), t(0)).unwrap().session.session_id;
        let c1 = s.close(&a, LogoutType::Explicit, t(3)).unwrap();
        let c2 = s.close(&a, LogoutType::Kicked, t(4)).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.logout_type, LogoutType::Explicit);
        assert!(matches!(s.kick(&a, t(5)), Err(StoreError::Stale(_))));
        assert!(matches!(
            s.close(&a, LogoutType::WindowCloseTimeout, t(5)),
            Err(StoreError::InvalidLogoutType(_))
        ));

        let b = s.open_or_join(req("t:b", 1), t(0)).unwrap().session.session_id;
        let k = s.kick(&b, t(2)).unwrap();
        assert_eq!(k.logout_type, LogoutType::Kicked);
        assert!(matches!(s.touch(&b, t(3)), Err(StoreError::Stale(_))));
        // kicked visitors may come straight back
        assert!(s.open_or_join(req("t:b", 1), t(3)).unwrap().created);
        assert_eq!(s.drain_closed().len(), 2);
    }

    #[test]
    fn unavailable_is_retriable() {
        let s = store();
        s.set_available(false);
        let e = s.open_or_join(req("t:a", 1), t(0)).unwrap_err();
        assert!(e.is_retriable());
        s.set_available(true);
        assert!(s.open_or_join(req("t:a", 1), t(0)).is_ok());
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let a = s.open_or_join(req("t:a", 1), t(0)).unwrap().session;
        s.set_flag(AdminFlag::ban_ip("1.2.3.4".parse().unwrap(), t(0))).unwrap();
        s.save_snapshot(dir.path()).unwrap();
        let r = SessionStore::load_snapshot(dir.path(), SessionPolicy::default()).unwrap();
        assert_eq!(r.get(&a.session_id), Some(a.clone()));
        assert_eq!(r.flags(), s.flags());
        let joined = r.open_or_join(req("t:a", 2), t(1)).unwrap();
        assert_eq!(joined.session.session_id, a.session_id);
        let fresh = r.open_or_join(req("t:new", 2), t(1)).unwrap();
        assert!(s.get(&fresh.session.session_id).is_none());
    }

    #[test]
    fn concurrent_duplicate_joins_share_one_session() {
        let s = std::sync::Arc::new(store());
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let s = s.clone();
                std::thread::spawn(move || {
                    (0..50)
                        .map(|_| s.open_or_join(req("t:shared", i), t(0)).unwrap().session.session_id)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let ids: std::collections::HashSet<String> =
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        assert_eq!(ids.len(), 1);
        let sid = ids.into_iter().next().unwrap();
        assert_eq!(s.get(&sid).unwrap().requests_started, 400);
    }
}
