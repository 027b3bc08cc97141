//! In-process capture hooks called at the start and end of every page request.
//!
//! [`Tracker::begin_request`] resolves the visitor's session in the shared
//! store and, for a new session, prepares its session row. [`Tracker::finalize_request`]
//! measures the page generation time and writes the pageview (plus the pending
//! session row) to the log store in a single interaction.

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::logstore::{LogError, LogStore};
use crate::model::{classify_referrer, truncate_field, truncate_to, GeoTable, ReferrerConfig, UserAgentParser};
use crate::records::{PageviewRecord, SessionClose, SessionRecord};
use crate::session_store::{AdminFlag, JoinRequest, LiveSession, LogoutType, SessionStore, StoreError};
use crate::sessionize::visitor_hash;

/// Error code stamped on a pageview that finished after its session was kicked.
pub const ERROR_FINALIZED_AFTER_KICK: i32 = 990;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("visitor is banned")]
    Banned(AdminFlag),
    #[error("capture handle {0} was already finalized")]
    AlreadyFinalized(u64),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone)]
pub struct CaptureConfig {
    pub referrer: ReferrerConfig,
    pub geo: Arc<GeoTable>,
    pub user_agents: UserAgentParser,
    /// Snapshot keys containing any of these (case-insensitive) are masked.
    pub mask_keys: Vec<String>,
    pub snapshot_value_max: usize,
}

impl CaptureConfig {
    pub fn new(referrer: ReferrerConfig, geo: GeoTable) -> Self {
        Self {
            referrer,
            geo: Arc::new(geo),
            user_agents: UserAgentParser::default(),
            mask_keys: vec!["password".into(), "passwd".into(), "token".into(), "secret".into()],
            snapshot_value_max: 255,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthUser {
    pub user_id: u64,
    pub username: String,
}

/// What the application knows about an incoming request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub ip: Ipv4Addr,
    pub user_agent: String,
    pub referrer: String,
    pub url: String,
    pub host: String,
    pub service: String,
    pub server_id: u16,
    pub user: Option<AuthUser>,
    /// First-party session token, when the browser presented one.
    pub session_token: Option<String>,
    pub forwarded_for: Option<String>,
    pub accept_language: String,
    pub timestamp: Timestamp,
}

impl RequestContext {
    /// Authenticated users are keyed by account, guests by their session
    /// token, falling back to a hash of address and user agent.
    pub fn visitor_key(&self) -> String {
        if let Some(u) = &self.user {
            format!("u:{}", u.user_id)
        } else if let Some(t) = self.session_token.as_deref().filter(|t| !t.is_empty()) {
            format!("t:{t}")
        } else {
            format!("h:{}", visitor_hash(self.ip, &self.user_agent))
        }
    }
}

/// Application data attached when the page finishes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppData {
    pub header: String,
    pub message: String,
    pub cookies: BTreeMap<String, String>,
    pub session: BTreeMap<String, String>,
    pub post: BTreeMap<String, String>,
    pub get: BTreeMap<String, String>,
    pub db_delay_ms: f64,
    pub error_code: i32,
}

#[derive(Debug, Clone)]
pub struct CaptureHandle {
    id: u64,
    session_id: String,
    seq: u64,
    started: Timestamp,
    server_id: u16,
    service: String,
    url: String,
    created: bool,
    pending_session: Option<SessionRecord>,
}

impl CaptureHandle {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn started(&self) -> Timestamp {
        self.started
    }

    /// Whether this request opened a new session.
    pub fn created_session(&self) -> bool {
        self.created
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerCounters {
    pub log_interactions: u64,
    pub rejected_requests: u64,
    pub sessions_created: u64,
    pub pageviews_written: u64,
}

pub struct Tracker {
    sessions: Arc<SessionStore>,
    log: Arc<LogStore>,
    cfg: CaptureConfig,
    clock: Arc<dyn Clock>,
    next_log_id: AtomicU64,
    next_opn: AtomicU64,
    next_handle: AtomicU64,
    open_handles: Mutex<HashSet<u64>>,
    log_interactions: AtomicU64,
    rejected: AtomicU64,
    sessions_created: AtomicU64,
    pageviews_written: AtomicU64,
}

impl Tracker {
    pub fn new(sessions: Arc<SessionStore>, log: Arc<LogStore>, cfg: CaptureConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            sessions,
            log,
            cfg,
            clock,
            next_log_id: AtomicU64::new(1),
            next_opn: AtomicU64::new(1),
            next_handle: AtomicU64::new(1),
            open_handles: Mutex::new(HashSet::new()),
            log_interactions: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            sessions_created: AtomicU64::new(0),
            pageviews_written: AtomicU64::new(0),
        }
    }

    pub fn sessions(&self) -> &Arc<SessionStore> {
        &self.sessions
    }

    pub fn log_store(&self) -> &Arc<LogStore> {
        &self.log
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn counters(&self) -> TrackerCounters {
        TrackerCounters {
            log_interactions: self.log_interactions.load(Ordering::SeqCst),
            rejected_requests: self.rejected.load(Ordering::SeqCst),
            sessions_created: self.sessions_created.load(Ordering::SeqCst),
            pageviews_written: self.pageviews_written.load(Ordering::SeqCst),
        }
    }

    pub fn begin_request(&self, ctx: &RequestContext) -> Result<CaptureHandle, CaptureError> {
        let join = JoinRequest {
            visitor_key: ctx.visitor_key(),
            user_id: ctx.user.as_ref().map(|u| u.user_id),
            ip: ctx.ip,
            server_id: ctx.server_id,
            service: ctx.service.clone(),
        };
        let joined = match self.sessions.open_or_join(join, ctx.timestamp) {
            Ok(j) => j,
            Err(StoreError::Banned(flag)) => {
                self.rejected.fetch_add(1, Ordering::SeqCst);
                return Err(CaptureError::Banned(flag));
            }
            Err(e) => return Err(e.into()),
        };
        // a lazily expired predecessor may have been closed by the join
        self.flush_closed()?;

        let pending_session = joined.created.then(|| {
            self.sessions_created.fetch_add(1, Ordering::SeqCst);
            self.session_record(ctx, &joined.session)
        });
        let id = self.next_handle.fetch_add(1, Ordering::SeqCst);
        self.open_handles.lock().insert(id);
        Ok(CaptureHandle {
            id,
            session_id: joined.session.session_id,
            seq: joined.seq,
            started: ctx.timestamp,
            server_id: ctx.server_id,
            service: ctx.service.clone(),
            url: truncate_field(&ctx.url),
            created: joined.created,
            pending_session,
        })
    }

    fn session_record(&self, ctx: &RequestContext, s: &LiveSession) -> SessionRecord {
        let ua = self.cfg.user_agents.parse(&ctx.user_agent);
        let referrer = classify_referrer(&ctx.referrer, &ctx.host, &self.cfg.referrer);
        let opn = self.next_opn.fetch_add(1, Ordering::SeqCst) % 100_000_000;
        SessionRecord {
            log_id: self.next_log_id.fetch_add(1, Ordering::SeqCst),
            opn_id: ctx.server_id as u64 * 100_000_000 + opn,
            datetime: s.started_at,
            user_id: ctx.user.as_ref().map_or(0, |u| u.user_id),
            username: ctx.user.as_ref().map(|u| truncate_field(&u.username)).unwrap_or_default(),
            ip: ctx.ip,
            proxy: ctx.forwarded_for.as_deref().map(truncate_field).unwrap_or_default(),
            os_name: ua.os_name,
            os_version: ua.os_version,
            browser_name: ua.browser_name,
            browser_version: ua.browser_version,
            browser_type: ua.browser_type,
            lang: primary_language(&ctx.accept_language),
            country: self.cfg.geo.lookup(ctx.ip).to_string(),
            cookie_check: ctx.session_token.as_deref().is_some_and(|t| !t.is_empty()),
            landing_url: truncate_field(&ctx.url),
            ref_name: referrer.ref_name,
            ref_host: referrer.ref_host,
            ref_search_key: referrer.search_key,
            ref_type: referrer.ref_type,
            server_id: ctx.server_id,
            service: truncate_field(&ctx.service),
            session_id: s.session_id.clone(),
        }
    }

    pub fn finalize_request(&self, handle: &CaptureHandle, app: AppData) -> Result<PageviewRecord, CaptureError> {
        self.finalize_request_at(handle, app, self.clock.now())
    }

    pub fn finalize_request_at(
        &self,
        handle: &CaptureHandle,
        app: AppData,
        now: Timestamp,
    ) -> Result<PageviewRecord, CaptureError> {
        if !self.open_handles.lock().remove(&handle.id) {
            return Err(CaptureError::AlreadyFinalized(handle.id));
        }
        let kicked = self
            .sessions
            .get(&handle.session_id)
            .is_some_and(|s| s.logout_type == LogoutType::Kicked);
        let gen_time_ms = ((now - handle.started).num_microseconds().unwrap_or(0).max(0)) as f64 / 1000.0;
        let record = PageviewRecord {
            session_id: handle.session_id.clone(),
            seq: handle.seq,
            datetime: handle.started,
            url: handle.url.clone(),
            app_header: truncate_field(&app.header),
            app_message: truncate_field(&app.message),
            cookie_snapshot: self.mask(app.cookies),
            session_snapshot: self.mask(app.session),
            post_snapshot: self.mask(app.post),
            get_snapshot: self.mask(app.get),
            gen_time_ms,
            db_delay_ms: app.db_delay_ms.max(0.0),
            error_code: if kicked { ERROR_FINALIZED_AFTER_KICK } else { app.error_code },
            server_id: handle.server_id,
            service: handle.service.clone(),
        };
        self.log.append_batch(handle.pending_session.clone(), record.clone())?;
        self.log_interactions.fetch_add(1, Ordering::SeqCst);
        self.pageviews_written.fetch_add(1, Ordering::SeqCst);
        self.sessions.record_pageview(&handle.session_id)?;
        Ok(record)
    }

    fn mask(&self, snapshot: BTreeMap<String, String>) -> BTreeMap<String, String> {
        snapshot
            .into_iter()
            .map(|(k, v)| {
                let lower = k.to_ascii_lowercase();
                let v = if self.cfg.mask_keys.iter().any(|m| lower.contains(m.as_str())) {
                    "***".to_string()
                } else {
                    truncate_to(&v, self.cfg.snapshot_value_max)
                };
                (truncate_field(&k), v)
            })
            .collect()
    }

    /// Writes close rows for every session the store closed since the last flush.
    pub fn flush_closed(&self) -> Result<usize, CaptureError> {
        let closed = self.sessions.drain_closed();
        let n = closed.len();
        for s in closed {
            let rec = SessionClose {
                session_id: s.session_id,
                ended_at: s.closed_at.unwrap_or(s.last_activity),
                logout_type: s.logout_type,
            };
            match self.log.append_close(rec) {
                // the day was already rotated and its open sessions force-closed there
                Ok(_) | Err(LogError::RotationRace(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(n)
    }

    pub fn logout(&self, session_id: &str, now: Timestamp) -> Result<LiveSession, CaptureError> {
        let s = self.sessions.close(session_id, LogoutType::Explicit, now)?;
        self.flush_closed()?;
        Ok(s)
    }

    pub fn kick(&self, session_id: &str, now: Timestamp) -> Result<LiveSession, CaptureError> {
        let s = self.sessions.kick(session_id, now)?;
        self.flush_closed()?;
        Ok(s)
    }

    pub fn sweep(&self, now: Timestamp) -> Result<crate::session_store::SweepOutcome, CaptureError> {
        let out = self.sessions.sweep(now);
        self.flush_closed()?;
        Ok(out)
    }
}

fn primary_language(accept: &str) -> String {
    accept
        .split(',')
        .next()
        .and_then(|tag| tag.split(';').next())
        .and_then(|tag| tag.trim().split('-').next())
        .map(|s| truncate_field(&s.to_ascii_lowercase()))
        .unwrap_or_default()
}
