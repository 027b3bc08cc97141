//! Exhaustive check of the live-session state machine against a small
//! reference model, over every operation trace up to a given length.

use std::collections::HashMap;
use std::net::Ipv4Addr;

use cawal_core::clock::Timestamp;
use cawal_core::session_store::{
    JoinRequest, LiveSession, LogoutType, SessionPolicy, SessionState, SessionStore, StoreError,
};
use chrono::{DateTime, Duration, Utc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Req,
    Touch,
    Sweep,
    Logout,
    Kick,
    Adv26m,
    Adv5m,
    Adv1m,
}

pub const ALPHABET: [Op; 8] = [
    Op::Req,
    Op::Touch,
    Op::Sweep,
    Op::Logout,
    Op::Kick,
    Op::Adv26m,
    Op::Adv5m,
    Op::Adv1m,
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Model {
    Active { last: Timestamp },
    Warned { last: Timestamp },
    Closed { logout: LogoutType, at: Timestamp },
}

#[derive(Debug, Default)]
pub struct LifecycleReport {
    pub traces: u64,
    pub steps: u64,
    pub failures: Vec<String>,
}

fn t0() -> Timestamp {
    DateTime::parse_from_rfc3339("2018-03-14T08:00:00Z")
        .expect("valid timestamp")
        .with_timezone(&Utc)
}

fn join(store: &SessionStore, now: Timestamp) -> Result<cawal_core::session_store::Joined, StoreError> {
    store.open_or_join(
        JoinRequest {
            visitor_key: "u:1".into(),
            user_id: Some(1),
            ip: Ipv4Addr::new(10, 0, 0, 1),
            server_id: 1,
            service: "www".into(),
        },
        now,
    )
}

fn observed(s: &LiveSession) -> Model {
    match s.state {
        SessionState::Active => Model::Active { last: s.last_activity },
        SessionState::Warned => Model::Warned { last: s.last_activity },
        SessionState::Closed => Model::Closed {
            logout: s.logout_type,
            at: s.closed_at.unwrap_or(s.last_activity),
        },
    }
}

/// Whether the store may move a session from `a` to `b` in one step.
fn legal(a: Model, b: Model, timeout: Duration) -> bool {
    use Model::*;
    match (a, b) {
        (x, y) if x == y => true,
        (Active { .. } | Warned { .. }, Active { .. }) => true,
        (Active { .. }, Warned { .. }) => true,
        (Warned { last }, Closed { logout: LogoutType::WindowCloseTimeout, at }) => at - last >= timeout,
        // warned and closed in the same step: lazy expiry or one late sweep
        (Active { last }, Closed { logout: LogoutType::WindowCloseTimeout, at }) => at - last >= timeout,
        (Active { .. } | Warned { .. }, Closed { logout: LogoutType::Explicit | LogoutType::Kicked, .. }) => true,
        _ => false,
    }
}

/// Runs one trace and returns the first disagreement, if any.
fn run_trace(trace: &[Op], policy: SessionPolicy) -> Result<u64, String> {
    let store = SessionStore::with_seed(policy, 7);
    let timeout = policy.timeout();
    let mut now = t0();
    let mut current: Option<(String, Model)> = None;
    let mut seen: HashMap<String, Model> = HashMap::new();
    let mut steps = 0;

    let expire = |m: Model, now: Timestamp| match m {
        Model::Active { last } | Model::Warned { last } if now - last >= timeout => Model::Closed {
            logout: LogoutType::WindowCloseTimeout,
            at: last + timeout,
        },
        other => other,
    };

    for (i, op) in trace.iter().enumerate() {
        steps += 1;
        let fail = |msg: String| format!("{trace:?} step {i} ({op:?}): {msg}");
        match op {
            Op::Adv26m => now += Duration::minutes(26),
            Op::Adv5m => now += Duration::minutes(5),
            Op::Adv1m => now += Duration::minutes(1),
            Op::Req => {
                let joined = join(&store, now).map_err(|e| fail(format!("join failed: {e}")))?;
                let prev = current.as_ref().map(|(id, m)| (id.clone(), expire(*m, now)));
                match prev {
                    Some((id, Model::Active { .. } | Model::Warned { .. })) => {
                        if joined.created || joined.session.session_id != id {
                            return Err(fail("live session was not joined".into()));
                        }
                        current = Some((id, Model::Active { last: now }));
                    }
                    other => {
                        if !joined.created {
                            return Err(fail("closed or missing session was joined".into()));
                        }
                        if let Some((id, m)) = other {
                            seen.insert(id.clone(), m);
                            if Some(m) != store.get(&id).map(|s| observed(&s)) {
                                return Err(fail("expired session not closed at idle timeout".into()));
                            }
                        }
                        current = Some((joined.session.session_id.clone(), Model::Active { last: now }));
                    }
                }
            }
            Op::Touch => {
                let Some((id, m)) = current.clone() else { continue };
                let res = store.touch(&id, now);
                let m = expire(m, now);
                match m {
                    Model::Active { .. } | Model::Warned { .. } => {
                        if !matches!(res, Ok(SessionState::Active)) {
                            return Err(fail(format!("touch on open session gave {res:?}")));
                        }
                        current = Some((id, Model::Active { last: now }));
                    }
                    Model::Closed { .. } => {
                        if !matches!(res, Err(StoreError::Stale(_))) {
                            return Err(fail(format!("touch on closed session gave {res:?}")));
                        }
                        current = Some((id, m));
                    }
                }
            }
            Op::Sweep => {
                let out = store.sweep(now);
                if let Some((id, m)) = current.clone() {
                    let next = match m {
                        Model::Active { last } if now - last >= timeout => Model::Closed {
                            logout: LogoutType::WindowCloseTimeout,
                            at: now,
                        },
                        Model::Active { last } if now - last >= policy.warn_after => Model::Warned { last },
                        Model::Warned { last } if now - last >= timeout => Model::Closed {
                            logout: LogoutType::WindowCloseTimeout,
                            at: now,
                        },
                        other => other,
                    };
                    let warned = out.warned.iter().any(|s| s.session_id == id);
                    let closed = out.closed.iter().any(|s| s.session_id == id);
                    let expect_warned = matches!(m, Model::Active { .. }) && next != m;
                    let expect_closed = matches!(next, Model::Closed { .. }) && next != m;
                    if warned != expect_warned || closed != expect_closed {
                        return Err(fail(format!(
                            "sweep reported warned={warned} closed={closed}, expected {expect_warned}/{expect_closed}"
                        )));
                    }
                    current = Some((id, next));
                }
            }
            Op::Logout | Op::Kick => {
                let Some((id, m)) = current.clone() else { continue };
                let (kind, res) = if *op == Op::Logout {
                    (LogoutType::Explicit, store.close(&id, LogoutType::Explicit, now))
                } else {
                    (LogoutType::Kicked, store.kick(&id, now))
                };
                let m = expire(m, now);
                current = Some((id.clone(), m));
                match m {
                    Model::Active { .. } | Model::Warned { .. } => {
                        if res.is_err() {
                            return Err(fail(format!("close of open session failed: {res:?}")));
                        }
                        current = Some((id, Model::Closed { logout: kind, at: now }));
                    }
                    Model::Closed { .. } => {
                        let ok = if kind == LogoutType::Kicked {
                            matches!(res, Err(StoreError::Stale(_)))
                        } else {
                            res.is_ok()
                        };
                        if !ok {
                            return Err(fail(format!("close of closed session gave {res:?}")));
                        }
                    }
                }
            }
        }

        if let Some((id, m)) = &current {
            let actual = store.get(id).map(|s| observed(&s));
            if actual != Some(*m) {
                return Err(fail(format!("model {m:?}, store {actual:?}")));
            }
            if let Some(prev) = seen.insert(id.clone(), *m) {
                if !legal(prev, *m, timeout) {
                    return Err(fail(format!("illegal transition {prev:?} -> {m:?}")));
                }
            }
        }
        let open = store.open_sessions().len();
        let model_open = usize::from(matches!(current, Some((_, Model::Active { .. } | Model::Warned { .. }))));
        if open > 1 || (open != model_open && current.as_ref().is_some_and(|(_, m)| expire(*m, now) == *m)) {
            return Err(fail(format!("{open} open sessions for one visitor")));
        }
    }
    Ok(steps)
}

/// Every trace over [`ALPHABET`] of length 1 through `max_len`.
pub fn check_all_traces(max_len: usize) -> LifecycleReport {
    let policy = SessionPolicy::default();
    let mut report = LifecycleReport::default();
    let k = ALPHABET.len();
    for len in 1..=max_len {
        let total = k.pow(len as u32);
        let mut trace = vec![Op::Req; len];
        for n in 0..total {
            let mut x = n;
            for slot in trace.iter_mut() {
                *slot = ALPHABET[x % k];
                x /= k;
            }
            report.traces += 1;
            match run_trace(&trace, policy) {
                Ok(steps) => report.steps += steps,
                Err(e) => {
                    if report.failures.len() < 20 {
                        report.failures.push(e);
                    }
                }
            }
        }
    }
    report
}

/// The three worked examples: warned at 26 minutes, closed at 31, and a
/// warned session that continues. Returns (name, passed).
pub fn worked_examples() -> Vec<(&'static str, bool)> {
    let policy = SessionPolicy::default();
    let mut out = Vec::new();

    let store = SessionStore::with_seed(policy, 1);
    let id = join(&store, t0()).expect("join").session.session_id;
    let sweep = store.sweep(t0() + Duration::minutes(26));
    out.push((
        "idle 26 min is warned",
        sweep.warned.len() == 1 && sweep.closed.is_empty() && store.get(&id).map(|s| s.state) == Some(SessionState::Warned),
    ));

    let sweep = store.sweep(t0() + Duration::minutes(31));
    let s = store.get(&id).expect("session kept");
    out.push((
        "idle 31 min is closed",
        sweep.closed.len() == 1 && s.state == SessionState::Closed && s.logout_type == LogoutType::WindowCloseTimeout,
    ));

    let store = SessionStore::with_seed(policy, 2);
    let id = join(&store, t0()).expect("join").session.session_id;
    store.sweep(t0() + Duration::minutes(26));
    let touched = store.touch(&id, t0() + Duration::minutes(27));
    let later = store.sweep(t0() + Duration::minutes(31));
    let again = join(&store, t0() + Duration::minutes(32)).expect("join");
    out.push((
        "continue keeps the session",
        matches!(touched, Ok(SessionState::Active))
            && later.closed.is_empty()
            && !again.created
            && again.session.session_id == id,
    ));
    out
}
