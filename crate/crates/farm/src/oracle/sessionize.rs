//! Quadratic session grouping: each event joins the session of its nearest
//! earlier event from the same visitor when that predecessor is close enough.

use cawal_core::sessionize::{resolve_visitor, RawEvent};
use chrono::Duration;

/// Sessions as ascending event-index lists, sorted by their first index.
pub fn oracle_sessions(events: &[RawEvent], timeout: Duration) -> Vec<Vec<usize>> {
    let keys: Vec<String> = events.iter().map(resolve_visitor).collect();
    let n = events.len();
    let mut label: Vec<usize> = (0..n).collect();
    // process in (timestamp, index) order so predecessors are labelled first
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (events[i].timestamp, i));
    for &i in &order {
        let mut pred: Option<usize> = None;
        for j in 0..n {
            if j == i || keys[j] != keys[i] || (events[j].timestamp, j) >= (events[i].timestamp, i) {
                continue;
            }
            if pred.is_none_or(|p| (events[j].timestamp, j) > (events[p].timestamp, p)) {
                pred = Some(j);
            }
        }
        if let Some(p) = pred {
            if events[i].timestamp - events[p].timestamp <= timeout && events[p].user_id == events[i].user_id {
                label[i] = label[p];
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.iter_mut().find(|g| label[g[0]] == label[i]) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort();
    groups
}

/// Converts sessionizer output to the oracle's shape.
pub fn normalize(sessions: &[cawal_core::sessionize::Session]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = sessions
        .iter()
        .map(|s| {
            let mut v = s.events.clone();
            v.sort_unstable();
            v
        })
        .collect();
    out.sort();
    out
}
