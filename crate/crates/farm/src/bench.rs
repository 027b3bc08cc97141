//! Wall-clock comparison of the tracking modes over one shared trace.
//!
//! Every mode serves the same pages. Server-side mode adds in-process capture;
//! client emulation additionally serves the tag script and parses a beacon
//! before capturing, the way a page-tagging collector would.

use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use cawal_core::capture::{AppData, RequestContext};
use cawal_core::clock::ManualClock;
use chrono::Duration;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Mode, SimConfig};
use crate::sim::{build_trace, new_tracker, request_context, ResponseTimes, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: Mode,
    /// Fastest of the repeated runs.
    pub wall_ms: f64,
    pub throughput_rps: f64,
    pub pageviews: u64,
    pub requests_to_log_sink: u64,
    pub log_requests_per_pageview: f64,
    pub response_time: ResponseTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub sessions: u64,
    pub repeats: usize,
    pub modes: Vec<ModeResult>,
}

impl BenchReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Throughput ordering none >= server_side > client_emulation over the
    /// modes present.
    pub fn ordering_holds(&self) -> bool {
        let t = |m| self.mode(m).map(|r| r.throughput_rps);
        let a = match (t(Mode::None), t(Mode::ServerSide)) {
            (Some(n), Some(s)) => n >= s,
            _ => true,
        };
        let b = match (t(Mode::ServerSide), t(Mode::ClientEmulation)) {
            (Some(s), Some(c)) => s > c,
            _ => true,
        };
        a && b
    }

    pub fn to_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_vec_pretty(&value).expect("JSON value serializes")
    }
}

/// Stand-in for application work: a few rounds of hashing over the URL.
fn render_page(ctx: &RequestContext) -> [u8; 32] {
    let mut h: [u8; 32] = Sha256::digest(ctx.url.as_bytes()).into();
    for _ in 0..4 {
        h = Sha256::digest(h).into();
    }
    h
}

#[derive(Serialize, Deserialize)]
struct Beacon<'a> {
    url: &'a str,
    referrer: &'a str,
    ua: &'a str,
    lang: &'a str,
    screen: &'a str,
    padding: &'a str,
}

struct Run {
    wall_ms: f64,
    sink: u64,
    latencies_ms: Vec<f64>,
}

fn run_once(mode: Mode, seed: u64, contexts: &[RequestContext], script: &[u8], padding: &str) -> Run {
    let clock = Arc::new(ManualClock::new(contexts.first().map_or_else(chrono::Utc::now, |c| c.timestamp)));
    let (tracker, _log) = new_tracker(seed, clock.clone());
    let mut latencies_ms = Vec::with_capacity(contexts.len());
    let mut sink = 0u64;
    let mut out_buf: Vec<u8> = Vec::with_capacity(script.len() + 4096);
    let start = Instant::now();
    for ctx in contexts {
        let t = Instant::now();
        clock.set(ctx.timestamp);
        let page = render_page(ctx);
        match mode {
            Mode::None => {}
            Mode::ServerSide => {
                let h = tracker.begin_request(ctx).expect("capture");
                tracker
                    .finalize_request_at(&h, AppData::default(), ctx.timestamp + Duration::milliseconds(1))
                    .expect("capture");
            }
            Mode::ClientEmulation => {
                // the page itself carries the tag
                sink += 1;
                // tag script served to the browser
                out_buf.clear();
                out_buf.extend_from_slice(script);
                black_box(out_buf.iter().fold(0u32, |a, b| a.wrapping_add(*b as u32)));
                sink += 1;
                // beacon posted back and parsed by the collector
                let body = serde_json::to_vec(&Beacon {
                    url: &ctx.url,
                    referrer: &ctx.referrer,
                    ua: &ctx.user_agent,
                    lang: &ctx.accept_language,
                    screen: "1920x1080",
                    padding,
                })
                .expect("beacon serializes");
                let beacon: Beacon = serde_json::from_slice(&body).expect("beacon parses");
                black_box(beacon.url.len());
                sink += 1;
                let h = tracker.begin_request(ctx).expect("capture");
                tracker
                    .finalize_request_at(&h, AppData::default(), ctx.timestamp + Duration::milliseconds(1))
                    .expect("capture");
            }
        }
        black_box(page);
        latencies_ms.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
    if mode == Mode::ServerSide {
        sink = tracker.counters().log_interactions;
    }
    Run {
        wall_ms,
        sink,
        latencies_ms,
    }
}

/// Benchmarks each config's mode on the trace of the first config. All configs
/// must differ only in `mode`.
pub fn run_benchmark(configs: &[SimConfig], repeats: usize) -> Result<BenchReport, ConfigError> {
    let Some(base) = configs.first() else {
        return Err(ConfigError::Invalid {
            field: "modes",
            msg: "at least one mode is required".into(),
        });
    };
    for c in &configs[1..] {
        base.comparable(c)?;
    }
    let trace: Trace = build_trace(base)?;
    let contexts: Vec<RequestContext> = trace.requests.iter().map(|r| request_context(base, &trace, r)).collect();
    let cost = &base.cost_model;
    let script: Vec<u8> = (0..cost.script_bytes).map(|i| (i % 251) as u8).collect();
    let padding = "x".repeat(cost.beacon_bytes.saturating_sub(200) as usize);
    let repeats = repeats.max(1);
    let pageviews = contexts.len() as u64;

    let mut modes = Vec::new();
    for c in configs {
        let mut best: Option<Run> = None;
        for _ in 0..repeats {
            let run = run_once(c.mode, base.seed, &contexts, &script, &padding);
            if best.as_ref().is_none_or(|b| run.wall_ms < b.wall_ms) {
                best = Some(run);
            }
        }
        let best = best.expect("at least one run");
        modes.push(ModeResult {
            mode: c.mode,
            wall_ms: best.wall_ms,
            throughput_rps: if best.wall_ms > 0.0 { pageviews as f64 * 1000.0 / best.wall_ms } else { 0.0 },
            pageviews,
            requests_to_log_sink: best.sink,
            log_requests_per_pageview: if pageviews == 0 { 0.0 } else { best.sink as f64 / pageviews as f64 },
            response_time: ResponseTimes::from_samples(best.latencies_ms),
        });
    }
    Ok(BenchReport {
        seed: base.seed,
        sessions: base.total_sessions,
        repeats,
        modes,
    })
}

/// One config per mode, all derived from `base`.
pub fn mode_configs(base: &SimConfig, modes: &[Mode]) -> Vec<SimConfig> {
    modes
        .iter()
        .map(|m| SimConfig {
            mode: *m,
            ..base.clone()
        })
        .collect()
}
