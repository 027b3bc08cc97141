use std::collections::BTreeSet;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{Duration, NaiveDate, SecondsFormat};
use serde::Serialize;

use super::{analytics_file_name, attribute_day, extract_day, read_analytics, write_analytics, AnalyticsDay, ExtractConfig};
use crate::capture::Tracker;
use crate::clock::Clock;
use crate::logstore::LogStore;
use crate::model::ProfileDirectory;
use crate::warehouse::Warehouse;

/// Plain-text job log, one `timestamp<TAB>stage<TAB>message` line per event.
/// Lines are kept in memory and, when a path is set, appended to that file.
pub struct JobLog {
    path: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    lines: Mutex<Vec<String>>,
}

impl JobLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            path: None,
            clock,
            lines: Mutex::new(Vec::new()),
        }
    }

    pub fn to_file(path: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Self {
        Self {
            path: Some(path.into()),
            clock,
            lines: Mutex::new(Vec::new()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn event(&self, stage: &str, message: &str) -> io::Result<()> {
        let ts = self.clock.now().to_rfc3339_opts(SecondsFormat::Millis, true);
        let message = message.replace(['\n', '\t'], " ");
        let line = format!("{ts}\t{stage}\t{message}");
        let mut lines = self.lines.lock().expect("job log lock");
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{line}")?;
        }
        lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().expect("job log lock").clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Maintenance,
    Sessions,
    Extract,
    Warehouse,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Maintenance, Stage::Sessions, Stage::Extract, Stage::Warehouse];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Maintenance => "maintenance",
            Stage::Sessions => "sessions",
            Stage::Extract => "extract",
            Stage::Warehouse => "warehouse",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum StageOutcome {
    Completed(String),
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub outcome: StageOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobReport {
    pub date: NaiveDate,
    pub stages: Vec<StageReport>,
    #[serde(skip)]
    pub record: Option<AnalyticsDay>,
}

impl JobReport {
    pub fn succeeded(&self) -> bool {
        !self.stages.iter().any(|s| matches!(s.outcome, StageOutcome::Failed(_)))
    }

    pub fn outcome(&self, stage: Stage) -> Option<&StageOutcome> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| &s.outcome)
    }

    pub fn failed_stage(&self) -> Option<Stage> {
        self.stages
            .iter()
            .find(|s| matches!(s.outcome, StageOutcome::Failed(_)))
            .map(|s| s.stage)
    }
}

/// Everything the nightly job touches. `tracker` is present when the job runs
/// inside a live process; offline runs work from the log store alone.
pub struct NightlyContext<'a> {
    pub tracker: Option<&'a Tracker>,
    pub log_store: &'a LogStore,
    pub profiles: &'a ProfileDirectory,
    pub config: &'a ExtractConfig,
    pub analytics_dir: &'a Path,
    pub warehouse: &'a Warehouse,
    pub job_log: &'a JobLog,
    pub clock: &'a dyn Clock,
}

static RUNNING: Mutex<BTreeSet<NaiveDate>> = Mutex::new(BTreeSet::new());

struct DateLock(NaiveDate);

impl DateLock {
    fn acquire(date: NaiveDate) -> Option<Self> {
        RUNNING.lock().expect("date lock").insert(date).then_some(Self(date))
    }
}

impl Drop for DateLock {
    fn drop(&mut self) {
        RUNNING.lock().expect("date lock").remove(&self.0);
    }
}

type StageResult<T> = Result<(T, String), String>;

/// Rotates, attributes, extracts and loads one day (yesterday by default).
/// A failed stage stops the run; every stage is safe to repeat, so a failed
/// run is resumed by running again. With `rerun` an existing analytics file
/// is recomputed and the warehouse load may backfill a sealed month.
pub fn run_nightly(ctx: &NightlyContext<'_>, date: Option<NaiveDate>, rerun: bool) -> io::Result<JobReport> {
    let now = ctx.clock.now();
    let today = ctx.config.tz.date_of(now);
    let date = date.unwrap_or(today - Duration::days(1));
    let mut report = JobReport {
        date,
        stages: Vec::new(),
        record: None,
    };
    let Some(_lock) = DateLock::acquire(date) else {
        let msg = format!("{date}: another run holds this date");
        ctx.job_log.event(Stage::Maintenance.as_str(), &format!("failed: {msg}"))?;
        report.stages.push(StageReport {
            stage: Stage::Maintenance,
            outcome: StageOutcome::Failed(msg),
        });
        return Ok(report);
    };

    let log = ctx.job_log;
    let finish = |report: &mut JobReport, stage: Stage, res: Result<String, String>, skip: bool| -> io::Result<()> {
        let outcome = match res {
            Ok(msg) if skip => StageOutcome::Skipped(msg),
            Ok(msg) => StageOutcome::Completed(msg),
            Err(msg) => StageOutcome::Failed(msg),
        };
        let line = match &outcome {
            StageOutcome::Completed(m) => format!("ok: {m}"),
            StageOutcome::Skipped(m) => format!("skipped: {m}"),
            StageOutcome::Failed(m) => format!("failed: {m}"),
        };
        log.event(stage.as_str(), &line)?;
        report.stages.push(StageReport { stage, outcome });
        Ok(())
    };

    let staging = match maintenance(ctx, date, today, now) {
        Ok((h, msg)) => {
            finish(&mut report, Stage::Maintenance, Ok(msg), false)?;
            Some(h)
        }
        Err(msg) => {
            finish(&mut report, Stage::Maintenance, Err(msg), false)?;
            None
        }
    };

    let Some(staging) = staging else {
        skip_rest(&mut report, log, &[Stage::Sessions, Stage::Extract, Stage::Warehouse])?;
        return Ok(report);
    };
    let map = attribute_day(&staging.day().sessions, ctx.config.tz);
    let own = map.values().filter(|d| **d == date).count();
    let msg = format!("{date}: {own} sessions attributed by start date, {} foreign", map.len() - own);
    finish(&mut report, Stage::Sessions, Ok(msg), false)?;

    let existing = ctx.analytics_dir.join(analytics_file_name(date));
    let kept = existing.is_file() && !rerun;
    let extracted: StageResult<AnalyticsDay> = if kept {
        read_analytics(ctx.analytics_dir, date)
            .map(|r| (r, format!("{} exists, kept", existing.display())))
            .map_err(|e| e.to_string())
    } else {
        extract_day(&staging, date, ctx.profiles, ctx.config, log)
            .and_then(|r| write_analytics(ctx.analytics_dir, &r).map(|p| (r, p)))
            .map(|(r, p)| {
                let msg = format!(
                    "{date}: {} sessions, {} pageviews written to {}",
                    r.sessions_total,
                    r.pageviews_total,
                    p.display()
                );
                (r, msg)
            })
            .map_err(|e| e.to_string())
    };
    let record = match extracted {
        Ok((r, msg)) => {
            finish(&mut report, Stage::Extract, Ok(msg), kept)?;
            r
        }
        Err(msg) => {
            finish(&mut report, Stage::Extract, Err(msg), false)?;
            skip_rest(&mut report, log, &[Stage::Warehouse])?;
            return Ok(report);
        }
    };

    let loaded = ctx
        .warehouse
        .load_day(record.clone(), rerun)
        .map(|h| format!("{date} loaded into {}-{:02} ({} days)", h.year, h.month, h.days))
        .map_err(|e| e.to_string());
    finish(&mut report, Stage::Warehouse, loaded, false)?;
    report.record = Some(record);
    Ok(report)
}

fn maintenance(
    ctx: &NightlyContext<'_>,
    date: NaiveDate,
    today: NaiveDate,
    now: chrono::DateTime<chrono::Utc>,
) -> StageResult<crate::logstore::StagingHandle> {
    if date >= today {
        return Err(format!("{date} is not in the past (today is {today})"));
    }
    let mut forced = 0;
    if let Some(tracker) = ctx.tracker {
        forced = tracker
            .sessions()
            .force_close_started_on(date, ctx.config.tz, now)
            .len();
        tracker.flush_closed().map_err(|e| e.to_string())?;
    }
    let handle = ctx.log_store.rotate_day(date, today).map_err(|e| e.to_string())?;
    let compacted = ctx.log_store.compact().map_err(|e| e.to_string())?;
    let day = handle.day();
    let msg = format!(
        "{date}: {forced} open sessions closed, {} sessions / {} pageviews / {} closes staged, {compacted} empty partitions compacted",
        day.sessions.len(),
        day.pageviews.len(),
        day.closes.len()
    );
    Ok((handle, msg))
}

fn skip_rest(report: &mut JobReport, log: &JobLog, stages: &[Stage]) -> io::Result<()> {
    for stage in stages {
        log.event(stage.as_str(), "skipped: earlier stage failed")?;
        report.stages.push(StageReport {
            stage: *stage,
            outcome: StageOutcome::Skipped("earlier stage failed".into()),
        });
    }
    Ok(())
}
