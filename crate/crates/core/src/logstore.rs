//! Day-partitioned, append-only storage for session, pageview and close rows.
//!
//! A record belongs to the partition of its session's start date, so the
//! pageviews of a session that runs past midnight stay with the day it began.
//! After midnight a finished day is rotated: its partition is sealed and moved
//! to a staging area that the nightly extraction reads, and the live store for
//! that date is emptied.
//!
//! On disk (optional) every partition is a directory of NDJSON segments:
//!
//! ```text
//! live/2018-03-14/{sessions,pageviews,closes}.ndjson
//! staging/2018-03-14/{sessions,pageviews,closes}.ndjson + index.json
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::Mutex;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::clock::EngineTz;
use crate::records::{PageviewRecord, SessionClose, SessionRecord};
use crate::session_store::LogoutType;

const SESSIONS: &str = "sessions.ndjson";
const PAGEVIEWS: &str = "pageviews.ndjson";
const CLOSES: &str = "closes.ndjson";
const INDEX: &str = "index.json";
/// Byte offset recorded every this many lines in the staging index.
const INDEX_STRIDE: usize = 1024;
/// How long session -> partition mappings outlive a rotation.
const SEALED_MAPPING_DAYS: i64 = 7;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("partition {0} is sealed; re-resolve the target partition")]
    RotationRace(NaiveDate),
    #[error("cannot rotate {date}: only days before {today} can be rotated")]
    RotateNotPast { date: NaiveDate, today: NaiveDate },
    #[error("no staged partition for {0}")]
    NotFound(NaiveDate),
    #[error("{path}: line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Sequence numbers assigned by one append, 1-based per (partition, record kind).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendAck {
    pub date: NaiveDate,
    pub session_seq: Option<u64>,
    pub pageview_seq: u64,
}

/// Contents of a rotated day.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StagedDay {
    pub sessions: Vec<SessionRecord>,
    pub pageviews: Vec<PageviewRecord>,
    pub closes: Vec<SessionClose>,
}

/// Handle to a sealed, staged partition. Rotating the same date twice yields
/// handles pointing at the same data.
#[derive(Debug, Clone)]
pub struct StagingHandle {
    date: NaiveDate,
    day: Arc<StagedDay>,
}

impl PartialEq for StagingHandle {
    fn eq(&self, other: &Self) -> bool {
        self.date == other.date && Arc::ptr_eq(&self.day, &other.day)
    }
}

impl StagingHandle {
    /// Wraps records produced elsewhere (imports, synthetic days).
    pub fn from_records(date: NaiveDate, day: StagedDay) -> Self {
        Self {
            date,
            day: Arc::new(day),
        }
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }

    pub fn day(&self) -> &StagedDay {
        &self.day
    }

    pub fn read(&self, filter: &RecordFilter) -> PartitionReader<'_> {
        PartitionReader::new(&self.day, filter)
    }

    /// Writes sessions as CSV using the `log_session` column names.
    pub fn export_sessions_csv<W: Write>(&self, out: W) -> Result<(), LogError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.day.sessions {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserClass {
    Guest,
    Authenticated,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordFilter {
    pub service: Option<String>,
    pub server_id: Option<u16>,
    pub user_class: Option<UserClass>,
}

impl RecordFilter {
    pub fn all() -> Self {
        Self::default()
    }

    fn session_matches(&self, s: &SessionRecord) -> bool {
        self.service.as_deref().is_none_or(|v| v == s.service)
            && self.server_id.is_none_or(|v| v == s.server_id)
            && self.class_matches(s)
    }

    fn class_matches(&self, s: &SessionRecord) -> bool {
        match self.user_class {
            None => true,
            Some(UserClass::Guest) => s.is_guest(),
            Some(UserClass::Authenticated) => !s.is_guest(),
        }
    }
}

/// Filtered, append-ordered view over a staged partition.
pub struct PartitionReader<'a> {
    day: &'a StagedDay,
    filter: RecordFilter,
    by_session: HashMap<&'a str, &'a SessionRecord>,
}

impl<'a> PartitionReader<'a> {
    fn new(day: &'a StagedDay, filter: &RecordFilter) -> Self {
        let by_session = if filter.user_class.is_some() || filter != &RecordFilter::default() {
            day.sessions.iter().map(|s| (s.session_id.as_str(), s)).collect()
        } else {
            HashMap::new()
        };
        Self {
            day,
            filter: filter.clone(),
            by_session,
        }
    }

    pub fn sessions(&self) -> impl Iterator<Item = &'a SessionRecord> + '_ {
        self.day.sessions.iter().filter(|s| self.filter.session_matches(s))
    }

    /// Pageviews filter on their own server and service; user class comes from the session.
    pub fn pageviews(&self) -> impl Iterator<Item = &'a PageviewRecord> + '_ {
        self.day.pageviews.iter().filter(|p| {
            self.filter.service.as_deref().is_none_or(|v| v == p.service)
                && self.filter.server_id.is_none_or(|v| v == p.server_id)
                && (self.filter.user_class.is_none()
                    || self
                        .by_session
                        .get(p.session_id.as_str())
                        .is_some_and(|s| self.filter.class_matches(s)))
        })
    }

    pub fn closes(&self) -> impl Iterator<Item = &'a SessionClose> + '_ {
        self.day.closes.iter().filter(|c| {
            self.filter == RecordFilter::default()
                || self
                    .by_session
                    .get(c.session_id.as_str())
                    .is_some_and(|s| self.filter.session_matches(s))
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentIndex {
    records: usize,
    bytes: u64,
    /// Byte offset of line `i * stride`.
    offsets: Vec<u64>,
    stride: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StagingIndex {
    date: NaiveDate,
    sessions: SegmentIndex,
    pageviews: SegmentIndex,
    closes: SegmentIndex,
}

struct Segments {
    sessions: BufWriter<File>,
    pageviews: BufWriter<File>,
    closes: BufWriter<File>,
}

impl Segments {
    fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> std::io::Result<BufWriter<File>> {
            let f = OpenOptions::new().create(true).append(true).open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            sessions: open(SESSIONS)?,
            pageviews: open(PAGEVIEWS)?,
            closes: open(CLOSES)?,
        })
    }
}

#[derive(Default)]
struct LivePartition {
    day: StagedDay,
    segments: Option<Segments>,
}

#[derive(Default)]
struct State {
    live: BTreeMap<NaiveDate, LivePartition>,
    staged: BTreeMap<NaiveDate, StagingHandle>,
    session_dates: HashMap<String, NaiveDate>,
}

pub struct LogStore {
    root: Option<PathBuf>,
    sync: bool,
    tz: EngineTz,
    state: Mutex<State>,
}

impl LogStore {
    pub fn in_memory(tz: EngineTz) -> Self {
        Self {
            root: None,
            sync: false,
            tz,
            state: Mutex::new(State::default()),
        }
    }

    /// Opens (or creates) a store under `root`, reloading live and staged partitions.
    pub fn open(root: &Path, tz: EngineTz) -> Result<Self, LogError> {
        fs::create_dir_all(root.join("live"))?;
        fs::create_dir_all(root.join("staging"))?;
        let mut state = State::default();
        for (date, dir) in dated_dirs(&root.join("live"))? {
            let day = read_day(&dir)?;
            for s in &day.sessions {
                state.session_dates.insert(s.session_id.clone(), date);
            }
            state.live.insert(date, LivePartition { day, segments: None });
        }
        for (date, dir) in dated_dirs(&root.join("staging"))? {
            let day = read_day(&dir)?;
            for s in &day.sessions {
                state.session_dates.insert(s.session_id.clone(), date);
            }
            state.staged.insert(date, StagingHandle::from_records(date, day));
        }
        if let Some(last) = state.staged.keys().next_back().copied() {
            let horizon = last - chrono::Duration::days(SEALED_MAPPING_DAYS);
            state.session_dates.retain(|_, d| *d >= horizon);
        }
        Ok(Self {
            root: Some(root.to_path_buf()),
            sync: false,
            tz,
            state: Mutex::new(state),
        })
    }

    /// fsync every append instead of flushing to the OS only.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn tz(&self) -> EngineTz {
        self.tz
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn partition<'s>(&self, state: &'s mut State, date: NaiveDate) -> Result<&'s mut LivePartition, LogError> {
        if state.staged.contains_key(&date) {
            return Err(LogError::RotationRace(date));
        }
        let part = state.live.entry(date).or_default();
        if part.segments.is_none() {
            if let Some(root) = &self.root {
                part.segments = Some(Segments::open(&root.join("live").join(date.to_string()))?);
            }
        }
        Ok(part)
    }

    fn write_line<T: Serialize>(&self, w: &mut BufWriter<File>, rec: &T) -> Result<(), LogError> {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
        w.flush()?;
        if self.sync {
            w.get_ref().sync_data()?;
        }
        Ok(())
    }

    pub fn append_session(&self, rec: SessionRecord) -> Result<u64, LogError> {
        let mut state = self.state.lock();
        self.append_session_locked(&mut state, rec)
    }

    fn append_session_locked(&self, state: &mut State, rec: SessionRecord) -> Result<u64, LogError> {
        let date = self.tz.date_of(rec.datetime);
        let part = self.partition(state, date)?;
        if let Some(seg) = part.segments.as_mut() {
            self.write_line(&mut seg.sessions, &rec)?;
        }
        let sid = rec.session_id.clone();
        part.day.sessions.push(rec);
        let seq = part.day.sessions.len() as u64;
        state.session_dates.insert(sid, date);
        Ok(seq)
    }

    fn date_for_session(&self, state: &State, session_id: &str, fallback: chrono::DateTime<chrono::Utc>) -> NaiveDate {
        state
            .session_dates
            .get(session_id)
            .copied()
            .unwrap_or_else(|| self.tz.date_of(fallback))
    }

    pub fn append_pageview(&self, rec: PageviewRecord) -> Result<u64, LogError> {
        let mut state = self.state.lock();
        self.append_pageview_locked(&mut state, rec)
    }

    fn append_pageview_locked(&self, state: &mut State, rec: PageviewRecord) -> Result<u64, LogError> {
        let date = self.date_for_session(state, &rec.session_id, rec.datetime);
        let part = self.partition(state, date)?;
        if let Some(seg) = part.segments.as_mut() {
            self.write_line(&mut seg.pageviews, &rec)?;
        }
        part.day.pageviews.push(rec);
        Ok(part.day.pageviews.len() as u64)
    }

    /// A pageview plus, for a session's first page, its session row, written
    /// in one store interaction.
    pub fn append_batch(&self, session: Option<SessionRecord>, pageview: PageviewRecord) -> Result<AppendAck, LogError> {
        let mut state = self.state.lock();
        let session_seq = match session {
            Some(s) => {
                // check the pageview's target before writing anything
                if state.staged.contains_key(&self.tz.date_of(s.datetime)) {
                    return Err(LogError::RotationRace(self.tz.date_of(s.datetime)));
                }
                Some(self.append_session_locked(&mut state, s)?)
            }
            None => None,
        };
        let date = self.date_for_session(&state, &pageview.session_id, pageview.datetime);
        let pageview_seq = self.append_pageview_locked(&mut state, pageview)?;
        Ok(AppendAck {
            date,
            session_seq,
            pageview_seq,
        })
    }

    pub fn append_close(&self, rec: SessionClose) -> Result<u64, LogError> {
        let mut state = self.state.lock();
        let date = self.date_for_session(&state, &rec.session_id, rec.ended_at);
        let part = self.partition(&mut state, date)?;
        if let Some(seg) = part.segments.as_mut() {
            self.write_line(&mut seg.closes, &rec)?;
        }
        part.day.closes.push(rec);
        Ok(part.day.closes.len() as u64)
    }

    /// Seals `date`, moves it to staging and empties the live partition.
    /// Sessions without a close row are closed as timeouts at their last pageview.
    pub fn rotate_day(&self, date: NaiveDate, today: NaiveDate) -> Result<StagingHandle, LogError> {
        if date >= today {
            return Err(LogError::RotateNotPast { date, today });
        }
        let mut state = self.state.lock();
        if let Some(h) = state.staged.get(&date) {
            return Ok(h.clone());
        }
        let mut day = state.live.remove(&date).map(|p| p.day).unwrap_or_default();

        let closed: HashSet<&str> = day.closes.iter().map(|c| c.session_id.as_str()).collect();
        let mut last_seen: HashMap<&str, chrono::DateTime<chrono::Utc>> = HashMap::new();
        for p in &day.pageviews {
            let e = last_seen.entry(p.session_id.as_str()).or_insert(p.datetime);
            *e = (*e).max(p.datetime);
        }
        let forced: Vec<SessionClose> = day
            .sessions
            .iter()
            .filter(|s| !closed.contains(s.session_id.as_str()))
            .map(|s| SessionClose {
                session_id: s.session_id.clone(),
                ended_at: last_seen.get(s.session_id.as_str()).copied().unwrap_or(s.datetime).max(s.datetime),
                logout_type: LogoutType::WindowCloseTimeout,
            })
            .collect();
        day.closes.extend(forced);

        if let Some(root) = &self.root {
            write_staging(root, date, &day)?;
            let live_dir = root.join("live").join(date.to_string());
            if live_dir.exists() {
                fs::remove_dir_all(&live_dir)?;
            }
        }
        // keep recent mappings so late writes for a sealed day are refused
        // instead of leaking into the following day
        let horizon = date - chrono::Duration::days(SEALED_MAPPING_DAYS);
        state.session_dates.retain(|_, d| *d >= horizon);
        let handle = StagingHandle::from_records(date, day);
        state.staged.insert(date, handle.clone());
        Ok(handle)
    }

    pub fn staging(&self, date: NaiveDate) -> Result<StagingHandle, LogError> {
        self.state.lock().staged.get(&date).cloned().ok_or(LogError::NotFound(date))
    }

    pub fn read_partition<'h>(&self, handle: &'h StagingHandle, filter: &RecordFilter) -> PartitionReader<'h> {
        handle.read(filter)
    }

    pub fn live_dates(&self) -> Vec<NaiveDate> {
        self.state.lock().live.keys().copied().collect()
    }

    pub fn staged_dates(&self) -> Vec<NaiveDate> {
        self.state.lock().staged.keys().copied().collect()
    }

    /// (sessions, pageviews, closes) currently live for `date`.
    pub fn live_counts(&self, date: NaiveDate) -> (usize, usize, usize) {
        let state = self.state.lock();
        state
            .live
            .get(&date)
            .map(|p| (p.day.sessions.len(), p.day.pageviews.len(), p.day.closes.len()))
            .unwrap_or_default()
    }

    /// Copy of a live partition, for inspection.
    pub fn live_snapshot(&self, date: NaiveDate) -> StagedDay {
        self.state.lock().live.get(&date).map(|p| p.day.clone()).unwrap_or_default()
    }

    /// Drops empty live partitions and their directories.
    pub fn compact(&self) -> Result<usize, LogError> {
        let mut state = self.state.lock();
        let empty: Vec<NaiveDate> = state
            .live
            .iter()
            .filter(|(_, p)| p.day.sessions.is_empty() && p.day.pageviews.is_empty() && p.day.closes.is_empty())
            .map(|(d, _)| *d)
            .collect();
        for d in &empty {
            state.live.remove(d);
            if let Some(root) = &self.root {
                let dir = root.join("live").join(d.to_string());
                if dir.exists() {
                    fs::remove_dir_all(dir)?;
                }
            }
        }
        Ok(empty.len())
    }
}

fn dated_dirs(dir: &Path) -> Result<Vec<(NaiveDate, PathBuf)>, LogError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        if let Some(date) = entry.file_name().to_str().and_then(|n| n.parse::<NaiveDate>().ok()) {
            out.push((date, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn read_day(dir: &Path) -> Result<StagedDay, LogError> {
    Ok(StagedDay {
        sessions: read_segment(&dir.join(SESSIONS))?,
        pageviews: read_segment(&dir.join(PAGEVIEWS))?,
        closes: read_segment(&dir.join(CLOSES))?,
    })
}

/// Reads an NDJSON segment. A final line without its newline is an
/// unacknowledged torn write and is dropped.
fn read_segment<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, LogError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            break;
        }
        if buf.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(buf.trim_end()).map_err(|source| LogError::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            source,
        })?);
    }
    Ok(out)
}

fn write_segment<T: Serialize>(path: &Path, items: &[T]) -> Result<SegmentIndex, LogError> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut offsets = Vec::new();
    let mut bytes = 0u64;
    for (i, item) in items.iter().enumerate() {
        if i % INDEX_STRIDE == 0 {
            offsets.push(bytes);
        }
        let line = serde_json::to_vec(item)?;
        w.write_all(&line)?;
        w.write_all(b"\n")?;
        bytes += line.len() as u64 + 1;
    }
    w.flush()?;
    w.get_ref().sync_all()?;
    Ok(SegmentIndex {
        records: items.len(),
        bytes,
        offsets,
        stride: INDEX_STRIDE,
    })
}

fn write_staging(root: &Path, date: NaiveDate, day: &StagedDay) -> Result<(), LogError> {
    let staging = root.join("staging");
    let tmp = staging.join(format!(".{date}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let index = StagingIndex {
        date,
        sessions: write_segment(&tmp.join(SESSIONS), &day.sessions)?,
        pageviews: write_segment(&tmp.join(PAGEVIEWS), &day.pageviews)?,
        closes: write_segment(&tmp.join(CLOSES), &day.closes)?,
    };
    fs::write(tmp.join(INDEX), serde_json::to_vec_pretty(&index)?)?;
    fs::rename(&tmp, staging.join(date.to_string()))?;
    Ok(())
}

/// Writes a staged day straight into `root/staging/<date>`, e.g. for synthetic
/// or imported days that never passed through the live store.
pub fn write_staged_day(root: &Path, date: NaiveDate, day: &StagedDay) -> Result<(), LogError> {
    fs::create_dir_all(root.join("staging"))?;
    let target = root.join("staging").join(date.to_string());
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    write_staging(root, date, day)
}
