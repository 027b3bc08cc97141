//! Injectable time sources. Nothing in the engine reads wall time directly.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, Utc};

pub type Timestamp = DateTime<Utc>;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// Manually advanced clock with microsecond resolution.
#[derive(Debug)]
pub struct ManualClock {
    micros: AtomicI64,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            micros: AtomicI64::new(start.timestamp_micros()),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.micros.store(t.timestamp_micros(), Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) {
        let step = d.num_microseconds().expect("advance step fits in i64 micros");
        self.micros.fetch_add(step, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        DateTime::from_timestamp_micros(self.micros.load(Ordering::SeqCst)).expect("clock in range")
    }
}

/// The engine's single configured zone, used for everything that has a "day".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineTz(pub FixedOffset);

impl Default for EngineTz {
    fn default() -> Self {
        Self::utc()
    }
}

impl EngineTz {
    pub fn utc() -> Self {
        Self(FixedOffset::east_opt(0).unwrap())
    }

    /// Offset east of UTC in whole minutes.
    pub fn from_offset_minutes(minutes: i32) -> Option<Self> {
        FixedOffset::east_opt(minutes * 60).map(Self)
    }

    pub fn offset_minutes(&self) -> i32 {
        self.0.local_minus_utc() / 60
    }

    pub fn date_of(&self, t: Timestamp) -> NaiveDate {
        t.with_timezone(&self.0).date_naive()
    }

    pub fn hour_of(&self, t: Timestamp) -> u32 {
        use chrono::Timelike;
        t.with_timezone(&self.0).hour()
    }

    /// Local midnight at the start of `date`, as UTC.
    pub fn start_of(&self, date: NaiveDate) -> Timestamp {
        date.and_hms_opt(0, 0, 0)
            .unwrap()
            .and_local_timezone(self.0)
            .single()
            .expect("fixed offsets are unambiguous")
            .with_timezone(&Utc)
    }
}
