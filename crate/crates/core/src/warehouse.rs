//! Monthly data marts of daily analytics records, and range queries over them.
//!
//! On disk a warehouse is `<root>/<YYYY>/<MM>.json`, one canonical JSON file
//! per month. Loading a day of a later month seals every earlier mart; a
//! sealed mart only accepts loads with `force` set.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{ratio, round2, AnalyticsDay};
use crate::model::{OriginClass, RefType};

#[derive(Debug, Error)]
pub enum WarehouseError {
    #[error("mart {year}-{month:02} is sealed; use force to backfill")]
    Sealed { year: i32, month: u32 },
    #[error("unknown metric `{name}`; valid metrics: {}", valid.join(", "))]
    UnknownMetric { name: String, valid: Vec<String> },
    #[error("metric `{metric}` cannot be grouped by {group}; groupable: {}", valid.join(", "))]
    UnsupportedGrouping {
        metric: String,
        group: GroupBy,
        valid: Vec<String>,
    },
    #[error("unknown group `{0}`; expected server, origin or referrer_type")]
    UnknownGroup(String),
    #[error("range start {from} is after its end {to}")]
    InvalidRange { from: NaiveDate, to: NaiveDate },
    #[error("mart file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMart {
    pub year: i32,
    pub month: u32,
    pub sealed: bool,
    pub days: BTreeMap<NaiveDate, AnalyticsDay>,
}

impl DataMart {
    fn new(year: i32, month: u32) -> Self {
        Self {
            year,
            month,
            sealed: false,
            days: BTreeMap::new(),
        }
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("mart serializes");
        serde_json::to_vec_pretty(&value).expect("JSON value serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MartHandle {
    pub year: i32,
    pub month: u32,
    pub days: usize,
    pub sealed: bool,
}

impl From<&DataMart> for MartHandle {
    fn from(m: &DataMart) -> Self {
        Self {
            year: m.year,
            month: m.month,
            days: m.days.len(),
            sealed: m.sealed,
        }
    }
}

type Key = (i32, u32);

pub struct Warehouse {
    root: Option<PathBuf>,
    marts: RwLock<BTreeMap<Key, DataMart>>,
}

impl Warehouse {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            marts: RwLock::new(BTreeMap::new()),
        }
    }

    /// Opens (creating if needed) a warehouse directory and loads every mart.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WarehouseError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut marts = BTreeMap::new();
        for year_dir in fs::read_dir(&root)? {
            let year_dir = year_dir?.path();
            if !year_dir.is_dir() {
                continue;
            }
            for file in fs::read_dir(&year_dir)? {
                let path = file?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let mart: DataMart = serde_json::from_slice(&fs::read(&path)?).map_err(|e| WarehouseError::Corrupt {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                if let Some(d) = mart.days.keys().find(|d| (d.year(), d.month()) != (mart.year, mart.month)) {
                    return Err(WarehouseError::Corrupt {
                        path,
                        msg: format!("day {d} outside {}-{:02}", mart.year, mart.month),
                    });
                }
                marts.insert((mart.year, mart.month), mart);
            }
        }
        Ok(Self {
            root: Some(root),
            marts: RwLock::new(marts),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn mart_path(root: &Path, year: i32, month: u32) -> PathBuf {
        root.join(format!("{year:04}")).join(format!("{month:02}.json"))
    }

    fn persist(&self, mart: &DataMart) -> Result<(), WarehouseError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let path = Self::mart_path(root, mart.year, mart.month);
        let dir = path.parent().expect("mart path has a year directory");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{:02}.json.tmp", mart.month));
        fs::write(&tmp, mart.to_canonical_json())?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Upserts a day into its month's mart. Earlier marts are sealed as a side
    /// effect, since a later month's data means they have rolled over.
    pub fn load_day(&self, record: AnalyticsDay, force: bool) -> Result<MartHandle, WarehouseError> {
        let key = (record.date.year(), record.date.month());
        let mut marts = self.marts.write();
        if marts.get(&key).is_some_and(|m| m.sealed) && !force {
            return Err(WarehouseError::Sealed {
                year: key.0,
                month: key.1,
            });
        }
        let mart = marts.entry(key).or_insert_with(|| DataMart::new(key.0, key.1));
        mart.days.insert(record.date, record);
        let handle = MartHandle::from(&*mart);
        self.persist(&marts[&key])?;

        let to_seal: Vec<Key> = marts.range(..key).filter(|(_, m)| !m.sealed).map(|(k, _)| *k).collect();
        for k in to_seal {
            let m = marts.get_mut(&k).expect("key just listed");
            m.sealed = true;
            self.persist(m)?;
        }
        Ok(handle)
    }

    pub fn load_file(&self, path: &Path, force: bool) -> Result<MartHandle, WarehouseError> {
        let record: AnalyticsDay = serde_json::from_slice(&fs::read(path)?)?;
        self.load_day(record, force)
    }

    /// Marks a mart final. Returns `None` when the mart does not exist.
    pub fn seal(&self, year: i32, month: u32) -> Result<Option<MartHandle>, WarehouseError> {
        let mut marts = self.marts.write();
        let Some(mart) = marts.get_mut(&(year, month)) else {
            return Ok(None);
        };
        mart.sealed = true;
        let handle = MartHandle::from(&*mart);
        self.persist(mart)?;
        Ok(Some(handle))
    }

    pub fn marts(&self) -> Vec<MartHandle> {
        self.marts.read().values().map(MartHandle::from).collect()
    }

    pub fn mart(&self, year: i32, month: u32) -> Option<DataMart> {
        self.marts.read().get(&(year, month)).cloned()
    }

    pub fn day(&self, date: NaiveDate) -> Option<AnalyticsDay> {
        self.marts
            .read()
            .get(&(date.year(), date.month()))
            .and_then(|m| m.days.get(&date).cloned())
    }

    pub fn day_count(&self) -> usize {
        self.marts.read().values().map(|m| m.days.len()).sum()
    }

    /// Per-day values of `metric` over `[from, to]`, with a range total that
    /// re-aggregates counts rather than averaging daily ratios.
    pub fn query_range(
        &self,
        metric: &str,
        from: NaiveDate,
        to: NaiveDate,
        group_by: Option<GroupBy>,
    ) -> Result<Series, WarehouseError> {
        let def = metric_def(metric)?;
        if from > to {
            return Err(WarehouseError::InvalidRange { from, to });
        }
        let group_metric = match group_by {
            Some(g) => Some(group_metric(metric, g)?),
            None => None,
        };

        let marts = self.marts.read();
        let days: Vec<(NaiveDate, Option<&AnalyticsDay>)> = from
            .iter_days()
            .take_while(|d| *d <= to)
            .map(|d| (d, marts.get(&(d.year(), d.month())).and_then(|m| m.days.get(&d))))
            .collect();

        let points = days
            .iter()
            .map(|(date, rec)| SeriesPoint {
                date: *date,
                value: rec.map(|r| (def.get)(r)),
            })
            .collect();
        let present: Vec<&AnalyticsDay> = days.iter().filter_map(|(_, r)| *r).collect();
        let total = def.agg.total(&present, def.get);

        let groups = match (group_by, group_metric) {
            (Some(g), Some(gm)) => grouped(&days, g, gm),
            _ => Vec::new(),
        };
        Ok(Series {
            metric: def.name.to_string(),
            from,
            to,
            group_by,
            points,
            total,
            groups,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Server,
    Origin,
    ReferrerType,
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupBy::Server => "server",
            GroupBy::Origin => "origin",
            GroupBy::ReferrerType => "referrer_type",
        })
    }
}

impl FromStr for GroupBy {
    type Err = WarehouseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "server" => Ok(GroupBy::Server),
            "origin" => Ok(GroupBy::Origin),
            "referrer_type" | "referrer" => Ok(GroupBy::ReferrerType),
            other => Err(WarehouseError::UnknownGroup(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub date: NaiveDate,
    /// `None` marks a day with no loaded record.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSeries {
    pub key: String,
    pub points: Vec<SeriesPoint>,
    pub total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub metric: String,
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub group_by: Option<GroupBy>,
    pub points: Vec<SeriesPoint>,
    pub total: Option<f64>,
    pub groups: Vec<GroupSeries>,
}

impl Series {
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("series serializes");
        serde_json::to_vec(&value).expect("JSON value serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,group,value\n");
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for p in &self.points {
            out.push_str(&format!("{},,{}\n", p.date, fmt(p.value)));
        }
        for g in &self.groups {
            for p in &g.points {
                out.push_str(&format!("{},{},{}\n", p.date, g.key, fmt(p.value)));
            }
        }
        out.push_str(&format!("total,,{}\n", fmt(self.total)));
        for g in &self.groups {
            out.push_str(&format!("total,{},{}\n", g.key, fmt(g.total)));
        }
        out
    }
}

type Field = fn(&AnalyticsDay) -> f64;

#[derive(Clone, Copy)]
enum Agg {
    /// Additive count; total is the sum.
    Sum,
    /// Total recomputed from summed numerator and denominator.
    Ratio(Field, Field),
    /// Total is the mean weighted by another count.
    Mean(Field),
    Max,
    /// Only meaningful per day; no range total.
    Point,
}

impl Agg {
    fn total(self, days: &[&AnalyticsDay], get: Field) -> Option<f64> {
        if days.is_empty() {
            return None;
        }
        let sum = |f: Field| days.iter().map(|d| f(d)).sum::<f64>();
        Some(match self {
            Agg::Sum => sum(get),
            Agg::Ratio(num, den) => ratio(sum(num) as u64, sum(den) as u64),
            Agg::Mean(weight) => {
                let w = sum(weight);
                if w == 0.0 {
                    0.0
                } else {
                    round2(days.iter().map(|d| get(d) * weight(d)).sum::<f64>() / w)
                }
            }
            Agg::Max => days.iter().map(|d| get(d)).fold(f64::MIN, f64::max),
            Agg::Point => return None,
        })
    }
}

struct MetricDef {
    name: &'static str,
    get: Field,
    agg: Agg,
}

macro_rules! count {
    ($f:ident) => {
        MetricDef {
            name: stringify!($f),
            get: |d| d.$f as f64,
            agg: Agg::Sum,
        }
    };
}

macro_rules! ratio_of {
    ($f:ident, $num:ident / $den:ident) => {
        MetricDef {
            name: stringify!($f),
            get: |d| d.$f,
            agg: Agg::Ratio(|d| d.$num as f64, |d| d.$den as f64),
        }
    };
}

macro_rules! mean_by {
    ($f:ident, $w:ident) => {
        MetricDef {
            name: stringify!($f),
            get: |d| d.$f,
            agg: Agg::Mean(|d| d.$w as f64),
        }
    };
}

// Day-level distinct counts (users, ips) are summed as user-days and ip-days.
static METRICS: &[MetricDef] = &[
    count!(sessions_total),
    count!(pageviews_total),
    count!(unique_users),
    count!(guest_sessions),
    count!(authenticated_sessions),
    count!(in_house_sessions),
    count!(in_house_pageviews),
    count!(in_house_users),
    count!(in_country_sessions),
    count!(in_country_pageviews),
    count!(in_country_users),
    count!(out_country_sessions),
    count!(out_country_pageviews),
    count!(out_country_users),
    ratio_of!(pageviews_per_session, pageviews_total / sessions_total),
    ratio_of!(pageviews_per_user, pageviews_total / unique_users),
    ratio_of!(sessions_per_user, sessions_total / unique_users),
    ratio_of!(in_house_pps, in_house_pageviews / in_house_sessions),
    ratio_of!(in_house_ppu, in_house_pageviews / in_house_users),
    ratio_of!(in_house_spu, in_house_sessions / in_house_users),
    ratio_of!(in_country_pps, in_country_pageviews / in_country_sessions),
    ratio_of!(in_country_ppu, in_country_pageviews / in_country_users),
    ratio_of!(in_country_spu, in_country_sessions / in_country_users),
    ratio_of!(out_country_pps, out_country_pageviews / out_country_sessions),
    ratio_of!(out_country_ppu, out_country_pageviews / out_country_users),
    ratio_of!(out_country_spu, out_country_sessions / out_country_users),
    mean_by!(avg_gen_time_ms, pageviews_total),
    mean_by!(avg_db_delay_ms, pageviews_total),
    mean_by!(avg_session_duration_s, sessions_total),
    MetricDef {
        name: "p95_gen_time_ms",
        get: |d| d.p95_gen_time_ms,
        agg: Agg::Point,
    },
    MetricDef {
        name: "max_gen_time_ms",
        get: |d| d.max_gen_time_ms,
        agg: Agg::Max,
    },
    count!(slow_page_count),
    count!(error_count),
    count!(unauthorized_attempt_count),
    MetricDef {
        name: "peak_hour",
        get: |d| d.peak_hour as f64,
        agg: Agg::Point,
    },
    MetricDef {
        name: "peak_hour_pageviews",
        get: |d| d.peak_hour_pageviews as f64,
        agg: Agg::Max,
    },
    count!(distinct_ips),
    count!(multi_session_ip_count),
    count!(bot_sessions),
    count!(mobile_sessions),
    count!(desktop_sessions),
    count!(bounce_sessions),
    count!(cookieless_sessions),
    MetricDef {
        name: "distinct_services",
        get: |d| d.distinct_services as f64,
        agg: Agg::Max,
    },
    MetricDef {
        name: "active_servers",
        get: |d| d.active_servers as f64,
        agg: Agg::Max,
    },
];

pub fn metric_names() -> Vec<&'static str> {
    METRICS.iter().map(|m| m.name).collect()
}

fn metric_def(name: &str) -> Result<&'static MetricDef, WarehouseError> {
    METRICS
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| WarehouseError::UnknownMetric {
            name: name.to_string(),
            valid: metric_names().into_iter().map(String::from).collect(),
        })
}

/// Per-group counts available from the stored aggregates.
#[derive(Debug, Clone, Copy, Default)]
struct GroupCounts {
    sessions: u64,
    pageviews: u64,
    users: u64,
}

#[derive(Debug, Clone, Copy)]
enum GroupMetric {
    Sessions,
    Pageviews,
    Users,
    Pps,
    Ppu,
    Spu,
}

impl GroupMetric {
    fn value(self, c: GroupCounts) -> f64 {
        match self {
            GroupMetric::Sessions => c.sessions as f64,
            GroupMetric::Pageviews => c.pageviews as f64,
            GroupMetric::Users => c.users as f64,
            GroupMetric::Pps => ratio(c.pageviews, c.sessions),
            GroupMetric::Ppu => ratio(c.pageviews, c.users),
            GroupMetric::Spu => ratio(c.sessions, c.users),
        }
    }
}

fn group_metric(metric: &str, group: GroupBy) -> Result<GroupMetric, WarehouseError> {
    let all = [
        ("sessions_total", GroupMetric::Sessions),
        ("pageviews_total", GroupMetric::Pageviews),
        ("unique_users", GroupMetric::Users),
        ("pageviews_per_session", GroupMetric::Pps),
        ("pageviews_per_user", GroupMetric::Ppu),
        ("sessions_per_user", GroupMetric::Spu),
    ];
    let allowed: &[(&str, GroupMetric)] = match group {
        GroupBy::ReferrerType => &all[..1],
        GroupBy::Server | GroupBy::Origin => &all,
    };
    allowed
        .iter()
        .find(|(n, _)| *n == metric)
        .map(|(_, m)| *m)
        .ok_or_else(|| WarehouseError::UnsupportedGrouping {
            metric: metric.to_string(),
            group,
            valid: allowed.iter().map(|(n, _)| n.to_string()).collect(),
        })
}

fn group_counts(d: &AnalyticsDay, group: GroupBy) -> Vec<(String, GroupCounts)> {
    match group {
        GroupBy::Server => d
            .per_server
            .iter()
            .map(|(id, s)| {
                (
                    id.to_string(),
                    GroupCounts {
                        sessions: s.sessions,
                        pageviews: s.pageviews,
                        users: s.unique_users,
                    },
                )
            })
            .collect(),
        GroupBy::Origin => OriginClass::ALL
            .iter()
            .map(|o| {
                let s = d.origin(*o);
                (
                    o.as_str().to_string(),
                    GroupCounts {
                        sessions: s.sessions,
                        pageviews: s.pageviews,
                        users: s.users,
                    },
                )
            })
            .collect(),
        GroupBy::ReferrerType => RefType::ALL
            .iter()
            .map(|r| {
                (
                    r.as_str().to_string(),
                    GroupCounts {
                        sessions: d.referrer_type_freq[r.index()],
                        ..Default::default()
                    },
                )
            })
            .collect(),
    }
}

fn grouped(days: &[(NaiveDate, Option<&AnalyticsDay>)], group: GroupBy, metric: GroupMetric) -> Vec<GroupSeries> {
    let per_day: Vec<(NaiveDate, Option<BTreeMap<String, GroupCounts>>)> = days
        .iter()
        .map(|(date, rec)| (*date, rec.map(|r| group_counts(r, group).into_iter().collect())))
        .collect();

    // fixed order for origin and referrer type, numeric order for servers
    let mut keys: Vec<String> = Vec::new();
    for (_, counts) in &per_day {
        for k in counts.iter().flat_map(|c| c.keys()) {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    match group {
        GroupBy::Server => keys.sort_by_key(|k| k.parse::<u16>().unwrap_or(u16::MAX)),
        GroupBy::Origin => keys = OriginClass::ALL.iter().map(|o| o.as_str().to_string()).collect(),
        GroupBy::ReferrerType => keys = RefType::ALL.iter().map(|r| r.as_str().to_string()).collect(),
    }

    keys.into_iter()
        .map(|key| {
            let mut sum = GroupCounts::default();
            let mut any = false;
            let points = per_day
                .iter()
                .map(|(date, counts)| {
                    let value = counts.as_ref().map(|c| {
                        let g = c.get(&key).copied().unwrap_or_default();
                        sum.sessions += g.sessions;
                        sum.pageviews += g.pageviews;
                        sum.users += g.users;
                        any = true;
                        metric.value(g)
                    });
                    SeriesPoint { date: *date, value }
                })
                .collect();
            GroupSeries {
                key,
                points,
                total: any.then(|| metric.value(sum)),
            }
        })
        .collect()
}
