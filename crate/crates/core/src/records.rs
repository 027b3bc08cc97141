//! Rows written to the log store.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::model::{BrowserType, RefType, ReferrerInfo, UserAgentInfo};
use crate::session_store::LogoutType;

/// One row per session. Serialized column names follow the `log_session` table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    #[serde(rename = "log_id")]
    pub log_id: u64,
    #[serde(rename = "log_opn_id")]
    pub opn_id: u64,
    #[serde(rename = "log_datetime")]
    pub datetime: Timestamp,
    /// 0 for guests.
    #[serde(rename = "log_uid")]
    pub user_id: u64,
    #[serde(rename = "log_username")]
    pub username: String,
    #[serde(rename = "log_ip")]
    pub ip: Ipv4Addr,
    #[serde(rename = "log_proxy")]
    pub proxy: String,
    #[serde(rename = "log_os_name")]
    pub os_name: String,
    #[serde(rename = "log_os_ver")]
    pub os_version: String,
    #[serde(rename = "log_brow_name")]
    pub browser_name: String,
    #[serde(rename = "log_brow_ver")]
    pub browser_version: String,
    #[serde(rename = "log_brow_type")]
    pub browser_type: BrowserType,
    #[serde(rename = "log_lang")]
    pub lang: String,
    #[serde(rename = "log_country")]
    pub country: String,
    #[serde(rename = "log_cookie_check")]
    pub cookie_check: bool,
    #[serde(rename = "log_landing_url")]
    pub landing_url: String,
    #[serde(rename = "log_ref")]
    pub ref_name: String,
    #[serde(rename = "log_ref_host")]
    pub ref_host: String,
    #[serde(rename = "log_ref_search_key")]
    pub ref_search_key: String,
    #[serde(rename = "log_ref_type")]
    pub ref_type: RefType,
    #[serde(rename = "log_server_id")]
    pub server_id: u16,
    #[serde(rename = "log_service")]
    pub service: String,
    #[serde(rename = "log_session_id")]
    pub session_id: String,
}

impl SessionRecord {
    /// A guest, direct-entry session with every descriptive field blank.
    pub fn blank(session_id: impl Into<String>, datetime: Timestamp, ip: Ipv4Addr) -> Self {
        Self {
            log_id: 0,
            opn_id: 0,
            datetime,
            user_id: 0,
            username: String::new(),
            ip,
            proxy: String::new(),
            os_name: String::new(),
            os_version: String::new(),
            browser_name: String::new(),
            browser_version: String::new(),
            browser_type: BrowserType::Unknown,
            lang: String::new(),
            country: String::new(),
            cookie_check: false,
            landing_url: String::new(),
            ref_name: String::new(),
            ref_host: String::new(),
            ref_search_key: String::new(),
            ref_type: RefType::Direct,
            server_id: 0,
            service: String::new(),
            session_id: session_id.into(),
        }
    }

    pub fn user_agent(&self) -> UserAgentInfo {
        UserAgentInfo {
            os_name: self.os_name.clone(),
            os_version: self.os_version.clone(),
            browser_name: self.browser_name.clone(),
            browser_version: self.browser_version.clone(),
            browser_type: self.browser_type,
        }
    }

    pub fn referrer(&self) -> ReferrerInfo {
        ReferrerInfo {
            ref_type: self.ref_type,
            ref_name: self.ref_name.clone(),
            ref_host: self.ref_host.clone(),
            search_key: self.ref_search_key.clone(),
        }
    }

    pub fn is_guest(&self) -> bool {
        self.user_id == 0
    }

    /// Identity used for unique-user counts: the account for authenticated
    /// sessions, otherwise address plus browser environment.
    pub fn user_key(&self) -> String {
        if self.user_id > 0 {
            format!("u:{}", self.user_id)
        } else {
            format!(
                "g:{}|{}|{}|{}|{}",
                self.ip, self.os_name, self.os_version, self.browser_name, self.browser_version
            )
        }
    }
}

/// One row per page request (`log_page`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageviewRecord {
    pub session_id: String,
    pub seq: u64,
    pub datetime: Timestamp,
    pub url: String,
    pub app_header: String,
    pub app_message: String,
    pub cookie_snapshot: BTreeMap<String, String>,
    pub session_snapshot: BTreeMap<String, String>,
    pub post_snapshot: BTreeMap<String, String>,
    pub get_snapshot: BTreeMap<String, String>,
    pub gen_time_ms: f64,
    pub db_delay_ms: f64,
    /// 0 when the page rendered without error.
    pub error_code: i32,
    pub server_id: u16,
    pub service: String,
}

impl PageviewRecord {
    /// An error-free pageview with empty payloads.
    pub fn blank(session_id: impl Into<String>, seq: u64, datetime: Timestamp) -> Self {
        Self {
            session_id: session_id.into(),
            seq,
            datetime,
            url: String::new(),
            app_header: String::new(),
            app_message: String::new(),
            cookie_snapshot: BTreeMap::new(),
            session_snapshot: BTreeMap::new(),
            post_snapshot: BTreeMap::new(),
            get_snapshot: BTreeMap::new(),
            gen_time_ms: 0.0,
            db_delay_ms: 0.0,
            error_code: 0,
            server_id: 0,
            service: String::new(),
        }
    }
}

/// Written when a session ends, however it ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionClose {
    pub session_id: String,
    pub ended_at: Timestamp,
    pub logout_type: LogoutType,
}
