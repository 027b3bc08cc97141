use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{config_lines, truncate_field};

const BUNDLED_BOTS: &str = include_str!("../../data/bots.txt");

/// Browser class code stored in `log_brow_type`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum BrowserType {
    Unknown = 0,
    Desktop = 1,
    Mobile = 2,
    Bot = 3,
}

impl From<BrowserType> for u8 {
    fn from(t: BrowserType) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for BrowserType {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Self::Unknown),
            1 => Ok(Self::Desktop),
            2 => Ok(Self::Mobile),
            3 => Ok(Self::Bot),
            _ => Err(format!("invalid browser type {v}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAgentInfo {
    pub os_name: String,
    pub os_version: String,
    pub browser_name: String,
    pub browser_version: String,
    pub browser_type: BrowserType,
}

impl UserAgentInfo {
    pub fn unknown() -> Self {
        Self {
            os_name: String::new(),
            os_version: String::new(),
            browser_name: String::new(),
            browser_version: String::new(),
            browser_type: BrowserType::Unknown,
        }
    }
}

/// Case-insensitive substring list of crawler signatures.
#[derive(Debug, Clone)]
pub struct BotList {
    // (lowercased needle, display name), longest needle first
    entries: Vec<(String, String)>,
}

impl BotList {
    pub fn parse(text: &str) -> Self {
        let mut entries: Vec<(String, String)> = config_lines(text)
            .map(|l| (l.to_ascii_lowercase(), l.to_string()))
            .collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        entries.dedup_by(|a, b| a.0 == b.0);
        Self { entries }
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_BOTS)
    }

    /// Returns the list entry matching `ua`, if any.
    pub fn find(&self, ua: &str) -> Option<&str> {
        let lower = ua.to_ascii_lowercase();
        self.entries
            .iter()
            .find(|(needle, _)| lower.contains(needle.as_str()))
            .map(|(_, name)| name.as_str())
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.entries.iter().any(|(_, n)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// User-agent parser holding its bot list.
#[derive(Debug, Clone)]
pub struct UserAgentParser {
    bots: BotList,
}

impl Default for UserAgentParser {
    fn default() -> Self {
        Self::new(BotList::bundled())
    }
}

impl UserAgentParser {
    pub fn new(bots: BotList) -> Self {
        Self { bots }
    }

    pub fn bots(&self) -> &BotList {
        &self.bots
    }

    pub fn parse(&self, ua: &str) -> UserAgentInfo {
        if ua.trim().is_empty() {
            return UserAgentInfo::unknown();
        }
        let (os_name, os_version) = detect_os(ua);
        if let Some(bot) = self.bots.find(ua) {
            return UserAgentInfo {
                os_name: truncate_field(os_name),
                os_version: truncate_field(&os_version),
                browser_name: bot.to_string(),
                browser_version: truncate_field(&version_after(ua, bot).unwrap_or_default()),
                browser_type: BrowserType::Bot,
            };
        }
        let Some((name, version)) = detect_browser(ua) else {
            return UserAgentInfo {
                os_name: truncate_field(os_name),
                os_version: truncate_field(&os_version),
                ..UserAgentInfo::unknown()
            };
        };
        let mobile = ["Mobi", "Android", "iPhone", "iPad", "iPod"]
            .iter()
            .any(|m| ua.contains(m));
        UserAgentInfo {
            os_name: truncate_field(os_name),
            os_version: truncate_field(&os_version),
            browser_name: name.to_string(),
            browser_version: truncate_field(&version),
            browser_type: if mobile {
                BrowserType::Mobile
            } else {
                BrowserType::Desktop
            },
        }
    }
}

fn default_parser() -> &'static UserAgentParser {
    static PARSER: OnceLock<UserAgentParser> = OnceLock::new();
    PARSER.get_or_init(UserAgentParser::default)
}

/// Parses `ua` with the bundled bot list.
pub fn parse_user_agent(ua: &str) -> UserAgentInfo {
    default_parser().parse(ua)
}

/// Windows NT kernel token to marketing version. `10.0` is shared by Windows 10
/// and 11; ambiguous tokens resolve to the latest release.
const WINDOWS_NT: &[(&str, &str)] = &[
    ("10.0", "11"),
    ("6.3", "8.1"),
    ("6.2", "8"),
    ("6.1", "7"),
    ("6.0", "Vista"),
    ("5.2", "XP"),
    ("5.1", "XP"),
    ("5.0", "2000"),
];

fn detect_os(ua: &str) -> (&'static str, String) {
    if let Some(tok) = token_after(ua, "Windows NT ") {
        let ver = WINDOWS_NT
            .iter()
            .find(|(nt, _)| *nt == tok)
            .map(|(_, v)| v.to_string())
            .unwrap_or_default();
        return ("Windows", ver);
    }
    if ua.contains("Windows Phone") {
        return ("Windows Phone", token_after(ua, "Windows Phone ").unwrap_or_default());
    }
    if ua.contains("Windows") {
        return ("Windows", String::new());
    }
    if let Some(v) = token_after(ua, "Android ") {
        return ("Android", v);
    }
    if ua.contains("Android") {
        return ("Android", String::new());
    }
    for marker in ["iPhone OS ", "CPU OS "] {
        if let Some(v) = token_after(ua, marker) {
            return ("iOS", v.replace('_', "."));
        }
    }
    if let Some(v) = token_after(ua, "Mac OS X ") {
        return ("macOS", v.replace('_', "."));
    }
    if ua.contains("CrOS") {
        return ("Chrome OS", String::new());
    }
    if ua.contains("Linux") {
        return ("Linux", String::new());
    }
    ("", String::new())
}

/// Browser name and major version, in precedence order (Edge and Opera
/// advertise Chrome too, Chrome advertises Safari).
fn detect_browser(ua: &str) -> Option<(&'static str, String)> {
    const RULES: &[(&str, &str)] = &[
        ("Edg/", "Edge"),
        ("EdgA/", "Edge"),
        ("Edge/", "Edge"),
        ("OPR/", "Opera"),
        ("YaBrowser/", "Yandex"),
        ("SamsungBrowser/", "Samsung Internet"),
        ("Firefox/", "Firefox"),
        ("FxiOS/", "Firefox"),
        ("CriOS/", "Chrome"),
        ("Chrome/", "Chrome"),
    ];
    for (marker, name) in RULES {
        if let Some(v) = token_after(ua, marker) {
            return Some((name, major(&v)));
        }
    }
    if ua.contains("Safari/") {
        let v = token_after(ua, "Version/").unwrap_or_default();
        return Some(("Safari", major(&v)));
    }
    if let Some(v) = token_after(ua, "MSIE ") {
        return Some(("Internet Explorer", major(&v)));
    }
    if ua.contains("Trident/") {
        let v = token_after(ua, "rv:").unwrap_or_default();
        return Some(("Internet Explorer", major(&v)));
    }
    None
}

fn token_after(ua: &str, marker: &str) -> Option<String> {
    let start = ua.find(marker)? + marker.len();
    let tok: String = ua[start..]
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '.' || *c == '_')
        .collect();
    (!tok.is_empty()).then_some(tok)
}

fn version_after(ua: &str, name: &str) -> Option<String> {
    let lower = ua.to_ascii_lowercase();
    let pos = lower.find(&name.to_ascii_lowercase())? + name.len();
    ua[pos..].strip_prefix('/').map(|rest| {
        rest.chars()
            .take_while(|c| c.is_ascii_digit() || *c == '.')
            .collect()
    })
}

fn major(v: &str) -> String {
    v.split('.').next().unwrap_or_default().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHROME_WIN: &str = "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 \
        (KHTML, like Gecko) Chrome/114.0.0.0 Safari/537.36";

    #[test]
    fn desktop_chrome_matches_sample_row() {
        let info = parse_user_agent(CHROME_WIN);
        assert_eq!(info.os_name, "Windows");
        assert_eq!(info.os_version, "11");
        assert_eq!(info.browser_name, "Chrome");
        assert_eq!(info.browser_version, "114");
        assert_eq!(info.browser_type, BrowserType::Desktop);
    }

    #[test]
    fn empty_is_unknown() {
        assert_eq!(parse_user_agent(""), UserAgentInfo::unknown());
    }

    #[test]
    fn googlebot_is_bot_from_list() {
        let info = parse_user_agent("Googlebot/2.1 (+http://www.google.com/bot.html)");
        assert_eq!(info.browser_type, BrowserType::Bot);
        assert_eq!(info.browser_name, "Googlebot");
        assert_eq!(info.browser_version, "2.1");
        assert!(BotList::bundled().contains_name(&info.browser_name));
    }

    #[test]
    fn generic_keywords_are_case_insensitive() {
        for ua in ["SomeCRAWLER/1.0", "my-spider", "FancyBot 3"] {
            let info = parse_user_agent(ua);
            assert_eq!(info.browser_type, BrowserType::Bot, "{ua}");
            assert!(BotList::bundled().contains_name(&info.browser_name));
        }
    }

    #[test]
    fn mobile_and_other_browsers() {
        let iphone = "Mozilla/5.0 (iPhone; CPU iPhone OS 16_5 like Mac OS X) AppleWebKit/605.1.15 \
            (KHTML, like Gecko) Version/16.5 Mobile/15E148 Safari/604.1";
        let info = parse_user_agent(iphone);
        assert_eq!(
            (info.os_name.as_str(), info.os_version.as_str()),
            ("iOS", "16.5")
        );
        assert_eq!(info.browser_name, "Safari");
        assert_eq!(info.browser_version, "16");
        assert_eq!(info.browser_type, BrowserType::Mobile);

        let edge = "Mozilla/5.0 (Windows NT 6.1) AppleWebKit/537.36 (KHTML, like Gecko) \
            Chrome/114.0 Safari/537.36 Edg/114.0.1823.43";
        let info = parse_user_agent(edge);
        assert_eq!(info.browser_name, "Edge");
        assert_eq!(info.os_version, "7");

        let ff = "Mozilla/5.0 (X11; Linux x86_64; rv:109.0) Gecko/20100101 Firefox/115.0";
        let info = parse_user_agent(ff);
        assert_eq!((info.os_name.as_str(), info.browser_name.as_str()), ("Linux", "Firefox"));
        assert_eq!(info.browser_version, "115");
    }

    #[test]
    fn unknown_pattern_has_empty_names() {
        let info = parse_user_agent("SomethingWeird");
        assert_eq!(info.browser_type, BrowserType::Unknown);
        assert!(info.browser_name.is_empty() && info.browser_version.is_empty());
    }

    #[test]
    fn browser_type_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&BrowserType::Desktop).unwrap(), "1");
        let t: BrowserType = serde_json::from_str("3").unwrap();
        assert_eq!(t, BrowserType::Bot);
        assert!(serde_json::from_str::<BrowserType>("7").is_err());
    }
}
