use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geoip::{geo_lookup, GeoEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginClass {
    InHouse,
    InCountry,
    OutCountry,
}

impl OriginClass {
    pub const ALL: [OriginClass; 3] = [Self::InHouse, Self::InCountry, Self::OutCountry];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::InHouse => "in_house",
            Self::InCountry => "in_country",
            Self::OutCountry => "out_country",
        }
    }
}

impl fmt::Display for OriginClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("invalid CIDR block {0:?}")]
pub struct CidrParseError(pub String);

/// IPv4 CIDR block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cidr {
    network: u32,
    prefix: u8,
}

impl Cidr {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Result<Self, CidrParseError> {
        if prefix > 32 {
            return Err(CidrParseError(format!("{addr}/{prefix}")));
        }
        let network = u32::from(addr) & Self::mask_for(prefix);
        Ok(Self { network, prefix })
    }

    fn mask_for(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask_for(self.prefix) == self.network
    }

    pub fn first(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network)
    }

    pub fn size(&self) -> u64 {
        1u64 << (32 - self.prefix)
    }
}

impl FromStr for Cidr {
    type Err = CidrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || CidrParseError(s.to_string());
        let (addr, prefix) = match s.trim().split_once('/') {
            Some((a, p)) => (a, p.parse::<u8>().map_err(|_| err())?),
            None => (s.trim(), 32),
        };
        Cidr::new(addr.parse().map_err(|_| err())?, prefix).map_err(|_| err())
    }
}

impl TryFrom<String> for Cidr {
    type Error = CidrParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Cidr> for String {
    fn from(c: Cidr) -> String {
        c.to_string()
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", Ipv4Addr::from(self.network), self.prefix)
    }
}

/// In-house beats in-country beats out-country.
pub fn classify_origin(ip: Ipv4Addr, in_house: &[Cidr], home_country: &str, table: &[GeoEntry]) -> OriginClass {
    if in_house.iter().any(|c| c.contains(ip)) {
        return OriginClass::InHouse;
    }
    classify_origin_by_country(ip, in_house, home_country, geo_lookup(ip, table))
}

/// Same precedence, for records whose country was resolved at capture time.
pub fn classify_origin_by_country(ip: Ipv4Addr, in_house: &[Cidr], home_country: &str, country: &str) -> OriginClass {
    if in_house.iter().any(|c| c.contains(ip)) {
        OriginClass::InHouse
    } else if country == home_country {
        OriginClass::InCountry
    } else {
        OriginClass::OutCountry
    }
}
