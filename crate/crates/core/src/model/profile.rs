use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Sex {
    #[default]
    NotAvailable = 0,
    Male = 1,
    Female = 2,
}

impl Sex {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Sex> for u8 {
    fn from(s: Sex) -> u8 {
        s as u8
    }
}

impl TryFrom<u8> for Sex {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Self::NotAvailable),
            1 => Ok(Self::Male),
            2 => Ok(Self::Female),
            _ => Err(format!("invalid sex code {v}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u64,
    pub username: String,
    pub sex: Sex,
}

/// External user-profile source keyed by user id.
#[derive(Debug, Clone, Default)]
pub struct ProfileDirectory {
    by_id: HashMap<u64, UserProfile>,
}

impl ProfileDirectory {
    pub fn new(profiles: impl IntoIterator<Item = UserProfile>) -> Self {
        Self {
            by_id: profiles.into_iter().map(|p| (p.user_id, p)).collect(),
        }
    }

    /// Reads a `user_id,username,sex` CSV with header.
    pub fn load_csv(path: &Path) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_path(path)?;
        let profiles = rdr.deserialize().collect::<Result<Vec<UserProfile>, _>>()?;
        Ok(Self::new(profiles))
    }

    /// Writes the directory in the `load_csv` format, ordered by user id.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut rows: Vec<&UserProfile> = self.by_id.values().collect();
        rows.sort_by_key(|p| p.user_id);
        let mut w = csv::Writer::from_path(path)?;
        for p in rows {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, user_id: u64) -> Option<&UserProfile> {
        self.by_id.get(&user_id)
    }

    /// Unknown users and guests fall into the N/A bucket.
    pub fn sex_of(&self, user_id: u64) -> Sex {
        self.get(user_id).map(|p| p.sex).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserProfile> {
        self.by_id.values()
    }
}
