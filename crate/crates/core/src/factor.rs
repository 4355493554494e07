use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::MeritError;

/// One of the three perceptual similarity dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Melody,
    Rhythm,
    Timbre,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Melody, Factor::Rhythm, Factor::Timbre];

    pub fn index(self) -> usize {
        match self {
            Factor::Melody => 0,
            Factor::Rhythm => 1,
            Factor::Timbre => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Factor> {
        Factor::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Melody => "melody",
            Factor::Rhythm => "rhythm",
            Factor::Timbre => "timbre",
        }
    }

    /// Tag stored in binary head and index files.
    pub(crate) fn tag(self) -> u32 {
        self.index() as u32
    }

    pub(crate) fn from_tag(tag: u32) -> crate::Result<Factor> {
        Factor::from_index(tag as usize)
            .ok_or_else(|| MeritError::InvalidHeader(format!("unknown factor tag {tag}")))
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = MeritError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "melody" | "mel" => Ok(Factor::Melody),
            "rhythm" | "rhy" => Ok(Factor::Rhythm),
            "timbre" | "tim" => Ok(Factor::Timbre),
            other => Err(MeritError::input(format!("unknown factor {other:?}"))),
        }
    }
}
