use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Ground truth of an utterance. Class index 0 is spoof (fake), 1 is
/// bona fide (real); logits follow the same order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Spoof,
    Bonafide,
}

impl Label {
    pub const SPOOF_INDEX: usize = 0;
    pub const BONAFIDE_INDEX: usize = 1;

    pub fn class_index(self) -> usize {
        match self {
            Label::Spoof => Self::SPOOF_INDEX,
            Label::Bonafide => Self::BONAFIDE_INDEX,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Spoof => "spoof",
            Label::Bonafide => "bonafide",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bonafide" | "bona-fide" | "real" => Ok(Label::Bonafide),
            "spoof" | "fake" => Ok(Label::Spoof),
            other => Err(Error::InvalidInput(format!("unknown label {other:?} (expected bonafide or spoof)"))),
        }
    }
}
