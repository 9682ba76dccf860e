use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 7;

/// Class names in canonical order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
];

/// One of the seven basic expressions, stored as its canonical code `0..=6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ExpressionLabel(u8);

impl ExpressionLabel {
    pub const NEUTRAL: Self = Self(0);
    pub const ANGER: Self = Self(1);
    pub const DISGUST: Self = Self(2);
    pub const FEAR: Self = Self(3);
    pub const HAPPINESS: Self = Self(4);
    pub const SADNESS: Self = Self(5);
    pub const SURPRISE: Self = Self(6);

    pub fn new(code: i64) -> Option<Self> {
        (0..NUM_CLASSES as i64)
            .contains(&code)
            .then_some(Self(code as u8))
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(index as i64)
            .ok_or_else(|| Error::Contract(format!("label {index} outside 0..=6")))
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_CLASSES as u8).map(Self)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }
}

impl fmt::Display for ExpressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for ExpressionLabel {
    type Error = String;

    fn try_from(code: u8) -> std::result::Result<Self, String> {
        Self::new(code as i64).ok_or_else(|| format!("label {code} outside 0..=6"))
    }
}

impl From<ExpressionLabel> for u8 {
    fn from(label: ExpressionLabel) -> u8 {
        label.0
    }
}

impl FromStr for ExpressionLabel {
    type Err = Error;

    /// Accepts either the integer code or the class name (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(code) = s.parse::<i64>() {
            return Self::new(code)
                .ok_or_else(|| Error::Contract(format!("label {code} outside 0..=6")));
        }
        CLASS_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s))
            .map(|i| Self(i as u8))
            .ok_or_else(|| Error::Contract(format!("unknown expression label {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order() {
        let names: Vec<_> = ExpressionLabel::all().map(|l| l.name()).collect();
        assert_eq!(names, CLASS_NAMES);
        assert_eq!(ExpressionLabel::FEAR.code(), 3);
        assert_eq!(ExpressionLabel::SURPRISE.name(), "Surprise");
    }

    #[test]
    fn sentinel_never_becomes_a_label() {
        assert!(ExpressionLabel::new(-1).is_none());
        assert!(ExpressionLabel::new(7).is_none());
        assert!(ExpressionLabel::try_from(9u8).is_err());
        assert!("-1".parse::<ExpressionLabel>().is_err());
    }

    #[test]
    fn parses_names_and_codes() {
        assert_eq!(
            "happiness".parse::<ExpressionLabel>().unwrap(),
            ExpressionLabel::HAPPINESS
        );
        assert_eq!(
            "2".parse::<ExpressionLabel>().unwrap(),
            ExpressionLabel::DISGUST
        );
    }
}
