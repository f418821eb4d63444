use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Quadrant of the valence/arousal plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmotionQuadrant {
    /// High valence, high arousal.
    Q1,
    /// Low valence, high arousal.
    Q2,
    /// Low valence, low arousal.
    Q3,
    /// High valence, low arousal.
    Q4,
}

impl EmotionQuadrant {
    pub const ALL: [EmotionQuadrant; 4] = [Self::Q1, Self::Q2, Self::Q3, Self::Q4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EmotionQuadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.index() + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown emotion quadrant {0:?} (expected Q1..Q4)")]
pub struct ParseQuadrantError(pub String);

impl FromStr for EmotionQuadrant {
    type Err = ParseQuadrantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "Q1" | "1" => Ok(Self::Q1),
            "Q2" | "2" => Ok(Self::Q2),
            "Q3" | "3" => Ok(Self::Q3),
            "Q4" | "4" => Ok(Self::Q4),
            _ => Err(ParseQuadrantError(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_and_parsing() {
        assert!(EmotionQuadrant::Q1 < EmotionQuadrant::Q2);
        assert!(EmotionQuadrant::Q3 < EmotionQuadrant::Q4);
        assert_eq!("q3".parse::<EmotionQuadrant>().unwrap(), EmotionQuadrant::Q3);
        assert!("Q5".parse::<EmotionQuadrant>().is_err());
        assert_eq!(EmotionQuadrant::Q4.to_string(), "Q4");
    }
}
