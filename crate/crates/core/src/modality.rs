use std::fmt;

use serde::{Deserialize, Serialize};

/// One input spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "R")]
    Rgb,
    #[serde(rename = "D")]
    Depth,
    #[serde(rename = "I")]
    Infrared,
}

impl Modality {
    /// Fixed order R < D < I, also used to break ties.
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Infrared];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Rgb => "R",
            Modality::Depth => "D",
            Modality::Infrared => "I",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" | "rgb" => Some(Modality::Rgb),
            "d" | "depth" => Some(Modality::Depth),
            "i" | "ir" | "infrared" => Some(Modality::Infrared),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// One value per modality, indexed by [`Modality`].
pub type PerModality<T> = [T; 3];
