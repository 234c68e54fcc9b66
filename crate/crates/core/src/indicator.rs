//! The twenty survey indicators: thermal affordance (VATA) and the nineteen
//! visual-perceptual indicators (VPIs).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vpi {
    TempIntensity,
    SunIntensity,
    HumidityInference,
    WindInference,
    TrafficFlow,
    GreeneryRate,
    ShadingArea,
    MaterialComfort,
    Imageability,
    Enclosure,
    HumanScale,
    Transparency,
    Complexity,
    Safe,
    Lively,
    Beautiful,
    Wealthy,
    Boring,
    Depressing,
}

pub const VPI_COUNT: usize = 19;

impl Vpi {
    pub const ALL: [Vpi; VPI_COUNT] = [
        Vpi::TempIntensity,
        Vpi::SunIntensity,
        Vpi::HumidityInference,
        Vpi::WindInference,
        Vpi::TrafficFlow,
        Vpi::GreeneryRate,
        Vpi::ShadingArea,
        Vpi::MaterialComfort,
        Vpi::Imageability,
        Vpi::Enclosure,
        Vpi::HumanScale,
        Vpi::Transparency,
        Vpi::Complexity,
        Vpi::Safe,
        Vpi::Lively,
        Vpi::Beautiful,
        Vpi::Wealthy,
        Vpi::Boring,
        Vpi::Depressing,
    ];

    /// Position of this indicator in [`Vpi::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Vpi::TempIntensity => "temp_intensity",
            Vpi::SunIntensity => "sun_intensity",
            Vpi::HumidityInference => "humidity_inference",
            Vpi::WindInference => "wind_inference",
            Vpi::TrafficFlow => "traffic_flow",
            Vpi::GreeneryRate => "greenery_rate",
            Vpi::ShadingArea => "shading_area",
            Vpi::MaterialComfort => "material_comfort",
            Vpi::Imageability => "imageability",
            Vpi::Enclosure => "enclosure",
            Vpi::HumanScale => "human_scale",
            Vpi::Transparency => "transparency",
            Vpi::Complexity => "complexity",
            Vpi::Safe => "safe",
            Vpi::Lively => "lively",
            Vpi::Beautiful => "beautiful",
            Vpi::Wealthy => "wealthy",
            Vpi::Boring => "boring",
            Vpi::Depressing => "depressing",
        }
    }

    /// VPIs sorted by name; this is the column order of `scores.csv`.
    pub fn alphabetical() -> Vec<Vpi> {
        let mut all = Vpi::ALL.to_vec();
        all.sort_by_key(|v| v.name());
        all
    }

    fn question_phrase(self) -> (&'static str, &'static str) {
        const MICRO: &str = "Which street view image do you perceive exhibits a higher";
        const ENV: &str = "Which street view image do you think showcases higher (more)";
        const DESIGN: &str = "Which street view image stands out to you as a more";
        const EMOTION: &str = "Which street view image do you feel evokes a more";
        match self {
            Vpi::TempIntensity => (MICRO, "outdoor temperature?"),
            Vpi::SunIntensity => (MICRO, "sunlight intensity?"),
            Vpi::HumidityInference => (MICRO, "humidity inference?"),
            Vpi::WindInference => (MICRO, "wind speed inference?"),
            Vpi::TrafficFlow => (ENV, "traffic flow?"),
            Vpi::GreeneryRate => (ENV, "greenery rate?"),
            Vpi::ShadingArea => (ENV, "shading areas?"),
            Vpi::MaterialComfort => (ENV, "construction material comfort?"),
            Vpi::Imageability => (DESIGN, "impressive place?"),
            Vpi::Enclosure => (DESIGN, "enclosed space?"),
            Vpi::HumanScale => (DESIGN, "accommodating for human scale?"),
            Vpi::Transparency => (DESIGN, "transparent space?"),
            Vpi::Complexity => (DESIGN, "complex environment?"),
            Vpi::Safe => (EMOTION, "safe atmosphere?"),
            Vpi::Lively => (EMOTION, "lively atmosphere?"),
            Vpi::Beautiful => (EMOTION, "beautiful atmosphere?"),
            Vpi::Wealthy => (EMOTION, "wealthy atmosphere?"),
            Vpi::Boring => (EMOTION, "boring atmosphere?"),
            Vpi::Depressing => (EMOTION, "depressing atmosphere?"),
        }
    }
}

impl fmt::Display for Vpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Vpi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Vpi::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown indicator \"{s}\"")))
    }
}

/// A survey indicator: VATA itself or one of the VPIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Indicator {
    Vata,
    Vpi(Vpi),
}

pub const INDICATOR_COUNT: usize = VPI_COUNT + 1;

impl Indicator {
    pub fn all() -> Vec<Indicator> {
        std::iter::once(Indicator::Vata)
            .chain(Vpi::ALL.iter().map(|v| Indicator::Vpi(*v)))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Indicator::Vata => "vata",
            Indicator::Vpi(v) => v.name(),
        }
    }

    /// Question shown to survey participants for this indicator.
    pub fn question_text(self) -> String {
        match self {
            Indicator::Vata => "Which street view image do you perceive as having a more comfortable outdoor thermal environment for you?".to_string(),
            Indicator::Vpi(v) => {
                let (stem, tail) = v.question_phrase();
                format!("{stem} {tail}")
            }
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "vata" {
            Ok(Indicator::Vata)
        } else {
            s.parse::<Vpi>().map(Indicator::Vpi)
        }
    }
}

impl Serialize for Indicator {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Indicator {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
