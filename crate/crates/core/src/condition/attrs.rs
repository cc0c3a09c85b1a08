use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! byte_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident = $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_u8(self) -> u8 {
                self as u8
            }

            pub fn from_u8(b: u8) -> Option<Self> {
                Self::ALL.get(b as usize).copied()
            }

            /// Lowercase attribute word.
            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }
    };
}

byte_enum!(Weather { Clear = "clear", Fog = "fog", Rain = "rain", Snow = "snow" });
byte_enum!(TimeOfDay { Day = "day", Night = "night" });
byte_enum!(PrecipitationType { Rain = "rain", Snow = "snow" });
byte_enum!(PrecipitationLevel { Light = "light", Heavy = "heavy" });
byte_enum!(GroundCondition { Dry = "dry", Wet = "wet", Snowy = "snowy" });
byte_enum!(SkyCondition { Sunny = "sunny", Overcast = "overcast", Dark = "dark" });

impl Weather {
    /// Adjective used in prompts.
    pub fn adjective(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Fog => "foggy",
            Weather::Rain => "rainy",
            Weather::Snow => "snowy",
        }
    }
}

/// Per-scene environmental metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionAttributes {
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub precipitation_type: Option<PrecipitationType>,
    pub precipitation_level: Option<PrecipitationLevel>,
    pub ground_condition: GroundCondition,
    pub sky_condition: Option<SkyCondition>,
}

/// One of the 8 weather × time-of-day cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionCell {
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
}

pub const NUM_CELLS: usize = 8;

impl ConditionCell {
    /// All cells, weather-major (clear-day, clear-night, fog-day, ...).
    pub fn all() -> Vec<ConditionCell> {
        Weather::ALL
            .iter()
            .flat_map(|&weather| {
                TimeOfDay::ALL.iter().map(move |&time_of_day| ConditionCell {
                    weather,
                    time_of_day,
                })
            })
            .collect()
    }

    pub fn index(self) -> usize {
        self.weather as usize * 2 + self.time_of_day as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::all().get(i).copied()
    }

    /// Short label such as `fog-night`.
    pub fn label(self) -> String {
        format!("{}-{}", self.weather.word(), self.time_of_day.word())
    }
}

impl ConditionAttributes {
    pub fn validate(&self) -> Result<()> {
        if self.precipitation_type.is_some() != self.precipitation_level.is_some() {
            return Err(Error::InvalidAttributes(
                "precipitation type and level must be both present or both absent".into(),
            ));
        }
        let required = match self.weather {
            Weather::Rain => Some(PrecipitationType::Rain),
            Weather::Snow => Some(PrecipitationType::Snow),
            _ => None,
        };
        if let Some(t) = required {
            if self.precipitation_type != Some(t) {
                return Err(Error::InvalidAttributes(format!(
                    "{} weather requires {} precipitation",
                    self.weather.word(),
                    t.word()
                )));
            }
        }
        Ok(())
    }

    pub fn cell(&self) -> ConditionCell {
        ConditionCell {
            weather: self.weather,
            time_of_day: self.time_of_day,
        }
    }

    /// Every attribute combination, valid or not (4·2·5·3·4 = 480).
    pub fn product() -> Vec<ConditionAttributes> {
        let precip: Vec<(Option<PrecipitationType>, Option<PrecipitationLevel>)> = std::iter::once((None, None))
            .chain(PrecipitationType::ALL.iter().flat_map(|&t| {
                PrecipitationLevel::ALL.iter().map(move |&l| (Some(t), Some(l)))
            }))
            .collect();
        let skies: Vec<Option<SkyCondition>> = std::iter::once(None)
            .chain(SkyCondition::ALL.iter().map(|&s| Some(s)))
            .collect();
        let mut out = Vec::new();
        for &weather in Weather::ALL {
            for &time_of_day in TimeOfDay::ALL {
                for &(precipitation_type, precipitation_level) in &precip {
                    for &ground_condition in GroundCondition::ALL {
                        for &sky_condition in &skies {
                            out.push(ConditionAttributes {
                                weather,
                                time_of_day,
                                precipitation_type,
                                precipitation_level,
                                ground_condition,
                                sky_condition,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Fixed-width byte encoding; absent optionals are 0xFF.
    pub fn to_bytes(&self) -> [u8; 6] {
        const NONE: u8 = 0xFF;
        [
            self.weather.as_u8(),
            self.time_of_day.as_u8(),
            self.precipitation_type.map_or(NONE, |v| v.as_u8()),
            self.precipitation_level.map_or(NONE, |v| v.as_u8()),
            self.ground_condition.as_u8(),
            self.sky_condition.map_or(NONE, |v| v.as_u8()),
        ]
    }

    pub fn from_bytes(b: [u8; 6]) -> Option<Self> {
        fn opt<T>(b: u8, f: impl Fn(u8) -> Option<T>) -> Option<Option<T>> {
            if b == 0xFF {
                Some(None)
            } else {
                f(b).map(Some)
            }
        }
        Some(Self {
            weather: Weather::from_u8(b[0])?,
            time_of_day: TimeOfDay::from_u8(b[1])?,
            precipitation_type: opt(b[2], PrecipitationType::from_u8)?,
            precipitation_level: opt(b[3], PrecipitationLevel::from_u8)?,
            ground_condition: GroundCondition::from_u8(b[4])?,
            sky_condition: opt(b[5], SkyCondition::from_u8)?,
        })
    }
}
