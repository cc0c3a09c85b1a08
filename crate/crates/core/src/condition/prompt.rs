use serde::{Deserialize, Serialize};

use super::attrs::{ConditionAttributes, SkyCondition, TimeOfDay};
use crate::error::Result;

/// Rendered condition description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionPrompt {
    pub text: String,
    /// The raw values substituted into the template, one per attribute.
    pub attribute_tokens: Vec<String>,
}

/// How much of the condition is spelled out in the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptDetail {
    /// Only the weather adjective, e.g. `foggy`.
    SingleAttribute,
    #[default]
    FullTemplate,
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Sky value with the fill-in rule for a missing attribute: dark at night,
/// overcast by day.
pub fn effective_sky(attrs: &ConditionAttributes) -> SkyCondition {
    attrs.sky_condition.unwrap_or(match attrs.time_of_day {
        TimeOfDay::Night => SkyCondition::Dark,
        TimeOfDay::Day => SkyCondition::Overcast,
    })
}

/// Fills `A {weather} driving scene at {time}time with {precipitation}, a
/// {ground} ground and a {sky} sky.`
pub fn build_condition_prompt(attrs: &ConditionAttributes) -> Result<ConditionPrompt> {
    attrs.validate()?;
    let weather = attrs.weather.adjective();
    let time = attrs.time_of_day.word();
    let precip = match (attrs.precipitation_level, attrs.precipitation_type) {
        (Some(level), Some(kind)) => format!("{} {}", level.word(), kind.word()),
        _ => "no precipitation".to_string(),
    };
    let ground = attrs.ground_condition.word();
    let sky = effective_sky(attrs).word();
    let text = format!(
        "{} {weather} driving scene at {time}time with {precip}, {} {ground} ground and {} {sky} sky.",
        capitalized(article(weather)),
        article(ground),
        article(sky),
    );
    Ok(ConditionPrompt {
        text,
        attribute_tokens: vec![
            weather.to_string(),
            time.to_string(),
            precip,
            ground.to_string(),
            sky.to_string(),
        ],
    })
}

/// Prompt at the requested level of detail.
pub fn render_prompt(attrs: &ConditionAttributes, detail: PromptDetail) -> Result<ConditionPrompt> {
    let full = build_condition_prompt(attrs)?;
    Ok(match detail {
        PromptDetail::FullTemplate => full,
        PromptDetail::SingleAttribute => ConditionPrompt {
            text: attrs.weather.adjective().to_string(),
            attribute_tokens: vec![attrs.weather.adjective().to_string()],
        },
    })
}
