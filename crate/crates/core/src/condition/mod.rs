//! Environmental conditions: attribute schema, prompt rendering, tokenizer,
//! text encoder, condition-token generator and the contrastive objective.

mod attrs;
mod contrastive;
mod ct;
mod prompt;
mod text;
mod vocab;

pub use attrs::{
    ConditionAttributes, ConditionCell, GroundCondition, PrecipitationLevel, PrecipitationType, SkyCondition,
    TimeOfDay, Weather, NUM_CELLS,
};
pub use contrastive::{condition_contrastive_loss, INITIAL_TEMPERATURE};
pub use ct::{CtGenerator, MAX_CT_POSITIONS};
pub use prompt::{build_condition_prompt, effective_sky, render_prompt, ConditionPrompt, PromptDetail};
pub use text::{TextEncoder, TextQueries, MAX_PROMPT_TOKENS, NUM_CONTEXT_TOKENS};
pub use vocab::{normalize, Vocabulary, OOV_ID, OOV_TOKEN};

#[cfg(test)]
mod tests;
