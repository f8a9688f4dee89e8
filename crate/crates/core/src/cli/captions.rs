//! Class-caption clients: a fixture file or a chat-completions service.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{MllError, Result};
use crate::fsio;
use crate::selection::{build_class_caption_prompt, TaskSpec};

pub const API_KEY_VAR: &str = "MLL_CAPTION_API_KEY";
pub const ENDPOINT_VAR: &str = "MLL_CAPTION_ENDPOINT";
pub const MODEL_VAR: &str = "MLL_CAPTION_MODEL";
const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
const DEFAULT_MODEL: &str = "gpt-4";

pub trait CaptionClient {
    fn caption(&self, class: &str, prompt: &str) -> Result<String>;
}

/// Captions read from a JSON object mapping class name to caption.
pub struct FixtureCaptions {
    captions: BTreeMap<String, String>,
}

impl FixtureCaptions {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(FixtureCaptions {
            captions: fsio::read_json(path)?,
        })
    }
}

impl CaptionClient for FixtureCaptions {
    fn caption(&self, class: &str, _prompt: &str) -> Result<String> {
        self.captions
            .get(class)
            .cloned()
            .ok_or_else(|| MllError::InvalidInput(format!("caption fixture has no entry for {class}")))
    }
}

pub struct LiveCaptions {
    endpoint: String,
    api_key: String,
    model: String,
}

impl LiveCaptions {
    pub fn from_env() -> Result<Self> {
        let api_key = std::env::var(API_KEY_VAR)
            .map_err(|_| MllError::CaptionService(format!("{API_KEY_VAR} is not set")))?;
        Ok(LiveCaptions {
            endpoint: std::env::var(ENDPOINT_VAR).unwrap_or_else(|_| DEFAULT_ENDPOINT.into()),
            api_key,
            model: std::env::var(MODEL_VAR).unwrap_or_else(|_| DEFAULT_MODEL.into()),
        })
    }
}

impl CaptionClient for LiveCaptions {
    fn caption(&self, _class: &str, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut response = ureq::post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| MllError::CaptionService(e.to_string()))?;
        let reply: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| MllError::CaptionService(e.to_string()))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| MllError::CaptionService("response carries no message content".into()))
    }
}

/// Asks `client` for one caption per class.
pub fn generate_captions(
    task: &TaskSpec,
    client: &dyn CaptionClient,
    word_limit: usize,
) -> Result<BTreeMap<String, String>> {
    task.classes
        .iter()
        .map(|class| {
            let prompt = build_class_caption_prompt(class, &task.domain_text, &task.task_text, word_limit)?;
            Ok((class.clone(), client.caption(class, &prompt)?))
        })
        .collect()
}
