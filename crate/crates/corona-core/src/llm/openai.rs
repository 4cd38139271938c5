//! OpenAI-compatible HTTP backends.
//!
//! Chat: `POST {endpoint}/chat/completions` with
//! `{model, messages: [{role, content}], temperature}`.
//! Embeddings: `POST {endpoint}/embeddings` with `{model, input}`.
//! The API key is read from a named environment variable and sent as a
//! bearer token. Transport failures, non-2xx statuses and malformed bodies
//! are all retryable; the gateway wraps them in its bounded retry loop.

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, EmbedBackend, GatewayError};

fn api_key(env_var: &str) -> Result<String, GatewayError> {
    std::env::var(env_var).map_err(|_| GatewayError::MissingApiKey(env_var.to_string()))
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    key: &str,
    body: &serde_json::Value,
) -> Result<String, GatewayError> {
    let response = client
        .post(url)
        .bearer_auth(key)
        .json(body)
        .send()
        .map_err(|e| GatewayError::Transport(e.to_string()))?;
    let status = response.status();
    let text = response.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(GatewayError::BadStatus { status: status.as_u16(), body: truncate(&text) });
    }
    Ok(text)
}

fn truncate(text: &str) -> String {
    const MAX: usize = 400;
    if text.len() <= MAX {
        text.to_string()
    } else {
        format!("{}…", &text[..text.char_indices().take_while(|(i, _)| *i < MAX).count()])
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

pub struct OpenAiChat {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    client: reqwest::blocking::Client,
}

impl OpenAiChat {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key_env: api_key_env.to_string(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl ChatBackend for OpenAiChat {
    fn id(&self) -> String {
        format!("openai-chat:{}:{}", self.endpoint, self.model)
    }

    fn complete(&self, prompt: &str, temperature: f64) -> Result<String, GatewayError> {
        let key = api_key(&self.api_key_env)?;
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        let url = format!("{}/chat/completions", self.endpoint);
        let text = post_json(&self.client, &url, &key, &body)?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("empty choices array".into()))?;
        Ok(choice.message.content)
    }
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

pub struct OpenAiEmbed {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub dim: usize,
    client: reqwest::blocking::Client,
}

impl OpenAiEmbed {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, dim: usize) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key_env: api_key_env.to_string(),
            dim,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl EmbedBackend for OpenAiEmbed {
    fn id(&self) -> String {
        format!("openai-embed:{}:{}", self.endpoint, self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let key = api_key(&self.api_key_env)?;
        let body = json!({ "model": self.model, "input": text });
        let url = format!("{}/embeddings", self.endpoint);
        let raw = post_json(&self.client, &url, &key, &body)?;
        let parsed: EmbedResponse = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let datum = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("empty data array".into()))?;
        if datum.embedding.len() != self.dim {
            return Err(GatewayError::EmbedDimMismatch {
                expected: self.dim,
                got: datum.embedding.len(),
            });
        }
        Ok(datum.embedding)
    }
}
