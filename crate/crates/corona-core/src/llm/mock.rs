//! Deterministic offline chat and embedding backends.
//!
//! The mock chat backend echoes the attribute values found in the prompt's
//! payload sections interleaved with seeded filler, so reasoning text stays
//! aligned with whatever profile/history tokens went in. The mock embedding
//! backend sums seeded Gaussian hash-vectors of the normalized whitespace
//! tokens. Both are pure functions of (seed, input), which lets synthetic
//! datasets plant a measurable correspondence between reasoning responses
//! and user/item features.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{ChatBackend, EmbedBackend, GatewayError};

const FILLER: [&str; 6] = [
    "these signals point to a consistent taste profile",
    "the viewing pattern suggests a stable set of interests",
    "such details usually indicate recurring favorites",
    "this combination narrows the likely selections considerably",
    "the profile supports a focused set of expectations",
    "overall the evidence converges on a clear direction",
];

/// Payload markers whose trailing text carries attribute values.
const PAYLOAD_MARKERS: [&str; 3] = ["User profile:", "User history:", "Candidate summary:"];

fn rng_for(seed: u64, namespace: &str, input: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(namespace.as_bytes());
    hasher.update(input.as_bytes());
    let digest = hasher.finalize();
    ChaCha20Rng::from_seed(digest.into())
}

/// Pull the value part out of each `Key: value;` segment in the payload
/// sections of a prompt. "unknown" fillers are dropped.
fn extract_values(prompt: &str) -> Vec<String> {
    let mut values = Vec::new();
    for line in prompt.lines() {
        let Some(marker) = PAYLOAD_MARKERS.iter().find(|m| line.starts_with(**m)) else {
            continue;
        };
        let payload = &line[marker.len()..];
        for segment in payload.split(';') {
            let segment = segment.trim();
            if segment.is_empty() {
                continue;
            }
            // Take the text after the last "Key:" prefix in the segment.
            let value = segment.rsplit(':').next().unwrap_or(segment).trim();
            if !value.is_empty() && value != super::prompts::UNKNOWN_VALUE {
                values.push(value.to_string());
            }
        }
    }
    values
}

/// Offline chat backend: a seeded template over the prompt's attribute
/// values.
#[derive(Debug, Clone)]
pub struct MockChat {
    pub seed: u64,
}

impl ChatBackend for MockChat {
    fn id(&self) -> String {
        format!("mock-chat:{}", self.seed)
    }

    fn complete(&self, prompt: &str, _temperature: f64) -> Result<String, GatewayError> {
        let mut rng = rng_for(self.seed, "chat", prompt);
        let values = extract_values(prompt);
        let joined = if values.is_empty() { "no specific details".to_string() } else { values.join(", ") };
        let filler_a = FILLER[(rand::Rng::random_range(&mut rng, 0..FILLER.len() as u32)) as usize];
        let filler_b = FILLER[(rand::Rng::random_range(&mut rng, 0..FILLER.len() as u32)) as usize];
        Ok(format!(
            "Summary: the available details are {joined}. Reasoning: {filler_a}; \
relevant signals include {joined}. Prediction: the user is likely drawn to {joined}; {filler_b}."
        ))
    }
}

/// Strip punctuation from token edges and lowercase, so "[western,"
/// and "western" hash identically.
fn normalize_token(token: &str) -> String {
    token.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Offline embedding backend: L2-normalized sum of seeded Gaussian
/// hash-vectors of the input's normalized whitespace tokens.
#[derive(Debug, Clone)]
pub struct MockEmbed {
    pub seed: u64,
    pub dim: usize,
}

impl MockEmbed {
    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = rng_for(self.seed, "embed-token", token);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl EmbedBackend for MockEmbed {
    fn id(&self) -> String {
        format!("mock-embed:{}", self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut acc = vec![0.0; self.dim];
        let mut any = false;
        for token in text.split_whitespace() {
            let normalized = normalize_token(token);
            if normalized.is_empty() {
                continue;
            }
            any = true;
            for (a, v) in acc.iter_mut().zip(self.token_vector(&normalized)) {
                *a += v;
            }
        }
        if !any {
            return Err(GatewayError::ZeroNormEmbedding);
        }
        if !crate::matrix::l2_normalize(&mut acc) {
            return Err(GatewayError::ZeroNormEmbedding);
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{dot, l2_norm};

    #[test]
    fn chat_is_a_pure_function_of_seed_and_input() {
        let chat = MockChat { seed: 1 };
        let prompt = "instruction\n\nUser profile: Age: 25; Gender: Male;";
        assert_eq!(chat.complete(prompt, 0.2).unwrap(), chat.complete(prompt, 0.9).unwrap());
        let other = MockChat { seed: 2 };
        // Different seeds may pick different filler.
        let a = chat.complete(prompt, 0.2).unwrap();
        let b = other.complete(prompt, 0.2).unwrap();
        assert!(a.contains("25") && b.contains("25"));
    }

    #[test]
    fn chat_echoes_profile_values_not_unknowns() {
        let chat = MockChat { seed: 3 };
        let prompt = "i\n\nUser profile: Age: 41; Country: unknown; Interest: noir;";
        let response = chat.complete(prompt, 0.0).unwrap();
        assert!(response.contains("41"));
        assert!(response.contains("noir"));
        assert!(!response.contains("unknown"));
    }

    #[test]
    fn chat_extracts_history_titles() {
        let chat = MockChat { seed: 3 };
        let prompt = "i\n\nUser history: No.1: Title: The Last Emperor; Year: 1987;\nCandidate summary: No candidate items were retrieved.";
        let response = chat.complete(prompt, 0.0).unwrap();
        assert!(response.contains("The Last Emperor"));
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let embed = MockEmbed { seed: 5, dim: 32 };
        let v1 = embed.embed("one two three").unwrap();
        let v2 = embed.embed("one two three").unwrap();
        assert_eq!(v1, v2);
        assert!((l2_norm(&v1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_texts_are_not_collinear() {
        let embed = MockEmbed { seed: 5, dim: 64 };
        let a = embed.embed("western frontier dust").unwrap();
        let b = embed.embed("orbital station docking").unwrap();
        let cos = dot(&a, &b);
        assert!(cos < 1.0 - 1e-6, "cosine {cos} should be well below 1");
    }

    #[test]
    fn token_normalization_strips_punctuation() {
        let embed = MockEmbed { seed: 5, dim: 16 };
        let a = embed.embed("[western,").unwrap();
        let b = embed.embed("western").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_has_no_embedding() {
        let embed = MockEmbed { seed: 5, dim: 16 };
        assert!(matches!(embed.embed("  ,,  "), Err(GatewayError::ZeroNormEmbedding)));
    }
}
