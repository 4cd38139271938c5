//! Prompt construction for the two reasoning stages.
//!
//! Prompts are deterministic functions of their inputs: a fixed instruction
//! block, then the structured payload rendered as `Key: value;` segments.
//! Missing values render as the literal string "unknown" so every profile
//! produces a complete prompt.

use std::collections::BTreeMap;

use crate::features::ItemText;
use crate::llm::summary::CandidateSummary;

/// Canonical profile keys, rendered first and always present.
pub const PROFILE_KEY_ORDER: [&str; 5] = ["Age", "Gender", "Country", "Language", "Occupation"];

pub const UNKNOWN_VALUE: &str = "unknown";

const PREFERENCE_INSTRUCTION: &str = "Please infer the user's movie preferences based on the \
provided user profile. This may include preferred categories, styles, origins, or years of \
movies. Begin by summarizing the relevant information, and then provide your preference \
reasoning predictions using the user profile details along with your general knowledge.";

const INTENT_INSTRUCTION: &str = "Please infer the user's watching intent based on user history \
and candidate information. The watching intent represents the user's intention for this \
viewing, and you should make your selection from within the candidate range. Begin by \
summarizing the relevant information, then provide your intent reasoning predictions using \
the user history details, candidate sets, and your general knowledge.";

/// Stage-1 prompt: instruction block plus the profile as `Key: value;`
/// pairs in fixed key order. Canonical keys come first (missing ones as
/// "unknown"), remaining attributes follow in alphabetical order.
pub fn preference_prompt(profile: &BTreeMap<String, String>) -> String {
    let mut pairs: Vec<String> = Vec::new();
    for key in PROFILE_KEY_ORDER {
        let value = profile.get(key).map_or(UNKNOWN_VALUE, String::as_str);
        pairs.push(format!("{key}: {value};"));
    }
    for (key, value) in profile {
        if !PROFILE_KEY_ORDER.contains(&key.as_str()) {
            pairs.push(format!("{key}: {value};"));
        }
    }
    format!("{PREFERENCE_INSTRUCTION}\n\nUser profile: {}", pairs.join(" "))
}

fn render_history_entry(index: usize, item: &ItemText) -> String {
    let title = item.title.as_deref().unwrap_or(UNKNOWN_VALUE);
    let year = item.year.map_or_else(|| UNKNOWN_VALUE.to_string(), |y| y.to_string());
    let mut entry = format!("No.{index}: Title: {title}; Year: {year};");
    for (attr, values) in &item.attributes {
        let rendered = if values.is_empty() { UNKNOWN_VALUE.to_string() } else { values.join(", ") };
        entry.push_str(&format!(" {attr}: {rendered};"));
    }
    entry
}

/// Stage-2 prompt: instruction block, numbered history entries in
/// interaction-time order, then the candidate summary. An empty history
/// renders an explicit empty-history marker instead of entries.
pub fn intent_prompt(summary: &CandidateSummary, history: &[&ItemText]) -> String {
    let history_block = if history.is_empty() {
        "(no recorded history)".to_string()
    } else {
        history
            .iter()
            .enumerate()
            .map(|(i, item)| render_history_entry(i + 1, item))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "{INTENT_INSTRUCTION}\n\nUser history: {history_block}\nCandidate summary: {}",
        summary.rendered_text
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::summary::summarize;

    fn profile(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn item(title: &str, year: Option<i32>, genre: Option<&str>) -> ItemText {
        let mut attributes = BTreeMap::new();
        if let Some(g) = genre {
            attributes.insert("genre".to_string(), vec![g.to_string()]);
        }
        ItemText { id: title.to_lowercase(), title: Some(title.into()), year, attributes }
    }

    #[test]
    fn profile_pairs_render_in_fixed_order() {
        let p = preference_prompt(&profile(&[("Age", "25"), ("Gender", "Male")]));
        assert!(p.contains("Age: 25; Gender: Male"));
        assert!(p.contains("Country: unknown"));
    }

    #[test]
    fn empty_profile_renders_all_unknown() {
        let p = preference_prompt(&BTreeMap::new());
        for key in PROFILE_KEY_ORDER {
            assert!(p.contains(&format!("{key}: unknown;")), "missing {key}");
        }
    }

    #[test]
    fn preference_prompt_is_deterministic() {
        let prof = profile(&[("Age", "30"), ("Interest", "noir")]);
        assert_eq!(preference_prompt(&prof), preference_prompt(&prof));
    }

    #[test]
    fn single_history_entry_is_numbered() {
        let it = item("The Last Emperor", Some(1987), Some("history drama"));
        let summary = summarize(&[]);
        let p = intent_prompt(&summary, &[&it]);
        assert!(p.contains("No.1: Title: The Last Emperor; Year: 1987;"));
    }

    #[test]
    fn history_entries_keep_interaction_order() {
        let a = item("First Film", Some(1980), None);
        let b = item("Second Film", Some(1990), None);
        let summary = summarize(&[]);
        let p = intent_prompt(&summary, &[&a, &b]);
        let pos1 = p.find("No.1: Title: First Film").expect("No.1 present");
        let pos2 = p.find("No.2: Title: Second Film").expect("No.2 present");
        assert!(pos1 < pos2);
    }

    #[test]
    fn intent_prompt_is_deterministic_and_total_on_empty_history() {
        let summary = summarize(&[]);
        let p1 = intent_prompt(&summary, &[]);
        let p2 = intent_prompt(&summary, &[]);
        assert_eq!(p1, p2);
        assert!(p1.contains("(no recorded history)"));
    }
}
