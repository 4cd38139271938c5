//! Frequency digest of retrieved candidate items.
//!
//! Collects per-attribute value histograms over the stage-1 item set,
//! buckets release years by calendar decade, and renders the most frequent
//! values (capped at 20 per attribute) as the natural-language summary
//! block consumed by the intent prompt.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::features::ItemText;

/// Most frequent values kept per attribute.
pub const TOP_LIST_CAP: usize = 20;

/// Histogram key under which release years are bucketed.
pub const RELEASE_PERIOD_ATTR: &str = "release-period";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    /// attribute -> value -> occurrence count.
    pub histograms: BTreeMap<String, BTreeMap<String, usize>>,
    /// attribute -> values sorted by descending frequency (ties by value),
    /// at most [`TOP_LIST_CAP`] entries.
    pub top_lists: BTreeMap<String, Vec<String>>,
    pub rendered_text: String,
}

impl CandidateSummary {
    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }
}

/// Calendar-decade bucket: 1987 -> "1980-1990".
pub fn decade_bucket(year: i32) -> String {
    let start = (year / 10) * 10;
    format!("{start}-{}", start + 10)
}

fn top_list(histogram: &BTreeMap<String, usize>) -> Vec<String> {
    let mut entries: Vec<(&String, &usize)> = histogram.iter().collect();
    entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    entries.into_iter().take(TOP_LIST_CAP).map(|(v, _)| v.clone()).collect()
}

fn render_line(attr: &str, values: &[String]) -> String {
    let list = values.join(", ");
    match attr {
        "genre" => {
            format!("Candidate Genres: The candidate items belong to the following genres: [{list}]")
        }
        "category" => format!("Candidate Categories: The items can be categorized into: [{list}]"),
        RELEASE_PERIOD_ATTR => format!(
            "Years of release: The movies were released in the following periods: [{list}]"
        ),
        other => format!("Candidate {other}: The items carry the following {other} values: [{list}]"),
    }
}

/// Digest a set of item records into histograms, capped top lists and the
/// rendered summary block. Empty input yields an explicit no-candidates
/// rendering.
pub fn summarize(records: &[&ItemText]) -> CandidateSummary {
    let mut histograms: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for item in records {
        if let Some(year) = item.year {
            *histograms
                .entry(RELEASE_PERIOD_ATTR.to_string())
                .or_default()
                .entry(decade_bucket(year))
                .or_insert(0) += 1;
        }
        for (attr, values) in &item.attributes {
            let hist = histograms.entry(attr.clone()).or_default();
            for value in values {
                *hist.entry(value.clone()).or_insert(0) += 1;
            }
        }
    }

    let top_lists: BTreeMap<String, Vec<String>> =
        histograms.iter().map(|(attr, hist)| (attr.clone(), top_list(hist))).collect();

    let rendered_text = if histograms.is_empty() {
        "No candidate items were retrieved.".to_string()
    } else {
        // Canonical attributes lead, remaining ones follow alphabetically.
        let mut order: Vec<&str> = Vec::new();
        for canonical in ["genre", "category", RELEASE_PERIOD_ATTR] {
            if top_lists.contains_key(canonical) {
                order.push(canonical);
            }
        }
        for attr in top_lists.keys() {
            if !["genre", "category", RELEASE_PERIOD_ATTR].contains(&attr.as_str()) {
                order.push(attr);
            }
        }
        order
            .into_iter()
            .map(|attr| render_line(attr, &top_lists[attr]))
            .collect::<Vec<_>>()
            .join("\n")
    };

    CandidateSummary { histograms, top_lists, rendered_text }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item_with_genres(id: &str, year: Option<i32>, genres: &[&str]) -> ItemText {
        let mut attributes = BTreeMap::new();
        if !genres.is_empty() {
            attributes
                .insert("genre".to_string(), genres.iter().map(|g| g.to_string()).collect());
        }
        ItemText { id: id.into(), title: Some(id.into()), year, attributes }
    }

    #[test]
    fn histogram_counts_and_orders_by_frequency() {
        let a = item_with_genres("x", None, &["A"]);
        let b = item_with_genres("y", None, &["A"]);
        let c = item_with_genres("z", None, &["B"]);
        let s = summarize(&[&a, &b, &c]);
        assert_eq!(s.histograms["genre"]["A"], 2);
        assert_eq!(s.histograms["genre"]["B"], 1);
        assert_eq!(s.top_lists["genre"], vec!["A", "B"]);
    }

    #[test]
    fn top_list_caps_at_twenty() {
        // 25 distinct genres with distinct counts: genre g_i occurs i times.
        let mut items = Vec::new();
        for i in 1..=25usize {
            for _ in 0..i {
                items.push(item_with_genres(&format!("it{i}"), None, &[&format!("g{i:02}")]));
            }
        }
        let refs: Vec<&ItemText> = items.iter().collect();
        let s = summarize(&refs);
        let top = &s.top_lists["genre"];
        assert_eq!(top.len(), TOP_LIST_CAP);
        assert_eq!(top[0], "g25");
        // Lowest five frequencies fell off the list.
        assert!(!top.contains(&"g05".to_string()));
    }

    #[test]
    fn ties_break_lexicographically() {
        let a = item_with_genres("x", None, &["zeta"]);
        let b = item_with_genres("y", None, &["alpha"]);
        let s = summarize(&[&a, &b]);
        assert_eq!(s.top_lists["genre"], vec!["alpha", "zeta"]);
    }

    #[test]
    fn years_bucket_by_decade() {
        assert_eq!(decade_bucket(1987), "1980-1990");
        assert_eq!(decade_bucket(2000), "2000-2010");
        let a = item_with_genres("x", Some(1987), &[]);
        let s = summarize(&[&a]);
        assert_eq!(s.histograms[RELEASE_PERIOD_ATTR]["1980-1990"], 1);
        assert!(s.rendered_text.contains("1980-1990"));
    }

    #[test]
    fn empty_input_states_no_candidates() {
        let s = summarize(&[]);
        assert!(s.is_empty());
        assert_eq!(s.rendered_text, "No candidate items were retrieved.");
    }

    #[test]
    fn top_list_frequencies_are_non_increasing() {
        let mut items = Vec::new();
        for i in 0..40usize {
            let g = format!("g{}", i % 7);
            items.push(item_with_genres(&format!("it{i}"), None, &[&g]));
            if i % 3 == 0 {
                items.push(item_with_genres(&format!("jt{i}"), None, &[&g]));
            }
        }
        let refs: Vec<&ItemText> = items.iter().collect();
        let s = summarize(&refs);
        for (attr, list) in &s.top_lists {
            let hist = &s.histograms[attr];
            for pair in list.windows(2) {
                assert!(hist[&pair[0]] >= hist[&pair[1]]);
            }
            for value in list {
                assert!(hist.contains_key(value));
            }
        }
    }
}
