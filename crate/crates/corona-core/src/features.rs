//! Dense feature matrices and textual attributes for users and items.
//!
//! Feature files use the CRNF binary layout: magic `CRNF`, version `u32`,
//! rows `u32`, cols `u32`, then rows*cols little-endian IEEE-754 `f32`
//! values, row-major. Text attributes are JSON-lines, one object per entity
//! keyed by an `id` field. Row `i` of each matrix belongs to internal id
//! `i`, so alignment against the graph is checked at load time.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{InteractionGraph, ItemId, UserId};
use crate::matrix::Matrix;

pub const CRNF_MAGIC: [u8; 4] = *b"CRNF";
pub const CRNF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected CRNF")]
    BadMagic { path: String },
    #[error("unsupported CRNF version {found} in {path}")]
    UnsupportedVersion { path: String, found: u32 },
    #[error("feature rows mismatch in {path}: file has {found}, expected {expected}")]
    RowMismatch { path: String, expected: usize, found: usize },
    #[error("feature dimension mismatch in {path}: file has {found}, expected {expected}")]
    DimMismatch { path: String, expected: usize, found: usize },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("non-finite value at row {row}, col {col} of {path}")]
    NonFinite { path: String, row: usize, col: usize },
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("unknown user id {0}")]
    UnknownUser(UserId),
    #[error("malformed text record at {path}:{line}: {reason}")]
    MalformedText { path: String, line: usize, reason: String },
    #[error("year {value} at {path}:{line} is not a 4-digit integer")]
    BadYear { path: String, line: usize, value: i64 },
}

fn io_err(path: &Path, source: std::io::Error) -> FeatureError {
    FeatureError::Io { path: path.display().to_string(), source }
}

/// Write a matrix in CRNF form (values narrowed to f32).
pub fn save_features(path: &Path, matrix: &Matrix) -> Result<(), FeatureError> {
    let mut buf =
        Vec::with_capacity(16 + matrix.rows() * matrix.cols() * std::mem::size_of::<f32>());
    buf.extend_from_slice(&CRNF_MAGIC);
    buf.extend_from_slice(&CRNF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a CRNF matrix without shape expectations.
pub fn read_features(path: &Path) -> Result<Matrix, FeatureError> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 {
        return Err(FeatureError::Truncated { path: display, expected: 16, found: bytes.len() });
    }
    if bytes[0..4] != CRNF_MAGIC {
        return Err(FeatureError::BadMagic { path: display });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CRNF_VERSION {
        return Err(FeatureError::UnsupportedVersion { path: display, found: version });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(FeatureError::Truncated { path: display, expected, found: bytes.len() });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (idx, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(chunk.try_into().unwrap());
        if !value.is_finite() {
            return Err(FeatureError::NonFinite {
                path: display,
                row: idx / cols.max(1),
                col: idx % cols.max(1),
            });
        }
        data.push(value as f64);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Read a CRNF matrix and require exact alignment with the graph.
pub fn load_features(
    path: &Path,
    expected_rows: usize,
    expected_dim: usize,
) -> Result<Matrix, FeatureError> {
    let m = read_features(path)?;
    let display = path.display().to_string();
    if m.rows() != expected_rows {
        return Err(FeatureError::RowMismatch {
            path: display,
            expected: expected_rows,
            found: m.rows(),
        });
    }
    if m.cols() != expected_dim {
        return Err(FeatureError::DimMismatch {
            path: display,
            expected: expected_dim,
            found: m.cols(),
        });
    }
    Ok(m)
}

/// User and item feature matrices, row-aligned with internal ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub users: Matrix,
    pub items: Matrix,
}

impl FeatureStore {
    pub fn new(users: Matrix, items: Matrix) -> Self {
        assert_eq!(users.cols(), items.cols(), "user/item feature dims must agree");
        Self { users, items }
    }

    pub fn load(
        user_path: &Path,
        item_path: &Path,
        graph: &InteractionGraph,
        dim: usize,
    ) -> Result<Self, FeatureError> {
        let users = load_features(user_path, graph.n_users(), dim)?;
        let items = load_features(item_path, graph.n_items(), dim)?;
        Ok(Self { users, items })
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn user_row(&self, u: UserId) -> &[f64] {
        self.users.row(u.0 as usize)
    }

    pub fn item_row(&self, v: ItemId) -> &[f64] {
        self.items.row(v.0 as usize)
    }
}

/// Profile attributes of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Structured text of one item: title, release year and open attribute
/// lists such as genre or category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemText {
    pub id: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Vec<String>>,
}

/// Textual attributes for every graph entity, aligned to internal ids.
/// Entities missing from the source files get an empty record so prompt
/// rendering stays total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStore {
    user_profiles: Vec<UserProfile>,
    item_texts: Vec<ItemText>,
    pub filled_users: usize,
    pub filled_items: usize,
}

impl TextStore {
    pub fn from_records(
        mut users: Vec<UserProfile>,
        mut items: Vec<ItemText>,
        graph: &InteractionGraph,
    ) -> Self {
        let mut user_profiles: Vec<UserProfile> = Vec::with_capacity(graph.n_users());
        let mut by_user: BTreeMap<String, UserProfile> =
            users.drain(..).map(|p| (p.id.clone(), p)).collect();
        let mut filled_users = 0;
        for u in graph.users() {
            let key = graph.user_key(u).unwrap();
            match by_user.remove(key) {
                Some(p) => user_profiles.push(p),
                None => {
                    filled_users += 1;
                    user_profiles
                        .push(UserProfile { id: key.to_string(), attributes: BTreeMap::new() });
                }
            }
        }

        let mut item_texts: Vec<ItemText> = Vec::with_capacity(graph.n_items());
        let mut by_item: BTreeMap<String, ItemText> =
            items.drain(..).map(|t| (t.id.clone(), t)).collect();
        let mut filled_items = 0;
        for v in graph.items() {
            let key = graph.item_key(v).unwrap();
            match by_item.remove(key) {
                Some(t) => item_texts.push(t),
                None => {
                    filled_items += 1;
                    item_texts.push(ItemText {
                        id: key.to_string(),
                        title: None,
                        year: None,
                        attributes: BTreeMap::new(),
                    });
                }
            }
        }
        Self { user_profiles, item_texts, filled_users, filled_items }
    }

    pub fn load(
        user_path: &Path,
        item_path: &Path,
        graph: &InteractionGraph,
    ) -> Result<Self, FeatureError> {
        let users = parse_user_profiles(user_path)?;
        let items = parse_item_texts(item_path)?;
        Ok(Self::from_records(users, items, graph))
    }

    pub fn user_profile(&self, u: UserId) -> Result<&UserProfile, FeatureError> {
        self.user_profiles.get(u.0 as usize).ok_or(FeatureError::UnknownUser(u))
    }

    /// Records for a set of items, in ascending internal-id order.
    pub fn item_text(
        &self,
        ids: &std::collections::BTreeSet<ItemId>,
    ) -> Result<Vec<&ItemText>, FeatureError> {
        ids.iter()
            .map(|&v| self.item_texts.get(v.0 as usize).ok_or(FeatureError::UnknownItem(v)))
            .collect()
    }

    /// Records in the caller's order, e.g. interaction-time order for
    /// history rendering.
    pub fn items_in_order(&self, ids: &[ItemId]) -> Result<Vec<&ItemText>, FeatureError> {
        ids.iter()
            .map(|&v| self.item_texts.get(v.0 as usize).ok_or(FeatureError::UnknownItem(v)))
            .collect()
    }

    pub fn n_users(&self) -> usize {
        self.user_profiles.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_texts.len()
    }
}

fn parse_jsonl<T, F>(path: &Path, mut convert: F) -> Result<Vec<T>, FeatureError>
where
    F: FnMut(serde_json::Value, usize) -> Result<T, FeatureError>,
{
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| FeatureError::MalformedText {
                path: display.clone(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        out.push(convert(value, idx + 1)?);
    }
    Ok(out)
}

pub fn parse_user_profiles(path: &Path) -> Result<Vec<UserProfile>, FeatureError> {
    let display = path.display().to_string();
    parse_jsonl(path, |value, line| {
        serde_json::from_value(value).map_err(|e| FeatureError::MalformedText {
            path: display.clone(),
            line,
            reason: e.to_string(),
        })
    })
}

pub fn parse_item_texts(path: &Path) -> Result<Vec<ItemText>, FeatureError> {
    let display = path.display().to_string();
    parse_jsonl(path, |value, line| {
        if let Some(year) = value.get("year").and_then(serde_json::Value::as_i64) {
            if !(1000..=9999).contains(&year) {
                return Err(FeatureError::BadYear { path: display.clone(), line, value: year });
            }
        }
        serde_json::from_value(value).map_err(|e| FeatureError::MalformedText {
            path: display.clone(),
            line,
            reason: e.to_string(),
        })
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FeatureError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serialization cannot fail"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}
