// SPDX-License-Identifier: Apache-2.0

//! Grouping template-assigned lines into labelled sessions.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledLine {
    pub index: usize,
    pub timestamp_ordinal: u64,
    pub template_id: u32,
    pub is_anomalous: bool,
    /// Raw text the group key is extracted from.
    pub group_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Origin {
    Window(usize),
    Group(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub template_ids: Vec<u32>,
    pub label: bool,
    pub domain: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SessionMode {
    #[default]
    Window,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionizerConfig {
    pub mode: SessionMode,
    pub window_size: usize,
    pub train_frac: f64,
    pub key_pattern: String,
    /// Token in the label column that marks a normal line.
    pub normal_label: String,
}

impl Default for SessionizerConfig {
    fn default() -> Self {
        Self {
            mode: SessionMode::Window,
            window_size: 20,
            train_frac: 0.8,
            key_pattern: r"(blk_-?\d+)".into(),
            normal_label: "-".into(),
        }
    }
}

/// Alert-tag label convention: a line is normal iff its label column equals
/// `normal_label`.
pub fn label_is_anomalous(label: &str, normal_label: &str) -> bool {
    label.trim() != normal_label
}

/// Non-overlapping windows in file order; the tail window is kept.
pub fn window_sessions(lines: &[LabeledLine], window_size: usize, domain: &str) -> Result<Vec<Session>> {
    if window_size == 0 {
        return Err(Error::config("window_size must be >= 1"));
    }
    Ok(lines
        .chunks(window_size)
        .enumerate()
        .map(|(i, chunk)| Session {
            template_ids: chunk.iter().map(|l| l.template_id).collect(),
            label: chunk.iter().any(|l| l.is_anomalous),
            domain: domain.to_string(),
            origin: Origin::Window(i),
        })
        .collect())
}

/// Result of keyed grouping: sessions in first-appearance order plus the
/// number of lines that carried no key.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSessions {
    pub sessions: Vec<Session>,
    pub skipped: usize,
}

/// One session per distinct key extracted by `key_pattern` (first capture
/// group if present, whole match otherwise).
pub fn group_sessions(lines: &[LabeledLine], key_pattern: &str, domain: &str) -> Result<GroupedSessions> {
    let re = Regex::new(key_pattern).map_err(|e| Error::config(format!("key_pattern: {e}")))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<u32>, bool)> = HashMap::new();
    let mut skipped = 0;
    for line in lines {
        let key = line.group_key.as_deref().and_then(|text| {
            re.captures(text)
                .map(|c| c.get(1).unwrap_or_else(|| c.get(0).unwrap()).as_str().to_string())
        });
        let Some(key) = key else {
            skipped += 1;
            continue;
        };
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), false)
        });
        entry.0.push(line.template_id);
        entry.1 |= line.is_anomalous;
    }
    if order.is_empty() {
        return Err(Error::data("no group keys extracted"));
    }
    let sessions = order
        .into_iter()
        .map(|key| {
            let (ids, label) = groups.remove(&key).unwrap();
            Session {
                template_ids: ids,
                label,
                domain: domain.to_string(),
                origin: Origin::Group(key),
            }
        })
        .collect();
    Ok(GroupedSessions { sessions, skipped })
}

/// First `floor(n * train_fraction)` sessions train, the rest test.
pub fn chrono_split(sessions: &[Session], train_fraction: f64) -> Result<(Vec<Session>, Vec<Session>)> {
    if sessions.len() < 2 {
        return Err(Error::data("split impossible: need at least 2 sessions"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let cut = (sessions.len() as f64 * train_fraction).floor() as usize;
    let (a, b) = sessions.split_at(cut);
    Ok((a.to_vec(), b.to_vec()))
}

/// Trailing `fraction` of a training split, used as the dev set.
pub fn dev_split(train: &[Session], fraction: f64) -> (Vec<Session>, Vec<Session>) {
    let dev = ((train.len() as f64) * fraction).round() as usize;
    let dev = dev.clamp(usize::from(train.len() > 1), train.len().saturating_sub(1));
    let (a, b) = train.split_at(train.len() - dev);
    (a.to_vec(), b.to_vec())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}
