// SPDX-License-Identifier: Apache-2.0

//! Raw lines to model-ready session matrices, plus the on-disk layout the
//! command-line stages exchange.
//!
//! A data directory holds `templates.json`, `lines.jsonl`,
//! `sessions_{train,dev,test}.jsonl` and `embeddings.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::embed::{materialize_all, EmbeddingSource, EmbeddingTable, SessionMatrix};
use crate::error::{Error, Result};
use crate::parser::{mine_corpus, read_templates_json, write_templates_json, LineFormat, LogTemplate};
use crate::seed::sha256_hex;
use crate::session::{
    chrono_split, dev_split, group_sessions, label_is_anomalous, read_jsonl, window_sessions, write_jsonl, LabeledLine,
    Session, SessionMode,
};

pub const TEMPLATES_FILE: &str = "templates.json";
pub const LINES_FILE: &str = "lines.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn sessions_file(split: &str) -> String {
    format!("sessions_{split}.jsonl")
}

/// One parsed line as stored in `lines.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLine {
    pub line: usize,
    pub template_id: u32,
    pub anomalous: bool,
    /// Text searched for group keys (the content field).
    pub content: String,
}

impl ParsedLine {
    fn labeled(&self) -> LabeledLine {
        LabeledLine {
            index: self.line,
            timestamp_ordinal: self.line as u64,
            template_id: self.template_id,
            is_anomalous: self.anomalous,
            group_key: Some(self.content.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub templates: Vec<LogTemplate>,
    pub lines: Vec<ParsedLine>,
}

/// Splits raw lines by `cfg.input.line_format` and mines templates from the
/// content field. Lines without a `Label` field are normal.
pub fn parse_lines<S: AsRef<str>>(raw: &[S], cfg: &PipelineConfig) -> Result<ParsedLog> {
    let fmt = LineFormat::new(&cfg.input.line_format)?;
    let has_label = fmt.has_field("Label");
    let mut contents = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    let mut bad = Vec::new();
    for (i, line) in raw.iter().enumerate() {
        match fmt.split(line.as_ref()) {
            Some(fields) => {
                contents.push(fields["Content"].to_string());
                labels.push(has_label && label_is_anomalous(fields["Label"], &cfg.sessionizer.normal_label));
            }
            None => bad.push(i + 1),
        }
    }
    if let Some(first) = bad.first() {
        return Err(Error::data(format!(
            "{} line(s) do not match format {:?}, first at line {first}",
            bad.len(),
            cfg.input.line_format
        )));
    }
    let mined = mine_corpus(&contents, &cfg.parser)?;
    let lines = mined
        .assignments
        .iter()
        .zip(labels)
        .zip(contents)
        .enumerate()
        .map(|(i, ((&template_id, anomalous), content))| ParsedLine {
            line: i + 1,
            template_id,
            anomalous,
            content,
        })
        .collect();
    Ok(ParsedLog {
        templates: mined.templates,
        lines,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Session>,
    pub dev: Vec<Session>,
    pub test: Vec<Session>,
}

impl Splits {
    pub fn get(&self, split: &str) -> Result<&[Session]> {
        match split {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Sessionizes parsed lines and splits them chronologically; the dev set is
/// the tail of the training split.
pub fn sessionize(lines: &[ParsedLine], domain: &str, cfg: &PipelineConfig) -> Result<Splits> {
    let labeled: Vec<LabeledLine> = lines.iter().map(ParsedLine::labeled).collect();
    let sessions = match cfg.sessionizer.mode {
        SessionMode::Window => window_sessions(&labeled, cfg.sessionizer.window_size, domain)?,
        SessionMode::Group => group_sessions(&labeled, &cfg.sessionizer.key_pattern, domain)?.sessions,
    };
    let (train, test) = chrono_split(&sessions, cfg.sessionizer.train_frac)?;
    let (train, dev) = dev_split(&train, cfg.train.dev_fraction);
    Ok(Splits { train, dev, test })
}

/// Hashed embeddings for `templates`, or the configured file.
pub fn embedding_table(templates: &[LogTemplate], cfg: &PipelineConfig) -> Result<EmbeddingTable> {
    match cfg.embedder.source {
        EmbeddingSource::Hashed => {
            let tokens: Vec<Vec<String>> = templates.iter().map(|t| t.tokens.clone()).collect();
            Ok(EmbeddingTable::hashed(&tokens, cfg.embedder.dim, cfg.embed_seed())?)
        }
        EmbeddingSource::File => {
            let path = cfg
                .embedder
                .path
                .as_ref()
                .ok_or_else(|| Error::config("embedder.path missing"))?;
            let table = EmbeddingTable::load(path, templates.len())?;
            if table.dim() != cfg.embedder.dim {
                return Err(Error::config(format!(
                    "embedding file has dim {}, config says {}",
                    table.dim(),
                    cfg.embedder.dim
                )));
            }
            Ok(table)
        }
    }
}

/// Everything the trainer needs about one domain.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub templates: Vec<LogTemplate>,
    pub table: EmbeddingTable,
    pub splits: Splits,
    pub train: Vec<SessionMatrix>,
    pub dev: Vec<SessionMatrix>,
    pub test: Vec<SessionMatrix>,
}

impl DomainData {
    pub fn build(
        name: &str,
        templates: Vec<LogTemplate>,
        splits: Splits,
        table: EmbeddingTable,
        seq_len: usize,
    ) -> Result<Self> {
        let train = materialize_all(&splits.train, &table, seq_len)?;
        let dev = materialize_all(&splits.dev, &table, seq_len)?;
        let test = materialize_all(&splits.test, &table, seq_len)?;
        Ok(Self {
            name: name.to_string(),
            templates,
            table,
            splits,
            train,
            dev,
            test,
        })
    }

    /// Parse, sessionize, embed and materialize raw lines.
    pub fn from_lines<S: AsRef<str>>(name: &str, raw: &[S], cfg: &PipelineConfig) -> Result<Self> {
        let parsed = parse_lines(raw, cfg)?;
        let splits = sessionize(&parsed.lines, name, cfg)?;
        let table = embedding_table(&parsed.templates, cfg)?;
        Self::build(name, parsed.templates, splits, table, cfg.model.seq_len)
    }

    /// SHA-256 over the splits and the embedding table.
    pub fn hash(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.splits).expect("serializable");
        bytes.extend(self.table.to_bytes());
        sha256_hex(&bytes)
    }

    pub fn matrices(&self, split: &str) -> Result<&[SessionMatrix]> {
        match split {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_templates(dir, &self.templates)?;
        write_splits(dir, &self.splits)?;
        let path = dir.join(EMBEDDINGS_FILE);
        self.table.save(&path).map_err(Error::from)
    }

    /// Loads a data directory written by the command-line stages.
    pub fn read(dir: &Path, seq_len: usize) -> Result<Self> {
        let templates = read_templates(dir)?;
        let splits = read_splits(dir)?;
        let table = EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE), templates.len())?;
        let name = splits
            .train
            .first()
            .map(|s| s.domain.clone())
            .unwrap_or_else(|| "unnamed".into());
        Self::build(&name, templates, splits, table, seq_len)
    }
}

pub fn write_templates(dir: &Path, templates: &[LogTemplate]) -> Result<()> {
    let path = dir.join(TEMPLATES_FILE);
    write_templates_json(&path, templates).map_err(|e| Error::io(&path, e))
}

pub fn read_templates(dir: &Path) -> Result<Vec<LogTemplate>> {
    let path = dir.join(TEMPLATES_FILE);
    read_templates_json(&path).map_err(|e| Error::io(&path, e))
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in SPLITS {
        write_jsonl(&dir.join(sessions_file(split)), splits.get(split)?)?;
    }
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<Splits> {
    let read = |split: &str| read_jsonl::<Session>(&dir.join(sessions_file(split)));
    Ok(Splits {
        train: read("train")?,
        dev: read("dev")?,
        test: read("test")?,
    })
}

pub fn read_raw_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::data(format!("{}: no log lines", path.display())));
    }
    Ok(lines)
}
