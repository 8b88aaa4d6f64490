// SPDX-License-Identifier: Apache-2.0

//! Streaming template mining over a fixed-depth prefix tree.
//!
//! Layout of the tree:
//!
//! ```text
//!            root
//!             |
//!        token count            level 1
//!             |
//!        first token            levels 2 .. depth-1
//!             |
//!        second token
//!             |
//!     [candidate templates]     leaf
//! ```
//!
//! Tokens that contain a digit, and tokens arriving after a node is full,
//! are routed through a shared `<*>` child.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WILDCARD: &str = "<*>";
pub const ASSIGNMENTS_MAGIC: &[u8; 8] = b"LOGASG01";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty line")]
    EmptyLine,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{} malformed line(s), first at line {}: {}", .0.len(), .0[0].0, .0[0].1)]
    Lines(Vec<(usize, String)>),
    #[error("invalid parser config: {0}")]
    Config(String),
    #[error("invalid mask pattern {pattern:?}: {message}")]
    MaskPattern { pattern: String, message: String },
    #[error("invalid line format {0:?}")]
    LineFormat(String),
    #[error("assignments file: {0}")]
    Assignments(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub id: u32,
    pub tokens: Vec<String>,
    pub match_count: u64,
}

impl LogTemplate {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Named sets of masking regexes for the public corpora layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskPreset {
    #[default]
    Default,
    Hdfs,
    Bgl,
    Thunderbird,
    None,
}

const NUMBER: &str = r"\b\d+(?:\.\d+)?\b";
const HEX: &str = r"\b0[xX][0-9a-fA-F]+\b";
const IPV4: &str = r"\b(?:\d{1,3}\.){3}\d{1,3}(?::\d+)?\b";

impl MaskPreset {
    pub fn patterns(self) -> Vec<String> {
        let v: &[&str] = match self {
            MaskPreset::None => &[],
            MaskPreset::Default => &[HEX, NUMBER],
            MaskPreset::Hdfs => &[r"blk_-?\d+", IPV4, NUMBER],
            MaskPreset::Bgl => &[r"\bR\d+-M\d+(?:-[A-Z]\w*)*(?::[\w-]+)?", HEX, IPV4, NUMBER],
            MaskPreset::Thunderbird => &[IPV4, r"(?:/[\w.-]+){2,}", HEX, NUMBER],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for MaskPreset {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(MaskPreset::Default),
            "hdfs" => Ok(MaskPreset::Hdfs),
            "bgl" => Ok(MaskPreset::Bgl),
            "thunderbird" => Ok(MaskPreset::Thunderbird),
            "none" => Ok(MaskPreset::None),
            other => Err(ParseError::Config(format!("unknown mask preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParserConfig {
    /// Levels below the root, counting the length level and the leaf level.
    pub tree_depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
    pub mask_patterns: Vec<String>,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self {
            tree_depth: 4,
            similarity_threshold: 0.5,
            max_children: 100,
            mask_patterns: MaskPreset::Default.patterns(),
        }
    }
}

impl ParserConfig {
    pub fn with_preset(preset: MaskPreset) -> Self {
        Self {
            mask_patterns: preset.patterns(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ParseError> {
        if self.tree_depth < 3 {
            return Err(ParseError::Config(format!(
                "tree_depth must be >= 3, got {}",
                self.tree_depth
            )));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(ParseError::Config(format!(
                "similarity_threshold must be in (0, 1], got {}",
                self.similarity_threshold
            )));
        }
        if self.max_children < 2 {
            return Err(ParseError::Config(format!(
                "max_children must be >= 2, got {}",
                self.max_children
            )));
        }
        Ok(())
    }

    /// Number of leading tokens used for routing.
    fn token_levels(&self) -> usize {
        self.tree_depth - 2
    }
}

#[derive(Debug, Default)]
struct Node {
    children: HashMap<String, Node>,
    literal_children: usize,
    clusters: Vec<u32>,
}

/// Stateful single-writer template miner.
#[derive(Debug)]
pub struct DrainParser {
    config: ParserConfig,
    masks: Vec<Regex>,
    by_length: HashMap<usize, Node>,
    templates: Vec<LogTemplate>,
}

fn has_digit(token: &str) -> bool {
    token.bytes().any(|b| b.is_ascii_digit())
}

/// Fraction of positions where the template has a wildcard or the same token.
pub fn similarity(template: &[String], tokens: &[&str]) -> f64 {
    debug_assert_eq!(template.len(), tokens.len());
    if tokens.is_empty() {
        return 1.0;
    }
    let same = template
        .iter()
        .zip(tokens)
        .filter(|(t, tok)| t.as_str() == WILDCARD || t.as_str() == **tok)
        .count();
    same as f64 / tokens.len() as f64
}

impl DrainParser {
    pub fn new(config: ParserConfig) -> Result<Self, ParseError> {
        config.validate()?;
        let masks = config
            .mask_patterns
            .iter()
            .map(|p| {
                Regex::new(p).map_err(|e| ParseError::MaskPattern {
                    pattern: p.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            masks,
            by_length: HashMap::new(),
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &ParserConfig {
        &self.config
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn into_templates(self) -> Vec<LogTemplate> {
        self.templates
    }

    /// Applies every mask pattern in order, replacing matches with `<*>`.
    pub fn mask(&self, line: &str) -> String {
        let mut out = line.trim().to_string();
        for re in &self.masks {
            if re.is_match(&out) {
                out = re.replace_all(&out, WILDCARD).into_owned();
            }
        }
        out
    }

    pub fn parse_bytes(&mut self, line: &[u8]) -> Result<u32, ParseError> {
        self.parse_line(&String::from_utf8_lossy(line))
    }

    /// Assigns `line` to a template, creating or generalising one as needed.
    pub fn parse_line(&mut self, line: &str) -> Result<u32, ParseError> {
        if line.trim().is_empty() {
            return Err(ParseError::EmptyLine);
        }
        let masked = self.mask(line);
        let tokens: Vec<&str> = masked.split_whitespace().collect();
        let levels = self.config.token_levels();
        let max_children = self.config.max_children;
        let threshold = self.config.similarity_threshold;

        let mut node = self.by_length.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(levels) {
            let key = if node.children.contains_key(*tok) {
                (*tok).to_string()
            } else if *tok == WILDCARD || has_digit(tok) || node.literal_children + 1 >= max_children {
                WILDCARD.to_string()
            } else {
                node.literal_children += 1;
                (*tok).to_string()
            };
            node = node.children.entry(key).or_default();
        }

        let best = best_cluster(&self.templates, &node.clusters, &tokens, threshold);
        match best {
            Some(id) => {
                let tpl = &mut self.templates[id as usize];
                for (slot, tok) in tpl.tokens.iter_mut().zip(&tokens) {
                    if slot != tok && slot != WILDCARD {
                        *slot = WILDCARD.to_string();
                    }
                }
                tpl.match_count += 1;
                Ok(id)
            }
            None => {
                let id = u32::try_from(self.templates.len()).expect("template count fits u32");
                self.templates.push(LogTemplate {
                    id,
                    tokens: tokens.iter().map(|t| t.to_string()).collect(),
                    match_count: 1,
                });
                node.clusters.push(id);
                Ok(id)
            }
        }
    }

    /// Read-only lookup against the current table. Never creates templates.
    pub fn match_line(&self, line: &str) -> Option<u32> {
        if line.trim().is_empty() {
            return None;
        }
        let masked = self.mask(line);
        let tokens: Vec<&str> = masked.split_whitespace().collect();
        let mut node = self.by_length.get(&tokens.len())?;
        for tok in tokens.iter().take(self.config.token_levels()) {
            node = node.children.get(*tok).or_else(|| node.children.get(WILDCARD))?;
        }
        best_cluster(
            &self.templates,
            &node.clusters,
            &tokens,
            self.config.similarity_threshold,
        )
    }
}

/// Highest similarity at or above `threshold`; ties go to the lowest ID.
fn best_cluster(templates: &[LogTemplate], candidates: &[u32], tokens: &[&str], threshold: f64) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for &id in candidates {
        let tpl = &templates[id as usize];
        if tpl.tokens.len() != tokens.len() {
            continue;
        }
        let sim = similarity(&tpl.tokens, tokens);
        if sim < threshold {
            continue;
        }
        match best {
            Some((bid, bsim)) if bsim > sim || (bsim == sim && bid < id) => {}
            _ => best = Some((id, sim)),
        }
    }
    best.map(|(id, _)| id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedCorpus {
    pub templates: Vec<LogTemplate>,
    pub assignments: Vec<u32>,
}

/// Mines a whole corpus sequentially.
pub fn mine_corpus<S: AsRef<str>>(lines: &[S], config: &ParserConfig) -> Result<MinedCorpus, ParseError> {
    if lines.iter().all(|l| l.as_ref().trim().is_empty()) {
        return Err(ParseError::EmptyCorpus);
    }
    let mut parser = DrainParser::new(config.clone())?;
    let mut assignments = Vec::with_capacity(lines.len());
    let mut errors = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        match parser.parse_line(line.as_ref()) {
            Ok(id) => assignments.push(id),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    if !errors.is_empty() {
        return Err(ParseError::Lines(errors));
    }
    Ok(MinedCorpus {
        templates: parser.into_templates(),
        assignments,
    })
}

pub fn write_templates_json(path: &Path, templates: &[LogTemplate]) -> std::io::Result<()> {
    let body = serde_json::to_string_pretty(templates).map_err(std::io::Error::other)?;
    std::fs::write(path, body)
}

pub fn read_templates_json(path: &Path) -> std::io::Result<Vec<LogTemplate>> {
    let body = std::fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(std::io::Error::other)
}

/// `LOGASG01`, u32 count, then one little-endian u32 per line.
pub fn encode_assignments(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * ids.len());
    out.extend_from_slice(ASSIGNMENTS_MAGIC);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_assignments(bytes: &[u8]) -> Result<Vec<u32>, ParseError> {
    if bytes.len() < 12 || &bytes[..8] != ASSIGNMENTS_MAGIC {
        return Err(ParseError::Assignments("bad magic".into()));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != count * 4 {
        return Err(ParseError::Assignments(format!(
            "declared {count} ids but payload holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_assignments(path: &Path, ids: &[u32]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_assignments(ids))
}

/// Splits raw lines into named columns, e.g. `"<Label> <Timestamp> <Content>"`.
///
/// Whitespace in the format matches one or more whitespace characters; the last
/// field is greedy. A format must contain a `<Content>` field.
#[derive(Debug, Clone)]
pub struct LineFormat {
    format: String,
    regex: Regex,
    fields: Vec<String>,
}

impl LineFormat {
    pub fn new(format: &str) -> Result<Self, ParseError> {
        let header = Regex::new(r"<([A-Za-z_][A-Za-z0-9_]*)>").unwrap();
        let mut pattern = String::from("^");
        let mut fields = Vec::new();
        let mut last = 0;
        let total = header.find_iter(format).count();
        for (i, cap) in header.captures_iter(format).enumerate() {
            let whole = cap.get(0).unwrap();
            pattern.push_str(&literal_pattern(&format[last..whole.start()]));
            let name = cap[1].to_string();
            if fields.contains(&name) {
                return Err(ParseError::LineFormat(format.to_string()));
            }
            let body = if i + 1 == total { ".*" } else { ".*?" };
            pattern.push_str(&format!("(?P<{name}>{body})"));
            fields.push(name);
            last = whole.end();
        }
        pattern.push_str(&literal_pattern(&format[last..]));
        pattern.push('$');
        if !fields.iter().any(|f| f == "Content") {
            return Err(ParseError::LineFormat(format.to_string()));
        }
        let regex = Regex::new(&pattern).map_err(|_| ParseError::LineFormat(format.to_string()))?;
        Ok(Self {
            format: format.to_string(),
            regex,
            fields,
        })
    }

    pub fn content_only() -> Self {
        Self::new("<Content>").expect("static format")
    }

    pub fn as_str(&self) -> &str {
        &self.format
    }

    pub fn has_field(&self, name: &str) -> bool {
        self.fields.iter().any(|f| f == name)
    }

    /// Returns the named columns, or `None` when the line does not fit.
    pub fn split<'a>(&self, line: &'a str) -> Option<HashMap<&str, &'a str>> {
        let caps = self.regex.captures(line.trim_end_matches(['\r', '\n']))?;
        Some(
            self.fields
                .iter()
                .map(|f| (f.as_str(), caps.name(f).map_or("", |m| m.as_str())))
                .collect(),
        )
    }
}

fn literal_pattern(lit: &str) -> String {
    let mut out = String::new();
    let mut in_space = false;
    for ch in lit.chars() {
        if ch.is_whitespace() {
            if !in_space {
                out.push_str(r"\s+");
                in_space = true;
            }
        } else {
            in_space = false;
            out.push_str(&regex::escape(&ch.to_string()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parser(threshold: f64) -> DrainParser {
        DrainParser::new(ParserConfig {
            similarity_threshold: threshold,
            ..ParserConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identical_lines_share_template() {
        let mut p = parser(0.5);
        assert_eq!(p.parse_line("send block 5").unwrap(), 0);
        assert_eq!(p.parse_line("send block 5").unwrap(), 0);
        assert_eq!(p.templates()[0].tokens, ["send", "block", "<*>"]);
        assert_eq!(p.templates()[0].match_count, 2);
    }

    #[test]
    fn merge_generalises_differing_positions() {
        let mut p = parser(0.5);
        assert_eq!(p.parse_line("send block 5 ok").unwrap(), 0);
        assert_eq!(p.parse_line("send block 7 fail").unwrap(), 0);
        assert_eq!(p.templates()[0].tokens, ["send", "block", "<*>", "<*>"]);
    }

    #[test]
    fn dissimilar_lines_get_new_templates() {
        let mut p = parser(0.5);
        assert_eq!(p.parse_line("open file A").unwrap(), 0);
        assert_eq!(p.parse_line("close socket B").unwrap(), 1);
    }

    #[test]
    fn same_leaf_below_threshold_splits() {
        // Same routing prefix, similarity 2/5 < 0.5.
        let mut p = parser(0.5);
        assert_eq!(p.parse_line("node up alpha beta gamma").unwrap(), 0);
        assert_eq!(p.parse_line("node up delta eps zeta").unwrap(), 1);
        assert_eq!(p.parse_line("node up alpha beta zeta").unwrap(), 0);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut p = parser(0.4);
        p.parse_line("a b c d e").unwrap();
        p.parse_line("a b x y z").unwrap(); // 2/5 >= 0.4 -> merges into 0
        assert_eq!(p.templates().len(), 1);
        let mut q = parser(0.6);
        q.parse_line("a b c d e").unwrap();
        q.parse_line("a b x y z").unwrap();
        assert_eq!(q.templates().len(), 2);
        // 3/5 against both.
        assert_eq!(q.parse_line("a b c y q").unwrap(), 0);
    }

    #[test]
    fn empty_line_rejected() {
        let mut p = parser(0.5);
        assert_eq!(p.parse_line("   "), Err(ParseError::EmptyLine));
    }

    #[test]
    fn invalid_utf8_is_lossy() {
        let mut p = parser(0.5);
        let id = p.parse_bytes(b"bad \xff\xfe bytes").unwrap();
        assert_eq!(id, 0);
        assert!(p.templates()[0].tokens[1].contains('\u{fffd}'));
    }

    #[test]
    fn empty_corpus_is_error() {
        let empty: [&str; 0] = [];
        assert_eq!(
            mine_corpus(&empty, &ParserConfig::default()),
            Err(ParseError::EmptyCorpus)
        );
    }

    #[test]
    fn single_line_corpus() {
        let m = mine_corpus(&["hello world"], &ParserConfig::default()).unwrap();
        assert_eq!(m.templates.len(), 1);
        assert_eq!(m.assignments, vec![0]);
    }

    #[test]
    fn line_errors_carry_line_numbers() {
        let err = mine_corpus(&["a b", "", "c d"], &ParserConfig::default()).unwrap_err();
        assert_eq!(err, ParseError::Lines(vec![(2, "empty line".into())]));
    }

    #[test]
    fn config_validation() {
        for cfg in [
            ParserConfig {
                tree_depth: 2,
                ..Default::default()
            },
            ParserConfig {
                similarity_threshold: 0.0,
                ..Default::default()
            },
            ParserConfig {
                similarity_threshold: 1.5,
                ..Default::default()
            },
            ParserConfig {
                max_children: 1,
                ..Default::default()
            },
        ] {
            assert!(DrainParser::new(cfg).is_err());
        }
        let bad = ParserConfig {
            mask_patterns: vec!["(".into()],
            ..Default::default()
        };
        assert!(matches!(DrainParser::new(bad), Err(ParseError::MaskPattern { .. })));
    }

    #[test]
    fn max_children_overflow_uses_wildcard_child() {
        let mut p = DrainParser::new(ParserConfig {
            max_children: 3,
            similarity_threshold: 1.0,
            ..Default::default()
        })
        .unwrap();
        for w in ["aa", "bb", "cc", "dd", "ee"] {
            p.parse_line(&format!("{w} x y")).unwrap();
        }
        let root = &p.by_length[&3];
        assert_eq!(root.children.len(), 3);
        assert!(root.children.contains_key(WILDCARD));
        assert_eq!(root.children[WILDCARD].children.len(), 1);
        assert_eq!(root.children[WILDCARD].children["x"].clusters.len(), 3);
    }

    #[test]
    fn presets_mask_identifiers() {
        let p = DrainParser::new(ParserConfig::with_preset(MaskPreset::Hdfs)).unwrap();
        assert_eq!(
            p.mask("Receiving block blk_-1608999687919862906 src: /10.250.19.102:54106"),
            "Receiving block <*> src: /<*>"
        );
        let p = DrainParser::new(ParserConfig::with_preset(MaskPreset::Bgl)).unwrap();
        assert_eq!(
            p.mask("R02-M1-N0-C:J12-U11 cache parity error at 0x00aa corrected 3"),
            "<*> cache parity error at <*> corrected <*>"
        );
        let p = DrainParser::new(ParserConfig::with_preset(MaskPreset::Thunderbird)).unwrap();
        assert_eq!(p.mask("open /var/log/messages failed"), "open <*> failed");
    }

    #[test]
    fn assignments_round_trip_and_reject_truncation() {
        let ids = vec![0, 5, 3, u32::MAX];
        let bytes = encode_assignments(&ids);
        assert_eq!(&bytes[..8], b"LOGASG01");
        assert_eq!(decode_assignments(&bytes).unwrap(), ids);
        assert!(decode_assignments(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_assignments(b"nonsense-bytes").is_err());
    }

    #[test]
    fn line_format_splits_columns() {
        let f = LineFormat::new("<Label> <Timestamp> <Content>").unwrap();
        let cols = f.split("- 1117838570  RAS KERNEL INFO done").unwrap();
        assert_eq!(cols["Label"], "-");
        assert_eq!(cols["Timestamp"], "1117838570");
        assert_eq!(cols["Content"], "RAS KERNEL INFO done");
        assert!(LineFormat::new("<Label> <Time>").is_err());
        assert!(LineFormat::new("<Content> <Content>").is_err());
        let f = LineFormat::new("[<Date>] <Content>").unwrap();
        assert_eq!(f.split("[Thu Jun 09] hi there").unwrap()["Date"], "Thu Jun 09");
        assert!(f.split("no brackets").is_none());
    }

    #[test]
    fn match_line_is_read_only() {
        let mut p = parser(0.5);
        let a = p.parse_line("send block 5 ok").unwrap();
        assert_eq!(p.match_line("send block 9 ok"), Some(a));
        assert_eq!(p.match_line("unknown thing"), None);
        assert_eq!(p.templates().len(), 1);
    }

    fn corpus_line() -> impl Strategy<Value = String> {
        let words = prop::sample::select(vec![
            "alpha", "beta", "gamma", "delta", "42", "0x1f", "node7", "up", "down", "x",
        ]);
        prop::collection::vec(words, 1..7).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn mining_is_deterministic_and_idempotent(
            lines in prop::collection::vec(corpus_line(), 1..60),
            threshold in 0.3f64..=1.0,
        ) {
            let cfg = ParserConfig { similarity_threshold: threshold, ..Default::default() };
            let a = mine_corpus(&lines, &cfg).unwrap();
            let b = mine_corpus(&lines, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.assignments.len(), lines.len());
            let total: u64 = a.templates.iter().map(|t| t.match_count).sum();
            prop_assert_eq!(total, lines.len() as u64);
            for (i, t) in a.templates.iter().enumerate() {
                prop_assert_eq!(t.id as usize, i);
                let count = a.assignments.iter().filter(|&&x| x == t.id).count() as u64;
                prop_assert_eq!(count, t.match_count);
            }

            // Re-parsing the last line, with nothing in between, returns its template.
            let mut p = DrainParser::new(cfg.clone()).unwrap();
            for l in &lines {
                let id = p.parse_line(l).unwrap();
                let before: Vec<_> = p.templates().to_vec();
                prop_assert_eq!(p.parse_line(l).unwrap(), id);
                // Monotone wildcards: a wildcard never reverts to a literal.
                for (old, new) in before.iter().zip(p.templates()) {
                    for (o, n) in old.tokens.iter().zip(&new.tokens) {
                        if o == WILDCARD {
                            prop_assert_eq!(n.as_str(), WILDCARD);
                        }
                    }
                }
            }
        }

        #[test]
        fn masked_substrings_never_survive(n in 0u32..100000, word in "[a-z]{1,6}") {
            let mut p = parser(0.5);
            let id = p.parse_line(&format!("{word} value {n} seen")).unwrap();
            let tpl = &p.templates()[id as usize];
            prop_assert!(!tpl.tokens.iter().any(|t| t == &n.to_string()));
            prop_assert_eq!(tpl.tokens[2].as_str(), WILDCARD);
        }
    }
}
