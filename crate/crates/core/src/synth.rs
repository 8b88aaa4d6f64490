// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic log domains.
//!
//! Each domain has its own pseudo-word vocabulary; anomaly classes come from
//! a registry shared by every domain. Anomalies arrive as bursts of 1 to 3
//! consecutive lines.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::stem;
use crate::error::{Error, Result};
use crate::parser::WILDCARD;
use crate::seed::derive_seed;

/// Anomaly classes known to every domain.
pub const ANOMALY_CLASSES: &[&str] = &[
    "unusual_end_of_program",
    "program_not_running",
    "hardware_fault",
    "network_timeout",
    "disk_failure",
    "memory_exhausted",
];

/// Raw line layout produced by [`generate`].
pub const LINE_FORMAT: &str = "<Label> <Timestamp> <Node> <Content>";
pub const NORMAL_LABEL: &str = "-";

/// Share of a paired template's literal stems reused across a domain pair.
pub const SHARED_STEM_FRACTION: f64 = 0.3;

/// Templates per anomaly class in [`paired_domains`].
pub const ANOMALY_VARIANTS: usize = 4;

/// Normal templates that exist in both paired domains.
pub const PAIRED_NORMAL: usize = 8;

/// Unpaired normal templates only the source domain has.
pub const SOURCE_EXTRA_NORMAL: usize = 56;

const MAX_BURST: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Lit(String),
    /// Decimal integer.
    Num,
    /// `0x`-prefixed hex word.
    Hex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub slots: Vec<Slot>,
}

impl Pattern {
    pub fn template_tokens(&self) -> Vec<String> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Lit(w) => w.clone(),
                Slot::Num | Slot::Hex => WILDCARD.to_string(),
            })
            .collect()
    }

    pub fn template_text(&self) -> String {
        self.template_tokens().join(" ")
    }

    pub fn literals(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Lit(w) => Some(w.as_str()),
            _ => None,
        })
    }

    fn render<R: Rng>(&self, rng: &mut R) -> String {
        let parts: Vec<String> = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Lit(w) => w.clone(),
                Slot::Num => rng.random_range(0..100_000u32).to_string(),
                Slot::Hex => format!("0x{:08x}", rng.random::<u32>()),
            })
            .collect();
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyPattern {
    pub class: String,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Literal token pools: `[node names, content words]`.
    pub vocab: Vec<Vec<String>>,
    pub normal_patterns: Vec<Pattern>,
    pub anomaly_patterns: Vec<AnomalyPattern>,
    pub anomaly_rate: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return Err(Error::config(format!(
                "anomaly_rate must be in [0,1), got {}",
                self.anomaly_rate
            )));
        }
        if self.normal_patterns.len() < 2 || self.anomaly_patterns.is_empty() {
            return Err(Error::config("a domain needs at least 2 normal and 1 anomaly pattern"));
        }
        if let Some(a) = self
            .anomaly_patterns
            .iter()
            .find(|a| !ANOMALY_CLASSES.contains(&a.class.as_str()))
        {
            return Err(Error::config(format!("unknown anomaly class {:?}", a.class)));
        }
        if self.vocab.first().is_none_or(|nodes| nodes.is_empty()) {
            return Err(Error::config("a domain needs at least one node name"));
        }
        Ok(())
    }

    fn nodes(&self) -> &[String] {
        &self.vocab[0]
    }

    /// Every literal token the domain can emit, node names included.
    pub fn literal_vocabulary(&self) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = self.vocab.iter().flatten().cloned().collect();
        for p in self
            .normal_patterns
            .iter()
            .chain(self.anomaly_patterns.iter().map(|a| &a.pattern))
        {
            set.extend(p.literals().map(str::to_string));
        }
        set
    }

    /// Template texts, normal patterns first.
    pub fn template_inventory(&self) -> Vec<String> {
        self.normal_patterns
            .iter()
            .chain(self.anomaly_patterns.iter().map(|a| &a.pattern))
            .map(Pattern::template_text)
            .collect()
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.anomaly_patterns.iter().map(|a| a.class.as_str()).collect()
    }
}

/// Per-line burst-start probability giving an expected anomalous fraction
/// of `rate` with burst lengths uniform on {1, 2, 3}.
///
/// A renewal cycle is either one normal line (prob `1-q`) or a burst of mean
/// length 2 (prob `q`), so the fraction is `2q / (1 + q)`.
pub fn burst_start_probability(rate: f64) -> f64 {
    rate / (2.0 - rate)
}

/// Asymptotic variance of the anomalous-line count over `n` lines.
pub fn anomaly_count_variance(rate: f64, n: usize) -> f64 {
    let q = burst_start_probability(rate);
    let second_moment = (1.0 + 4.0 + 9.0) / 3.0;
    let per_cycle = (1.0 - q) * rate * rate + q * (1.0 - rate).powi(2) * second_moment;
    n as f64 * per_cycle / (1.0 + q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub line: usize,
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub lines: Vec<String>,
    /// Anomaly class per line, `None` for normal lines.
    pub ground_truth: Vec<Option<String>>,
}

impl GeneratedCorpus {
    pub fn anomalous_lines(&self) -> usize {
        self.ground_truth.iter().filter(|c| c.is_some()).count()
    }

    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn ground_truth_rows(&self) -> Vec<GroundTruth> {
        self.ground_truth
            .iter()
            .enumerate()
            .map(|(i, c)| GroundTruth {
                line: i + 1,
                class: c.clone(),
            })
            .collect()
    }

    /// Writes `<name>.log` and `ground_truth.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(format!("{name}.log"));
        std::fs::write(&log, self.text()).map_err(|e| Error::io(&log, e))?;
        crate::session::write_jsonl(&dir.join("ground_truth.jsonl"), &self.ground_truth_rows())
    }
}

/// Emits `num_lines` labelled raw lines in [`LINE_FORMAT`].
pub fn generate(spec: &DomainSpec, num_lines: usize) -> Result<GeneratedCorpus> {
    spec.validate()?;
    if num_lines == 0 {
        return Err(Error::config("num_lines must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.lines"));
    let q = burst_start_probability(spec.anomaly_rate);
    let mut lines = Vec::with_capacity(num_lines);
    let mut truth = Vec::with_capacity(num_lines);
    let mut clock: u64 = 1_117_838_570;
    let mut burst: Option<(&AnomalyPattern, u64)> = None;
    for _ in 0..num_lines {
        if burst.is_none() && q > 0.0 && rng.random_bool(q) {
            let a = spec.anomaly_patterns.choose(&mut rng).expect("validated");
            burst = Some((a, rng.random_range(1..=MAX_BURST)));
        }
        clock += rng.random_range(0..3u64);
        let node = spec.nodes().choose(&mut rng).expect("validated");
        let (label, content, class) = match burst.as_mut() {
            Some((a, left)) => {
                let text = a.pattern.render(&mut rng);
                *left -= 1;
                let class = a.class.clone();
                if *left == 0 {
                    burst = None;
                }
                (class.clone(), text, Some(class))
            }
            None => {
                let p = spec.normal_patterns.choose(&mut rng).expect("validated");
                (NORMAL_LABEL.to_string(), p.render(&mut rng), None)
            }
        };
        lines.push(format!("{label} {clock} {node} {content}"));
        truth.push(class);
    }
    Ok(GeneratedCorpus {
        lines,
        ground_truth: truth,
    })
}

/// Draws pronounceable pseudo-words whose stems are pairwise distinct and
/// equal to the word itself.
struct WordForge {
    rng: ChaCha8Rng,
    stems: HashSet<String>,
}

impl WordForge {
    const ONSETS: &'static [&'static str] = &[
        "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "t", "v", "z", "br", "dr", "gr", "kl", "pr", "st",
        "tr", "sk", "pl",
    ];
    const VOWELS: &'static [&'static str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: &'static [&'static str] = &["", "", "k", "m", "n", "p", "t", "x", "v"];

    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            stems: HashSet::new(),
        }
    }

    fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(Self::ONSETS.choose(&mut self.rng).unwrap());
                w.push_str(Self::VOWELS.choose(&mut self.rng).unwrap());
            }
            w.push_str(Self::CODAS.choose(&mut self.rng).unwrap());
            if stem(&w) == w && self.stems.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn fresh_pattern(forge: &mut WordForge, literals: usize, vars: usize, fixed: Vec<String>) -> Pattern {
    // The first token is always a fresh literal so patterns never share a
    // parse-tree branch.
    let head = forge.word();
    let mut rest: Vec<Slot> = fixed.into_iter().map(Slot::Lit).collect();
    while rest.len() < literals - 1 {
        rest.push(Slot::Lit(forge.word()));
    }
    for i in 0..vars {
        rest.push(if i % 2 == 0 { Slot::Num } else { Slot::Hex });
    }
    rest.shuffle(&mut forge.rng);
    let mut slots = vec![Slot::Lit(head)];
    slots.extend(rest);
    Pattern { slots }
}

fn normal_patterns(forge: &mut WordForge, n: usize) -> Vec<Pattern> {
    (0..n)
        .map(|_| {
            let lits = forge.rng.random_range(5..=8);
            let vars = forge.rng.random_range(1..=2);
            fresh_pattern(forge, lits, vars, Vec::new())
        })
        .collect()
}

fn nodes(forge: &mut WordForge, n: usize) -> Vec<String> {
    (0..n).map(|_| forge.word()).collect()
}

fn check_classes(classes: &[&str]) -> Result<()> {
    if let Some(c) = classes.iter().find(|c| !ANOMALY_CLASSES.contains(c)) {
        return Err(Error::config(format!("unknown anomaly class {c:?}")));
    }
    let unique: BTreeSet<_> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(Error::config("duplicate anomaly class"));
    }
    Ok(())
}

fn assemble(
    name: &str,
    seed: u64,
    nodes: Vec<String>,
    normal: Vec<Pattern>,
    anomaly: Vec<AnomalyPattern>,
    rate: f64,
) -> DomainSpec {
    let mut words = BTreeSet::new();
    for p in normal.iter().chain(anomaly.iter().map(|a| &a.pattern)) {
        words.extend(p.literals().map(str::to_string));
    }
    DomainSpec {
        name: name.to_string(),
        vocab: vec![nodes, words.into_iter().collect()],
        normal_patterns: normal,
        anomaly_patterns: anomaly,
        anomaly_rate: rate,
        seed,
    }
}

/// Stand-alone domain with `normal` normal patterns and one anomaly pattern
/// per class.
pub fn single_domain(name: &str, normal: usize, classes: &[&str], anomaly_rate: f64, seed: u64) -> Result<DomainSpec> {
    check_classes(classes)?;
    let mut forge = WordForge::new(derive_seed(seed, "synth.vocab"));
    let node_names = nodes(&mut forge, 6);
    let normal = normal_patterns(&mut forge, normal);
    let anomaly = classes
        .iter()
        .map(|c| AnomalyPattern {
            class: c.to_string(),
            pattern: fresh_pattern(&mut forge, 10, 1, Vec::new()),
        })
        .collect();
    let spec = assemble(name, seed, node_names, normal, anomaly, anomaly_rate);
    spec.validate()?;
    Ok(spec)
}

/// Source and target domains with the same anomaly classes and disjoint
/// literal vocabularies.
///
/// Each class has [`ANOMALY_VARIANTS`] templates per domain that all carry
/// the class's shared stems, inflected differently (`-ed` on the source side,
/// `-ing` on the target side), so only a stemming embedder sees the link.
/// The target's normal templates pair up with source ones the same way. The
/// source also gets [`SOURCE_EXTRA_NORMAL`] unpaired normal templates.
pub fn paired_domains(
    shared_classes: &[&str],
    seeds: (u64, u64),
    anomaly_rate: f64,
) -> Result<(DomainSpec, DomainSpec)> {
    if shared_classes.len() < 2 {
        return Err(Error::config("paired domains need at least 2 shared anomaly classes"));
    }
    check_classes(shared_classes)?;
    let mut forge = WordForge::new(derive_seed(seeds.0, &format!("synth.pair.{}", seeds.1)));
    const ANOMALY_LITERALS: usize = 10;
    let shared_stems = |forge: &mut WordForge, literals: usize| -> Vec<String> {
        let k = (SHARED_STEM_FRACTION * literals as f64).ceil() as usize;
        (0..k).map(|_| forge.word()).collect()
    };
    let anomaly_stems: Vec<Vec<String>> = shared_classes
        .iter()
        .map(|_| shared_stems(&mut forge, ANOMALY_LITERALS))
        .collect();
    let normal_stems: Vec<(usize, Vec<String>)> = (0..PAIRED_NORMAL)
        .map(|_| {
            let lits = forge.rng.random_range(5..=8usize);
            (lits, shared_stems(&mut forge, lits))
        })
        .collect();
    let mut build = |name: &str, seed: u64, suffix: &str, extra_normal: usize| {
        let inflect = |stems: &[String]| stems.iter().map(|s| format!("{s}{suffix}")).collect::<Vec<_>>();
        let node_names = nodes(&mut forge, 6);
        let mut normal: Vec<Pattern> = normal_stems
            .iter()
            .map(|(lits, stems)| fresh_pattern(&mut forge, *lits, 1, inflect(stems)))
            .collect();
        normal.extend(normal_patterns(&mut forge, extra_normal));
        let mut anomaly = Vec::new();
        for (c, stems) in shared_classes.iter().zip(&anomaly_stems) {
            for _ in 0..ANOMALY_VARIANTS {
                anomaly.push(AnomalyPattern {
                    class: c.to_string(),
                    pattern: fresh_pattern(&mut forge, ANOMALY_LITERALS, 1, inflect(stems)),
                });
            }
        }
        assemble(name, seed, node_names, normal, anomaly, anomaly_rate)
    };
    let source = build("source", seeds.0, "ed", SOURCE_EXTRA_NORMAL);
    let target = build("target", seeds.1, "ing", 0);
    source.validate()?;
    target.validate()?;
    Ok((source, target))
}
