// SPDX-License-Identifier: Apache-2.0

//! Experiment presets on paired synthetic domains: the three-arm transfer
//! comparison and the low-resource sweep.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{count_params, Mode};
use crate::parallel::Parallelism;
use crate::pipeline::DomainData;
use crate::seed::derive_seed;
use crate::session::write_jsonl;
use crate::synth::{generate, paired_domains, DomainSpec};
use crate::train::{
    adapter_tune, evaluate_model, fine_tune, pretrain, subsample, train_from_scratch, RunMetrics, TrainConfig,
};

/// Dev F1 the convergence table measures time to.
pub const CONVERGENCE_F1: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub mode: Mode,
    pub trainable_params: usize,
    pub expected_params: usize,
    pub steps_to_f1: Option<u64>,
    pub best_dev_f1: f64,
    pub final_dev_f1: Option<f64>,
    pub test: EvalReport,
    pub steps: u64,
    pub data_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub data_hash: String,
    pub trainable_params: usize,
    pub steps_to_f1: Option<u64>,
    pub best_dev_f1: f64,
    pub final_dev_f1: Option<f64>,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub seed: u64,
    pub convergence_f1: f64,
    pub source: SourceReport,
    pub arms: Vec<ArmReport>,
    /// Adapter over fine-tune trainable parameters.
    pub adapter_param_ratio: f64,
}

impl TransferReport {
    pub fn arm(&self, mode: Mode) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.mode == mode)
    }

    /// Plain-text convergence table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "source: best dev F1 {:.4}, steps to {:.2}: {}\n{:<9} {:>10} {:>10} {:>9} {:>9}\n",
            self.source.best_dev_f1,
            self.convergence_f1,
            fmt_steps(self.source.steps_to_f1),
            "arm",
            "trainable",
            "steps",
            "dev F1",
            "test F1"
        );
        for a in &self.arms {
            s.push_str(&format!(
                "{:<9} {:>10} {:>10} {:>9.4} {:>9.4}\n",
                a.mode.as_str(),
                a.trainable_params,
                fmt_steps(a.steps_to_f1),
                a.final_dev_f1.unwrap_or(0.0),
                a.test.f1
            ));
        }
        s
    }
}

fn fmt_steps(s: Option<u64>) -> String {
    s.map_or_else(|| "never".to_string(), |s| s.to_string())
}

/// Synthetic source and target specs for `cfg`.
pub fn synthetic_pair(cfg: &PipelineConfig) -> Result<(DomainSpec, DomainSpec)> {
    let classes: Vec<&str> = cfg.synth.classes.iter().map(String::as_str).collect();
    paired_domains(
        &classes,
        (
            derive_seed(cfg.seed, "synth.source"),
            derive_seed(cfg.seed, "synth.target"),
        ),
        cfg.synth.anomaly_rate,
    )
}

pub fn synthetic_domain(spec: &DomainSpec, lines: usize, cfg: &PipelineConfig) -> Result<DomainData> {
    let corpus = generate(spec, lines)?;
    DomainData::from_lines(&spec.name, &corpus.lines, cfg)
}

fn write_run(dir: &Path, ck: &Checkpoint, metrics: &RunMetrics) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ck.save(&dir.join("model.ckpt"))?;
    let path = dir.join("metrics.jsonl");
    std::fs::write(&path, metrics.jsonl()).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretrains on the source domain, then runs scratch, fine-tune and adapter
/// arms on the target domain with the same training seed and learning rate.
///
/// With `out`, writes `config.json`, `report.json`, `timing.json` and one
/// sub-directory per run holding `model.ckpt` and `metrics.jsonl`.
pub fn experiment_transfer(
    cfg: &PipelineConfig,
    source: &DomainData,
    target: &DomainData,
    out: Option<&Path>,
    parallel_arms: bool,
) -> Result<TransferReport> {
    cfg.validate()?;
    let started = Instant::now();
    if let Some(dir) = out {
        cfg.echo(dir)?;
    }
    let (backbone, pre) = pretrain(&source.train, &source.dev, &cfg.model, &cfg.train)?;
    let pre_seconds = started.elapsed().as_secs_f64();
    let (pre_test, _) = evaluate_model(&backbone.model, &source.test, &cfg.train)?;
    let source_report = SourceReport {
        data_hash: source.hash(),
        trainable_params: pre.trainable_params,
        steps_to_f1: pre.steps_to_f1(CONVERGENCE_F1),
        best_dev_f1: pre.best_f1(),
        final_dev_f1: pre.final_f1(),
        test: pre_test,
    };
    if let Some(dir) = out {
        write_run(&dir.join("pretrain"), &backbone, &pre)?;
    }

    let target_hash = target.hash();
    let arm_par = if parallel_arms {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    };
    let runs = arm_par.map(&Mode::ALL, |_, &mode| {
        let t = Instant::now();
        let r = match mode {
            Mode::Scratch => train_from_scratch(&target.train, &target.dev, &cfg.model, &cfg.train),
            Mode::Finetune => fine_tune(&backbone, &cfg.model, &target.train, &target.dev, &cfg.train),
            Mode::Adapter => adapter_tune(&backbone, &cfg.model, &target.train, &target.dev, &cfg.train),
        };
        r.map(|r| (r, t.elapsed().as_secs_f64()))
    });
    let mut arms = Vec::new();
    let mut timing = serde_json::Map::new();
    timing.insert("pretrain_seconds".into(), pre_seconds.into());
    for (mode, run) in Mode::ALL.iter().zip(runs) {
        let ((ck, metrics), seconds) = run?;
        let (test, _) = evaluate_model(&ck.model, &target.test, &cfg.train)?;
        if let Some(dir) = out {
            write_run(&dir.join(mode.as_str()), &ck, &metrics)?;
        }
        timing.insert(format!("{mode}_seconds"), seconds.into());
        arms.push(ArmReport {
            mode: *mode,
            trainable_params: metrics.trainable_params,
            expected_params: count_params(&cfg.model, *mode),
            steps_to_f1: metrics.steps_to_f1(CONVERGENCE_F1),
            best_dev_f1: metrics.best_f1(),
            final_dev_f1: metrics.final_f1(),
            test,
            steps: metrics.steps(),
            data_hash: target_hash.clone(),
        });
    }
    let count = |m: Mode| arms.iter().find(|a| a.mode == m).map_or(0, |a| a.trainable_params) as f64;
    let report = TransferReport {
        seed: cfg.seed,
        convergence_f1: CONVERGENCE_F1,
        source: source_report,
        adapter_param_ratio: count(Mode::Adapter) / count(Mode::Finetune),
        arms,
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
        let path = dir.join("report.txt");
        std::fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join("timing.json"), &timing)?;
    }
    Ok(report)
}

/// Generates the synthetic pair for `cfg` and runs [`experiment_transfer`].
pub fn experiment_transfer_synthetic(
    cfg: &PipelineConfig,
    out: Option<&Path>,
    parallel_arms: bool,
) -> Result<TransferReport> {
    let (s, t) = synthetic_pair(cfg)?;
    let source = synthetic_domain(&s, cfg.synth.source_lines, cfg)?;
    let target = synthetic_domain(&t, cfg.synth.target_lines, cfg)?;
    experiment_transfer(cfg, &source, &target, out, parallel_arms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowResourceRun {
    pub size: usize,
    pub repeat: usize,
    pub mode: Mode,
    pub anomalous: usize,
    pub test_f1: f64,
    pub test_precision: f64,
    pub test_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowResourceRow {
    pub size: usize,
    pub mode: Mode,
    pub runs: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowResourceReport {
    pub runs: Vec<LowResourceRun>,
    pub rows: Vec<LowResourceRow>,
}

impl LowResourceReport {
    pub fn row(&self, size: usize, mode: Mode) -> Option<&LowResourceRow> {
        self.rows.iter().find(|r| r.size == size && r.mode == mode)
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["size", "mode", "runs", "mean_f1", "std_f1"])
            .expect("in-memory");
        for r in &self.rows {
            w.write_record([
                r.size.to_string(),
                r.mode.to_string(),
                r.runs.to_string(),
                format!("{:.6}", r.mean_f1),
                format!("{:.6}", r.std_f1),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every mode on `repeats` subsamples of each size of the target
/// training split and scores them on the target test split.
///
/// The backbone is pretrained once; every run uses fixed epochs.
#[allow(clippy::too_many_arguments)]
pub fn experiment_lowresource(
    cfg: &PipelineConfig,
    source: &DomainData,
    target: &DomainData,
    sizes: &[usize],
    repeats: usize,
    modes: &[Mode],
    out: Option<&Path>,
    parallel_arms: bool,
) -> Result<LowResourceReport> {
    cfg.validate()?;
    if repeats == 0 || sizes.is_empty() || modes.is_empty() {
        return Err(Error::config("lowresource needs sizes, modes and repeats >= 1"));
    }
    if let Some(dir) = out {
        cfg.echo(dir)?;
    }
    let needs_backbone = modes.iter().any(|m| *m != Mode::Scratch);
    let backbone = if needs_backbone {
        Some(pretrain(&source.train, &source.dev, &cfg.model, &cfg.train)?.0)
    } else {
        None
    };
    let tcfg = TrainConfig {
        epochs: cfg.synth.lowresource_epochs,
        early_stop_patience: None,
        // Scored on test only; dev is checked once, at the last step.
        eval_every: usize::MAX,
        ..cfg.train.clone()
    };
    let mut jobs = Vec::new();
    for &size in sizes {
        for repeat in 0..repeats {
            for &mode in modes {
                jobs.push((size, repeat, mode));
            }
        }
    }
    let par = if parallel_arms {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    };
    let results = par.map(&jobs, |_, &(size, repeat, mode)| -> Result<LowResourceRun> {
        let sample_seed = derive_seed(cfg.seed, &format!("lowresource.{size}.{repeat}"));
        let sub = subsample(&target.splits.train, size, sample_seed)?;
        let train = crate::embed::materialize_all(&sub.sessions, &target.table, cfg.model.seq_len)?;
        let run_cfg = TrainConfig {
            seed: derive_seed(tcfg.seed, &format!("lowresource.{repeat}")),
            ..tcfg.clone()
        };
        let ck = match mode {
            Mode::Scratch => train_from_scratch(&train, &target.dev, &cfg.model, &run_cfg)?.0,
            Mode::Finetune => {
                fine_tune(
                    backbone.as_ref().expect("pretrained"),
                    &cfg.model,
                    &train,
                    &target.dev,
                    &run_cfg,
                )?
                .0
            }
            Mode::Adapter => {
                adapter_tune(
                    backbone.as_ref().expect("pretrained"),
                    &cfg.model,
                    &train,
                    &target.dev,
                    &run_cfg,
                )?
                .0
            }
        };
        let (test, _) = evaluate_model(&ck.model, &target.test, &run_cfg)?;
        Ok(LowResourceRun {
            size,
            repeat,
            mode,
            anomalous: sub.anomalous,
            test_f1: test.f1,
            test_precision: test.precision,
            test_recall: test.recall,
        })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &size in sizes {
        for &mode in modes {
            let f1s: Vec<f64> = runs
                .iter()
                .filter(|r| r.size == size && r.mode == mode)
                .map(|r| r.test_f1)
                .collect();
            let (mean_f1, std_f1) = mean_std(&f1s);
            rows.push(LowResourceRow {
                size,
                mode,
                runs: f1s.len(),
                mean_f1,
                std_f1,
            });
        }
    }
    let report = LowResourceReport { runs, rows };
    if let Some(dir) = out {
        let path = dir.join("lowresource.csv");
        std::fs::write(&path, report.csv()).map_err(|e| Error::io(&path, e))?;
        write_jsonl(&dir.join("runs.jsonl"), &report.runs)?;
    }
    Ok(report)
}

/// Generates the synthetic pair (with the larger target corpus) and runs
/// [`experiment_lowresource`].
pub fn experiment_lowresource_synthetic(
    cfg: &PipelineConfig,
    sizes: &[usize],
    repeats: usize,
    modes: &[Mode],
    out: Option<&Path>,
    parallel_arms: bool,
) -> Result<LowResourceReport> {
    let (s, t) = synthetic_pair(cfg)?;
    let source = synthetic_domain(&s, cfg.synth.source_lines, cfg)?;
    let target = synthetic_domain(&t, cfg.synth.lowresource_target_lines, cfg)?;
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest > target.splits.train.len() {
        return Err(Error::config(format!(
            "size {largest} exceeds the {} target training sessions; raise synth.lowresource_target_lines",
            target.splits.train.len()
        )));
    }
    experiment_lowresource(cfg, &source, &target, sizes, repeats, modes, out, parallel_arms)
}
