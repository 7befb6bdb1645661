//! Batched evaluation: episode-averaged accuracy with a 95% confidence
//! interval, paired parameter sweeps, and report serialization.
//!
//! Episode `i` of a run draws from `ChaCha8Rng(seed)` on stream `i`, so
//! episodes are independent of each other and of how work is scheduled:
//! the evaluator fans out over a thread pool and collects results in index
//! order, producing bit-identical reports at any thread count. Sweeps reuse
//! one seed across all points, which pairs the episode sequences and lets
//! small runs resolve small accuracy differences.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{sample_episode, EmbeddingDataset, Episode};
use crate::error::{Error, Result};
use crate::pcp::{pcp_run, AblationMode, PcpConfig};
use crate::simnet::SimilarityNet;

/// Full evaluation protocol: episode shape, run count, seed, and the
/// purification parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub pcp: PcpConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 10_000,
            seed: 0,
            pcp: PcpConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 || self.queries == 0 {
            return Err(Error::Config(
                "ways, shots, and queries must all be at least 1".into(),
            ));
        }
        if self.episodes == 0 {
            return Err(Error::Config("need at least 1 episode".into()));
        }
        self.pcp.validate()
    }
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "prediction/truth length mismatch");
    assert!(!predicted.is_empty(), "accuracy of an empty prediction set");
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    correct as f64 / predicted.len() as f64
}

/// Mean and half-width of the normal-approximation 95% interval:
/// `1.96 · sample_std / √n` with the n−1 denominator in the standard
/// deviation. A single value has zero width.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "statistics of an empty sample");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Order-independent digest of an episode's exact contents (labels and
/// embedding bits in sampling order), used to verify that sweep points see
/// identical episode sequences.
pub fn episode_fingerprint(episode: &Episode) -> u64 {
    // FNV-1a, 64-bit.
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    };
    eat(&(episode.ways() as u64).to_le_bytes());
    eat(&(episode.shots() as u64).to_le_bytes());
    eat(&(episode.queries_per_class() as u64).to_le_bytes());
    for label in episode.class_map().labels() {
        eat(label.as_bytes());
    }
    for sample in episode.support().iter().chain(episode.query()) {
        eat(sample.label.as_bytes());
        for v in sample.embedding.values() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    hash
}

/// Outcome of one evaluation run. The summary statistics are serialized to
/// JSON; the per-episode vectors stay in memory for paired analyses and the
/// optional CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    mean: f64,
    ci95: f64,
    seed: u64,
    config: EvalConfig,
    per_episode: Vec<f64>,
    fingerprints: Vec<u64>,
}

/// The JSON face of a report: everything except the per-episode vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mean: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub seed: u64,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn ci95(&self) -> f64 {
        self.ci95
    }

    pub fn n_episodes(&self) -> usize {
        self.per_episode.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &EvalConfig {
        &self.config
    }

    pub fn per_episode(&self) -> &[f64] {
        &self.per_episode
    }

    pub fn fingerprints(&self) -> &[u64] {
        &self.fingerprints
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            mean: self.mean,
            ci95: self.ci95,
            n_episodes: self.per_episode.len(),
            seed: self.seed,
            config: self.config.clone(),
        }
    }

    /// Pretty JSON of the summary, trailing newline included.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(&self.summary())?;
        text.push('\n');
        Ok(text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// `episode,accuracy` CSV with a header row.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, acc) in self.per_episode.iter().enumerate() {
            out.push_str(&format!("{i},{acc}\n"));
        }
        out
    }

    pub fn write_episodes_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.episodes_csv())?;
        Ok(())
    }
}

/// Parses a report summary written by [`EvalReport::write_json`].
pub fn read_report_summary(path: &Path) -> Result<ReportSummary> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

/// Parses a per-episode CSV written by [`EvalReport::write_episodes_csv`].
pub fn read_episodes_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            continue; // header
        }
        let acc = line
            .split(',')
            .nth(1)
            .and_then(|f| f.parse::<f64>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("malformed CSV row \"{line}\""),
            })?;
        out.push(acc);
    }
    Ok(out)
}

/// Runs the full protocol: `config.episodes` independent episodes, each
/// purified and scored, statistics over the per-episode accuracies.
///
/// Episode `i` uses RNG stream `i` of the seed, so results are independent
/// of evaluation order and thread count.
pub fn evaluate(
    dataset: &EmbeddingDataset,
    classifier: &SimilarityNet,
    relation: &SimilarityNet,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let outcomes: Vec<(f64, u64)> = (0..config.episodes)
        .into_par_iter()
        .map(|i| -> Result<(f64, u64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let episode = sample_episode(dataset, config.ways, config.shots, config.queries, &mut rng)?;
            let run = pcp_run(&episode, classifier, relation, &config.pcp)?;
            let truth = episode.query_local_labels();
            Ok((
                accuracy(run.predictions(), &truth),
                episode_fingerprint(&episode),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_episode: Vec<f64> = outcomes.iter().map(|(a, _)| *a).collect();
    let fingerprints: Vec<u64> = outcomes.iter().map(|(_, f)| *f).collect();
    let (mean, ci95) = mean_and_ci95(&per_episode);
    Ok(EvalReport {
        mean,
        ci95,
        seed: config.seed,
        config: config.clone(),
        per_episode,
        fingerprints,
    })
}

/// The swept axis and its values. Numeric axes must be strictly increasing;
/// the ablation axis must not repeat a mode.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepValues {
    Iterations(Vec<usize>),
    TopL(Vec<usize>),
    Lambda(Vec<f64>),
    Ablation(Vec<AblationMode>),
}

impl SweepValues {
    pub fn axis_name(&self) -> &'static str {
        match self {
            SweepValues::Iterations(_) => "iterations",
            SweepValues::TopL(_) => "top_l",
            SweepValues::Lambda(_) => "lambda",
            SweepValues::Ablation(_) => "ablation",
        }
    }

    fn validate(&self) -> Result<()> {
        fn strictly_increasing<T: PartialOrd>(values: &[T]) -> bool {
            values.windows(2).all(|w| w[0] < w[1])
        }
        let ok = match self {
            SweepValues::Iterations(v) => !v.is_empty() && strictly_increasing(v),
            SweepValues::TopL(v) => !v.is_empty() && strictly_increasing(v),
            SweepValues::Lambda(v) => {
                !v.is_empty() && v.iter().all(|x| x.is_finite()) && strictly_increasing(v)
            }
            SweepValues::Ablation(v) => {
                !v.is_empty() && (1..v.len()).all(|i| !v[..i].contains(&v[i]))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "sweep values for axis \"{}\" must be non-empty, strictly ordered, and unique",
                self.axis_name()
            )))
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepValues::Iterations(v) => v.len(),
            SweepValues::TopL(v) => v.len(),
            SweepValues::Lambda(v) => v.len(),
            SweepValues::Ablation(v) => v.len(),
        }
    }

    /// The config for point `idx`, plus its axis-value label.
    fn apply(&self, idx: usize, base: &EvalConfig) -> (String, EvalConfig) {
        let mut config = base.clone();
        let label = match self {
            SweepValues::Iterations(v) => {
                config.pcp.iterations = v[idx];
                v[idx].to_string()
            }
            SweepValues::TopL(v) => {
                config.pcp.top_l = v[idx];
                v[idx].to_string()
            }
            SweepValues::Lambda(v) => {
                config.pcp.lambda = v[idx];
                v[idx].to_string()
            }
            SweepValues::Ablation(v) => {
                config.pcp.mode = v[idx];
                v[idx].name().to_string()
            }
        };
        (label, config)
    }
}

/// One sweep point: the axis value (as its CSV label) and the full report.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub report: EvalReport,
}

/// All points of one sweep, in axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    axis: String,
    points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn axis(&self) -> &str {
        &self.axis
    }

    pub fn points(&self) -> &[SweepPoint] {
        &self.points
    }

    /// `axis_value,mean,ci95` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,mean,ci95\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.value, p.report.mean(), p.report.ci95()));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Evaluates every value of one axis with a shared seed: all points see
/// identical episode sequences, so point-to-point differences are paired.
pub fn run_sweep(
    dataset: &EmbeddingDataset,
    classifier: &SimilarityNet,
    relation: &SimilarityNet,
    base: &EvalConfig,
    values: &SweepValues,
) -> Result<SweepReport> {
    values.validate()?;
    let mut points = Vec::with_capacity(values.len());
    for idx in 0..values.len() {
        let (label, config) = values.apply(idx, base);
        let report = evaluate(dataset, classifier, relation, &config)?;
        points.push(SweepPoint {
            value: label,
            report,
        });
    }
    Ok(SweepReport {
        axis: values.axis_name().to_string(),
        points,
    })
}
