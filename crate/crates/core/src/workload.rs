//! Workload traces: synthetic generation (Gamma arrival processes with
//! power-law adapter popularity and uniform lengths) and ingestion of real
//! request logs by downsampling.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("raw log has {available} usable entries, need {needed}")]
    InsufficientLog { needed: usize, available: usize },
    #[error("bad trace file: {0}")]
    BadTraceFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_adapters: usize,
    pub alpha: f64,
    /// Total request rate across all adapters, requests per second.
    pub total_rate: f64,
    /// Coefficient of variation of inter-arrival gaps; 1 is Poisson.
    pub cv: f64,
    pub input_range: (u32, u32),
    pub output_range: (u32, u32),
    /// Trace duration in seconds.
    pub duration: f64,
    pub seed: u64,
    /// Adapter ranks assigned round-robin by adapter index.
    pub rank_list: Vec<usize>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_adapters: 200,
            alpha: 1.0,
            total_rate: 2.0,
            cv: 1.0,
            input_range: (8, 512),
            output_range: (8, 512),
            duration: 300.0,
            seed: 0,
            rank_list: vec![64, 32, 16, 8],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidConfig(m.into()));
        if self.n_adapters == 0 {
            return bad("n_adapters must be >= 1");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.total_rate > 0.0) {
            return bad("total_rate must be > 0");
        }
        if !(self.cv > 0.0) {
            return bad("cv must be > 0");
        }
        if self.input_range.0 > self.input_range.1 || self.input_range.0 == 0 {
            return bad("input_range must be a nonempty range with lower >= 1");
        }
        if self.output_range.0 > self.output_range.1 || self.output_range.0 == 0 {
            return bad("output_range must be a nonempty range with lower >= 1");
        }
        if !(self.duration > 0.0) {
            return bad("duration must be > 0");
        }
        if self.rank_list.is_empty() {
            return bad("rank_list must be nonempty");
        }
        Ok(())
    }
}

/// One timed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub arrival_time: f64,
    pub adapter_id: u64,
    pub input_len: u32,
    pub output_len: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic(SyntheticConfig),
    Real { source: String, rate: f64, duration: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub version: u32,
    pub n_adapters: usize,
    pub rank_list: Vec<usize>,
    pub source: TraceSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn rank_for_adapter(&self, adapter_id: u64) -> usize {
        self.meta.rank_list[adapter_id as usize % self.meta.rank_list.len()]
    }

    /// Header line with the metadata record, then one
    /// `time_s,adapter_id,input_len,output_len` entry per line.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), WorkloadError> {
        let header = serde_json::to_string(&self.meta)
            .map_err(|e| WorkloadError::BadTraceFile(e.to_string()))?;
        writeln!(w, "{header}")?;
        for e in &self.entries {
            writeln!(w, "{:.6},{},{},{}", e.arrival_time, e.adapter_id, e.input_len, e.output_len)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, WorkloadError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| WorkloadError::BadTraceFile("empty file".into()))??;
        let meta: TraceMeta = serde_json::from_str(&header)
            .map_err(|e| WorkloadError::BadTraceFile(format!("bad header: {e}")))?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse_err =
                |what: &str| WorkloadError::BadTraceFile(format!("line {}: bad {what}", i + 2));
            let arrival_time: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err("time"))?;
            let adapter_id: u64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err("adapter id"))?;
            let input_len: u32 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err("input len"))?;
            let output_len: u32 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err("output len"))?;
            entries.push(TraceEntry { arrival_time, adapter_id, input_len, output_len });
        }
        Ok(Trace { meta, entries })
    }
}

/// Per-adapter rates proportional to (i+1)^(-alpha), normalized so the sum is
/// exactly `total_rate`.
pub fn power_law_rates(n: usize, alpha: f64, total_rate: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-alpha)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / sum * total_rate).collect()
}

/// Arrival times on [0, duration) with i.i.d. Gamma inter-arrival gaps of
/// mean 1/lambda and coefficient of variation `cv` (shape 1/cv^2, scale
/// cv^2/lambda). cv = 1 degenerates to a Poisson process.
pub fn gamma_arrivals(lambda: f64, cv: f64, duration: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gamma_arrivals_with(lambda, cv, duration, &mut rng)
}

pub fn gamma_arrivals_with(
    lambda: f64,
    cv: f64,
    duration: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(lambda > 0.0 && cv > 0.0 && duration > 0.0);
    let shape = 1.0 / (cv * cv);
    let scale = cv * cv / lambda;
    let gamma = Gamma::new(shape, scale).expect("valid gamma parameters");
    let mut times = Vec::new();
    let mut t = gamma.sample(rng);
    while t < duration {
        times.push(t);
        t += gamma.sample(rng);
    }
    times
}

/// Generate a synthetic trace: one Gamma arrival stream per adapter, merged
/// and sorted, with uniform input/output lengths drawn per request.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Trace, WorkloadError> {
    config.validate()?;
    let rates = power_law_rates(config.n_adapters, config.alpha, config.total_rate);
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for (i, &lambda) in rates.iter().enumerate() {
        let stream_seed = master.gen::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        if lambda <= 0.0 {
            continue;
        }
        for t in gamma_arrivals_with(lambda, config.cv, config.duration, &mut rng) {
            let input_len = rng.gen_range(config.input_range.0..=config.input_range.1);
            let output_len = rng.gen_range(config.output_range.0..=config.output_range.1);
            entries.push(TraceEntry { arrival_time: t, adapter_id: i as u64, input_len, output_len });
        }
    }
    entries.sort_by(|a, b| {
        a.arrival_time
            .partial_cmp(&b.arrival_time)
            .unwrap()
            .then(a.adapter_id.cmp(&b.adapter_id))
    });
    Ok(Trace {
        meta: TraceMeta {
            version: 1,
            n_adapters: config.n_adapters,
            rank_list: config.rank_list.clone(),
            source: TraceSource::Synthetic(config.clone()),
        },
        entries,
    })
}

/// A raw production log line: timestamp, model name, input/output lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLogEntry {
    pub timestamp: f64,
    pub model: String,
    pub input_len: u32,
    pub output_len: u32,
}

/// Parse a delimited `timestamp,model_name,input_len,output_len` log.
pub fn parse_raw_log(r: impl BufRead) -> Result<Vec<RawLogEntry>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(WorkloadError::BadTraceFile(format!("raw log line {}: want 4 fields", i + 1)));
        }
        let bad = |what: &str| WorkloadError::BadTraceFile(format!("raw log line {}: bad {what}", i + 1));
        out.push(RawLogEntry {
            timestamp: parts[0].parse().map_err(|_| bad("timestamp"))?,
            model: parts[1].to_string(),
            input_len: parts[2].parse().map_err(|_| bad("input len"))?,
            output_len: parts[3].parse().map_err(|_| bad("output len"))?,
        });
    }
    Ok(out)
}

/// Downsample a raw log to a trace of `rate * duration` requests: a uniform
/// sample without replacement, timestamps affinely rescaled onto [0, duration],
/// with distinct model names mapped to adapter ids.
pub fn downsample_real(
    raw_log: &[RawLogEntry],
    rate: f64,
    duration: f64,
    rank_list: &[usize],
    seed: u64,
) -> Result<Trace, WorkloadError> {
    let needed = (rate * duration).round() as usize;
    if raw_log.len() < needed || needed == 0 {
        return Err(WorkloadError::InsufficientLog { needed, available: raw_log.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..raw_log.len()).collect();
    // Partial Fisher-Yates: the first `needed` slots are the sample.
    for i in 0..needed {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut sample: Vec<&RawLogEntry> = indices[..needed].iter().map(|&i| &raw_log[i]).collect();
    sample.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());

    let t_min = sample.first().map(|e| e.timestamp).unwrap_or(0.0);
    let t_max = sample.last().map(|e| e.timestamp).unwrap_or(0.0);
    let span = t_max - t_min;

    // Model names become adapter ids in sorted-name order.
    let mut names: Vec<&str> = sample.iter().map(|e| e.model.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let adapter_of = |m: &str| names.binary_search(&m).unwrap() as u64;

    let entries = sample
        .iter()
        .map(|e| TraceEntry {
            arrival_time: if span > 0.0 { (e.timestamp - t_min) / span * duration } else { 0.0 },
            adapter_id: adapter_of(&e.model),
            input_len: e.input_len,
            output_len: e.output_len,
        })
        .collect();
    Ok(Trace {
        meta: TraceMeta {
            version: 1,
            n_adapters: names.len(),
            rank_list: rank_list.to_vec(),
            source: TraceSource::Real {
                source: "raw-log".into(),
                rate,
                duration,
                seed,
            },
        },
        entries,
    })
}

/// Empirical mean and coefficient of variation of inter-arrival gaps.
pub fn gap_stats(times: &[f64]) -> Option<(f64, f64)> {
    if times.len() < 2 {
        return None;
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
    Some((mean, var.sqrt() / mean))
}
