//! Synthetic request traces and their on-disk format.
//!
//! A trace file starts with one `#` line of `key=value` metadata followed by
//! one `arrival_ms,prompt_tokens,output_tokens` row per request.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid generation parameter: {0}")]
    InvalidParams(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace arrival times decrease at record {0}")]
    Unordered(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthSpec {
    Fixed {
        prompt: u64,
        output: u64,
    },
    /// Log-normal in token count, rounded and clamped to `[1, max]`.
    LogNormal {
        prompt_mu: f64,
        prompt_sigma: f64,
        prompt_max: u64,
        output_mu: f64,
        output_sigma: f64,
        output_max: u64,
    },
}

impl Default for LengthSpec {
    /// Median prompt ~1.1K tokens and output ~150 tokens, with a long tail.
    fn default() -> Self {
        LengthSpec::LogNormal {
            prompt_mu: 7.0,
            prompt_sigma: 1.0,
            prompt_max: 16_384,
            output_mu: 5.0,
            output_sigma: 0.8,
            output_max: 2_048,
        }
    }
}

impl LengthSpec {
    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidParams(m.to_string()));
        match *self {
            LengthSpec::Fixed { prompt, output } => {
                if prompt == 0 || output == 0 {
                    return bad("fixed lengths must be >= 1");
                }
            }
            LengthSpec::LogNormal {
                prompt_mu,
                prompt_sigma,
                prompt_max,
                output_mu,
                output_sigma,
                output_max,
            } => {
                if !(prompt_mu.is_finite() && output_mu.is_finite()) {
                    return bad("log-normal mu must be finite");
                }
                if !(prompt_sigma >= 0.0 && output_sigma >= 0.0) {
                    return bad("log-normal sigma must be >= 0");
                }
                if prompt_max == 0 || output_max == 0 {
                    return bad("length caps must be >= 1");
                }
            }
        }
        Ok(())
    }

    fn describe(&self, meta: &mut BTreeMap<String, String>) {
        match *self {
            LengthSpec::Fixed { prompt, output } => {
                meta.insert("lengths".into(), "fixed".into());
                meta.insert("prompt".into(), prompt.to_string());
                meta.insert("output".into(), output.to_string());
            }
            LengthSpec::LogNormal {
                prompt_mu,
                prompt_sigma,
                prompt_max,
                output_mu,
                output_sigma,
                output_max,
            } => {
                meta.insert("lengths".into(), "lognormal".into());
                meta.insert("prompt_mu".into(), prompt_mu.to_string());
                meta.insert("prompt_sigma".into(), prompt_sigma.to_string());
                meta.insert("prompt_max".into(), prompt_max.to_string());
                meta.insert("output_mu".into(), output_mu.to_string());
                meta.insert("output_sigma".into(), output_sigma.to_string());
                meta.insert("output_max".into(), output_max.to_string());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    /// Requests per minute.
    pub rate: f64,
    pub cv: f64,
    pub count: usize,
    pub lengths: LengthSpec,
    /// Fraction of requests whose prompt is replaced by `long_prompt`.
    #[serde(default)]
    pub long_fraction: f64,
    #[serde(default)]
    pub long_prompt: u64,
}

impl GenParams {
    pub fn new(seed: u64, rate: f64, cv: f64, count: usize) -> Self {
        Self {
            seed,
            rate,
            cv,
            count,
            lengths: LengthSpec::default(),
            long_fraction: 0.0,
            long_prompt: 0,
        }
    }

    pub fn with_long_requests(mut self, fraction: f64, prompt_tokens: u64) -> Self {
        self.long_fraction = fraction;
        self.long_prompt = prompt_tokens;
        self
    }
}

fn draw_len<R: Rng>(dist: &LogNormal<f64>, max: u64, rng: &mut R) -> u64 {
    (dist.sample(rng).round() as u64).clamp(1, max)
}

pub fn generate(params: &GenParams) -> Result<Trace, WorkloadError> {
    if !(params.rate > 0.0 && params.rate.is_finite()) {
        return Err(WorkloadError::InvalidParams(format!("rate must be > 0, got {}", params.rate)));
    }
    if !(params.cv > 0.0 && params.cv.is_finite()) {
        return Err(WorkloadError::InvalidParams(format!("cv must be > 0, got {}", params.cv)));
    }
    params.lengths.validate()?;
    if !(0.0..=1.0).contains(&params.long_fraction) {
        return Err(WorkloadError::InvalidParams(format!(
            "long_fraction must be in [0, 1], got {}",
            params.long_fraction
        )));
    }
    if params.long_fraction > 0.0 && params.long_prompt == 0 {
        return Err(WorkloadError::InvalidParams("long_prompt must be >= 1".into()));
    }

    let mean = 60_000.0 / params.rate;
    let shape = 1.0 / (params.cv * params.cv);
    let gaps = Gamma::new(shape, mean / shape)
        .map_err(|e| WorkloadError::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let lognormals = match params.lengths {
        LengthSpec::LogNormal {
            prompt_mu,
            prompt_sigma,
            output_mu,
            output_sigma,
            ..
        } => Some((
            LogNormal::new(prompt_mu, prompt_sigma)
                .map_err(|e| WorkloadError::InvalidParams(e.to_string()))?,
            LogNormal::new(output_mu, output_sigma)
                .map_err(|e| WorkloadError::InvalidParams(e.to_string()))?,
        )),
        LengthSpec::Fixed { .. } => None,
    };

    let mut t = 0.0;
    let mut records = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        t += gaps.sample(&mut rng);
        let (mut prompt_tokens, output_tokens) = match (params.lengths, &lognormals) {
            (LengthSpec::Fixed { prompt, output }, _) => (prompt, output),
            (LengthSpec::LogNormal { prompt_max, output_max, .. }, Some((p, o))) => {
                (draw_len(p, prompt_max, &mut rng), draw_len(o, output_max, &mut rng))
            }
            _ => unreachable!(),
        };
        if params.long_fraction > 0.0 && rng.gen_bool(params.long_fraction) {
            prompt_tokens = params.long_prompt;
        }
        records.push(TraceRecord {
            arrival_ms: t,
            prompt_tokens,
            output_tokens,
        });
    }

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), params.seed.to_string());
    meta.insert("rate".into(), params.rate.to_string());
    meta.insert("cv".into(), params.cv.to_string());
    meta.insert("count".into(), params.count.to_string());
    params.lengths.describe(&mut meta);
    if params.long_fraction > 0.0 {
        meta.insert("long_fraction".into(), params.long_fraction.to_string());
        meta.insert("long_prompt".into(), params.long_prompt.to_string());
    }
    Ok(Trace { records, meta })
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (i, r) in self.records.iter().enumerate() {
            if !(r.arrival_ms.is_finite() && r.arrival_ms >= 0.0) {
                return Err(WorkloadError::Parse {
                    line: i + 2,
                    msg: format!("bad arrival time {}", r.arrival_ms),
                });
            }
            if r.prompt_tokens == 0 || r.output_tokens == 0 {
                return Err(WorkloadError::Parse {
                    line: i + 2,
                    msg: "token counts must be >= 1".into(),
                });
            }
            if i > 0 && r.arrival_ms < self.records[i - 1].arrival_ms {
                return Err(WorkloadError::Unordered(i));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse` inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::from("#");
        for (k, v) in &self.meta {
            write!(out, " {k}={v}").unwrap();
        }
        out.push('\n');
        for r in &self.records {
            writeln!(out, "{},{},{}", r.arrival_ms, r.prompt_tokens, r.output_tokens).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut meta = BTreeMap::new();
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('#') {
                for pair in rest.split_whitespace() {
                    let (k, v) = pair.split_once('=').ok_or_else(|| WorkloadError::Parse {
                        line,
                        msg: format!("metadata `{pair}` is not key=value"),
                    })?;
                    meta.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            let fields: Vec<&str> = s.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(WorkloadError::Parse {
                    line,
                    msg: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let arrival_ms: f64 = fields[0].parse().map_err(|_| WorkloadError::Parse {
                line,
                msg: format!("bad arrival time `{}`", fields[0]),
            })?;
            if !(arrival_ms.is_finite() && arrival_ms >= 0.0) {
                return Err(WorkloadError::Parse {
                    line,
                    msg: format!("arrival time must be finite and >= 0, got {arrival_ms}"),
                });
            }
            let count = |f: &str, what: &str| -> Result<u64, WorkloadError> {
                let v: i64 = f.parse().map_err(|_| WorkloadError::Parse {
                    line,
                    msg: format!("bad {what} `{f}`"),
                })?;
                if v < 1 {
                    return Err(WorkloadError::Parse {
                        line,
                        msg: format!("{what} must be >= 1, got {v}"),
                    });
                }
                Ok(v as u64)
            };
            let prompt_tokens = count(fields[1], "prompt_tokens")?;
            let output_tokens = count(fields[2], "output_tokens")?;
            if let Some(prev) = records.last().map(|r: &TraceRecord| r.arrival_ms) {
                if arrival_ms < prev {
                    return Err(WorkloadError::Parse {
                        line,
                        msg: format!("arrival time {arrival_ms} precedes {prev}"),
                    });
                }
            }
            records.push(TraceRecord {
                arrival_ms,
                prompt_tokens,
                output_tokens,
            });
        }
        Ok(Trace { records, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkloadError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn mean_prompt(&self) -> f64 {
        mean(self.records.iter().map(|r| r.prompt_tokens as f64))
    }

    pub fn mean_output(&self) -> f64 {
        mean(self.records.iter().map(|r| r.output_tokens as f64))
    }

    /// Requests per minute over the span from zero to the last arrival.
    pub fn realized_rate(&self) -> f64 {
        match self.records.last() {
            Some(r) if r.arrival_ms > 0.0 => self.records.len() as f64 * 60_000.0 / r.arrival_ms,
            _ => 0.0,
        }
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
