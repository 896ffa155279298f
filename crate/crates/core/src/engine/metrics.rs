//! Run log records and the metrics derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::types::RequestId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time_us: u64,
    pub kind: String,
    pub request_id: Option<RequestId>,
    pub payload: Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, time_us: u64, kind: &str, request_id: Option<RequestId>, payload: Value) {
        self.records.push(LogRecord {
            time_us,
            kind: kind.to_string(),
            request_id,
            payload,
        });
    }

    /// Newline-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(Self { records })
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// One `request_id,seq,generated_ms,delivered_ms,flushed` row per token.
    pub fn delivery_csv(&self) -> String {
        let mut out = String::from("request_id,seq,generated_ms,delivered_ms,flushed\n");
        for r in self.of_kind("token") {
            let tok = TokenRow::from_record(r);
            writeln!(
                out,
                "{},{},{},{},{}",
                tok.request,
                tok.seq,
                tok.generated_us as f64 / 1e3,
                tok.delivered_us as f64 / 1e3,
                tok.flushed
            )
            .unwrap();
        }
        out
    }
}

/// Token delivery as recorded in the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRow {
    pub request: RequestId,
    pub seq: u64,
    pub generated_us: u64,
    pub delivered_us: u64,
    pub flushed: bool,
}

impl TokenRow {
    pub fn from_record(r: &LogRecord) -> Self {
        Self {
            request: r.request_id.unwrap_or_default(),
            seq: r.payload["seq"].as_u64().unwrap_or_default(),
            generated_us: r.payload["generated_us"].as_u64().unwrap_or_default(),
            delivered_us: r.time_us,
            flushed: r.payload["flushed"].as_bool().unwrap_or(false),
        }
    }

    pub fn payload(seq: u64, generated_us: u64, flushed: bool) -> Value {
        json!({ "seq": seq, "generated_us": generated_us, "flushed": flushed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub output_tokens: u64,
    pub ttft_ms: Option<f64>,
    pub e2e_ms: Option<f64>,
    pub tpot_ms: Option<f64>,
    pub visible_violations: u64,
    pub backend_violations: u64,
    pub max_gap_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub tbt_target_ms: f64,
    pub tpot_target_ms: f64,
    pub requests_total: usize,
    pub requests_finished: usize,
    pub tokens_delivered: u64,
    pub tbt_attainment: f64,
    pub tpot_attainment: f64,
    pub tbt_p50_ms: f64,
    pub tbt_p95_ms: f64,
    pub tbt_p99_ms: f64,
    pub tpot_p50_ms: f64,
    pub tpot_p95_ms: f64,
    pub tpot_p99_ms: f64,
    pub throughput_rpm: f64,
    pub makespan_ms: f64,
    pub e2e_mean_ms: f64,
    pub e2e_p50_ms: f64,
    pub e2e_p99_ms: f64,
    pub ttft_mean_ms: f64,
    pub ttft_p50_ms: f64,
    pub ttft_p99_ms: f64,
    pub mean_gpu_utilization: f64,
    pub capacity_breaches: u64,
    pub decode_steps: u64,
    pub total_stall_ms: f64,
    pub visible_violations: u64,
    pub backend_violations: u64,
    pub pauses: u64,
    pub resumes: u64,
    pub preemptions: u64,
    pub replans: u64,
    pub per_request: Vec<RequestMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Nearest-rank percentile of an ascending slice; 0 for an empty one.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn ms(us: u64) -> f64 {
    us as f64 / 1e3
}

/// Tokens per request in sequence order.
pub fn tokens_by_request(log: &RunLog) -> BTreeMap<RequestId, Vec<TokenRow>> {
    let mut out: BTreeMap<RequestId, Vec<TokenRow>> = BTreeMap::new();
    for r in log.of_kind("token") {
        let t = TokenRow::from_record(r);
        out.entry(t.request).or_default().push(t);
    }
    for v in out.values_mut() {
        v.sort_by_key(|t| t.seq);
    }
    out
}

fn count_kind(log: &RunLog, kind: &str) -> u64 {
    log.of_kind(kind).count() as u64
}

pub fn collect_metrics(log: &RunLog) -> MetricsReport {
    let start = log.of_kind("run_start").next();
    let field = |k: &str| start.and_then(|s| s.payload[k].as_u64()).unwrap_or(0);
    let tbt_us = field("tbt_target_us");
    let tpot_us = field("tpot_target_us");
    let budget = field("gpu_block_budget");
    let policy = start
        .and_then(|s| s.payload["policy"].as_str())
        .unwrap_or("unknown")
        .to_string();

    let mut arrivals: BTreeMap<RequestId, u64> = BTreeMap::new();
    let mut targets: BTreeMap<RequestId, u64> = BTreeMap::new();
    for r in log.of_kind("arrival") {
        if let Some(id) = r.request_id {
            arrivals.insert(id, r.time_us);
            targets.insert(id, r.payload["output_tokens"].as_u64().unwrap_or(0));
        }
    }
    let finished: BTreeMap<RequestId, u64> = log
        .of_kind("finish")
        .filter_map(|r| r.request_id.map(|id| (id, r.time_us)))
        .collect();
    let tokens = tokens_by_request(log);

    let mut gaps = Vec::new();
    let mut tpots = Vec::new();
    let mut e2es = Vec::new();
    let mut ttfts = Vec::new();
    let mut per_request = Vec::new();
    let mut tokens_delivered = 0u64;
    let (mut visible_total, mut backend_total) = (0, 0);
    let mut tpot_ok = 0usize;
    let mut tpot_n = 0usize;
    let mut last_time = 0u64;

    for (&id, &arrival) in &arrivals {
        let toks = tokens.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        tokens_delivered += toks.len() as u64;
        let mut visible = 0;
        let mut backend = 0;
        let mut max_gap = 0u64;
        for w in toks.windows(2) {
            let gap = w[1].delivered_us - w[0].delivered_us;
            gaps.push(ms(gap));
            max_gap = max_gap.max(gap);
            if gap > tbt_us {
                visible += 1;
            }
            if w[1].generated_us - w[0].generated_us > tbt_us {
                backend += 1;
            }
        }
        let ttft = toks.first().map(|t| ms(t.delivered_us - arrival));
        let last_delivery = toks.iter().map(|t| t.delivered_us).max();
        let e2e = finished
            .get(&id)
            .and(last_delivery)
            .map(|d| ms(d - arrival));
        let tpot = (toks.len() >= 2).then(|| {
            ms(toks[toks.len() - 1].delivered_us - toks[0].delivered_us) / (toks.len() - 1) as f64
        });
        if finished.contains_key(&id) {
            tpot_n += 1;
            if tpot.is_none_or(|t| t <= ms(tpot_us)) {
                tpot_ok += 1;
            }
        }
        if let Some(t) = tpot {
            tpots.push(t);
        }
        if let Some(v) = ttft {
            ttfts.push(v);
        }
        if let Some(v) = e2e {
            e2es.push(v);
        }
        visible_total += visible;
        backend_total += backend;
        per_request.push(RequestMetrics {
            id,
            arrival_ms: ms(arrival),
            output_tokens: targets.get(&id).copied().unwrap_or(0),
            ttft_ms: ttft,
            e2e_ms: e2e,
            tpot_ms: tpot,
            visible_violations: visible,
            backend_violations: backend,
            max_gap_ms: ms(max_gap),
        });
        last_time = last_time.max(last_delivery.unwrap_or(0));
    }
    for r in &log.records {
        last_time = last_time.max(r.time_us);
    }

    let mut util_weighted = 0.0;
    let mut util_time = 0u64;
    let mut breaches = 0;
    let mut steps = 0;
    let mut stall_us = 0u64;
    for r in log.of_kind("decode_step") {
        let dur = r.payload["duration_us"].as_u64().unwrap_or(0);
        let usage = r.payload["usage_blocks"].as_u64().unwrap_or(0);
        stall_us += r.payload["stall_us"].as_u64().unwrap_or(0);
        steps += 1;
        if usage > budget {
            breaches += 1;
        }
        if budget > 0 {
            util_weighted += usage as f64 / budget as f64 * dur as f64;
        }
        util_time += dur;
    }

    let within = gaps.iter().filter(|&&g| g <= ms(tbt_us)).count();
    let tbt_attainment = if gaps.is_empty() {
        1.0
    } else {
        within as f64 / gaps.len() as f64
    };
    let tpot_attainment = if tpot_n == 0 {
        1.0
    } else {
        tpot_ok as f64 / tpot_n as f64
    };
    let gaps = sorted(gaps);
    let tpots = sorted(tpots);
    let e2e_sorted = sorted(e2es.clone());
    let ttft_sorted = sorted(ttfts.clone());
    let makespan_ms = ms(last_time);

    MetricsReport {
        policy,
        tbt_target_ms: ms(tbt_us),
        tpot_target_ms: ms(tpot_us),
        requests_total: arrivals.len(),
        requests_finished: finished.len(),
        tokens_delivered,
        tbt_attainment,
        tpot_attainment,
        tbt_p50_ms: percentile(&gaps, 50.0),
        tbt_p95_ms: percentile(&gaps, 95.0),
        tbt_p99_ms: percentile(&gaps, 99.0),
        tpot_p50_ms: percentile(&tpots, 50.0),
        tpot_p95_ms: percentile(&tpots, 95.0),
        tpot_p99_ms: percentile(&tpots, 99.0),
        throughput_rpm: if makespan_ms > 0.0 {
            finished.len() as f64 / (makespan_ms / 60_000.0)
        } else {
            0.0
        },
        makespan_ms,
        e2e_mean_ms: mean(&e2es),
        e2e_p50_ms: percentile(&e2e_sorted, 50.0),
        e2e_p99_ms: percentile(&e2e_sorted, 99.0),
        ttft_mean_ms: mean(&ttfts),
        ttft_p50_ms: percentile(&ttft_sorted, 50.0),
        ttft_p99_ms: percentile(&ttft_sorted, 99.0),
        mean_gpu_utilization: if util_time > 0 {
            util_weighted / util_time as f64
        } else {
            0.0
        },
        capacity_breaches: breaches,
        decode_steps: steps,
        total_stall_ms: ms(stall_us),
        visible_violations: visible_total,
        backend_violations: backend_total,
        pauses: count_kind(log, "pause"),
        resumes: count_kind(log, "resume"),
        preemptions: count_kind(log, "preempt"),
        replans: count_kind(log, "plan"),
        per_request,
    }
}

/// Token-deposit invariants checked over a whole run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositAudit {
    /// Requests with more visible than backend violations.
    pub masking_failures: Vec<RequestId>,
    /// Held tokens whose delivery gap differs from the TBT target.
    pub pacing_failures: u64,
    /// Finished requests whose delivered count differs from the target.
    pub conservation_failures: Vec<RequestId>,
    /// Tokens delivered out of order or before being generated.
    pub order_failures: u64,
}

impl DepositAudit {
    pub fn is_clean(&self) -> bool {
        self.masking_failures.is_empty()
            && self.pacing_failures == 0
            && self.conservation_failures.is_empty()
            && self.order_failures == 0
    }
}

pub fn audit_deposits(log: &RunLog) -> DepositAudit {
    let report = collect_metrics(log);
    let tbt_us = (report.tbt_target_ms * 1e3).round() as u64;
    let tokens = tokens_by_request(log);
    let mut audit = DepositAudit::default();
    for rm in &report.per_request {
        if rm.visible_violations > rm.backend_violations {
            audit.masking_failures.push(rm.id);
        }
        let toks = tokens.get(&rm.id).map(Vec::as_slice).unwrap_or(&[]);
        if rm.e2e_ms.is_some() && toks.len() as u64 != rm.output_tokens {
            audit.conservation_failures.push(rm.id);
        }
        for (i, t) in toks.iter().enumerate() {
            if t.seq != i as u64 || t.delivered_us < t.generated_us {
                audit.order_failures += 1;
            }
            if i == 0 {
                continue;
            }
            let prev = toks[i - 1];
            if t.delivered_us < prev.delivered_us {
                audit.order_failures += 1;
            }
            let held = t.delivered_us > t.generated_us;
            if held && !t.flushed && t.delivered_us - prev.delivered_us != tbt_us {
                audit.pacing_failures += 1;
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_with_gaps(gaps_ms: &[u64], tbt_ms: u64) -> RunLog {
        let mut log = RunLog::default();
        log.push(
            0,
            "run_start",
            None,
            json!({"policy": "x", "tbt_target_us": tbt_ms * 1000, "tpot_target_us": tbt_ms * 1000, "gpu_block_budget": 10}),
        );
        log.push(0, "arrival", Some(0), json!({"output_tokens": gaps_ms.len() + 1}));
        let mut t = 0;
        log.push(t, "token", Some(0), TokenRow::payload(0, t, false));
        for (i, g) in gaps_ms.iter().enumerate() {
            t += g * 1000;
            log.push(t, "token", Some(0), TokenRow::payload(i as u64 + 1, t, false));
        }
        log.push(t, "finish", Some(0), json!({}));
        log
    }

    #[test]
    fn tbt_versus_tpot() {
        let r = collect_metrics(&log_with_gaps(&[40, 60], 50));
        assert_eq!(r.tbt_attainment, 0.5);
        assert_eq!(r.per_request[0].tpot_ms, Some(50.0));
        assert_eq!(r.tpot_attainment, 1.0);
        assert_eq!(r.visible_violations, 1);
        assert_eq!(r.backend_violations, 1);
    }

    #[test]
    fn all_within_target() {
        let r = collect_metrics(&log_with_gaps(&[10, 20, 30], 50));
        assert_eq!(r.tbt_attainment, 1.0);
    }

    #[test]
    fn throughput_per_minute() {
        let mut log = RunLog::default();
        log.push(0, "run_start", None, json!({"tbt_target_us": 1, "tpot_target_us": 1}));
        for i in 0..12 {
            log.push(0, "arrival", Some(i), json!({"output_tokens": 1}));
            log.push(1000 * i, "token", Some(i), TokenRow::payload(0, 1000 * i, false));
            log.push(1000 * i, "finish", Some(i), json!({}));
        }
        log.push(240_000_000, "run_end", None, json!({}));
        assert_eq!(collect_metrics(&log).throughput_rpm, 3.0);
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
    }

    #[test]
    fn empty_log() {
        let r = collect_metrics(&RunLog::default());
        assert_eq!(r.requests_total, 0);
        assert_eq!(r.tbt_attainment, 1.0);
        assert_eq!(r.visible_violations, 0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let log = log_with_gaps(&[40, 60], 50);
        assert_eq!(RunLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
