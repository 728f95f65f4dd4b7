//! Serving metrics computed from an event log: throughput, latency averages,
//! SLO attainment, user satisfaction, and abort rate.
//!
//! Attainment counts requests whose first token arrives within the SLO;
//! satisfaction averages a non-increasing reward of first-token latency that
//! is zero beyond the SLO. Aborted requests count in both denominators with
//! zero contribution, but are excluded from the latency averages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventKind, EventRecord};
use crate::pool::AdapterId;

pub const DEFAULT_SLO_SECONDS: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("inconsistent log: {0}")]
    InconsistentLog(String),
}

/// Reward of first-token latency, mapping [0, inf) to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Reward {
    /// max(0, 1 - t/tl_max): 1 at zero latency, 0 at and beyond the SLO.
    Linear { tl_max: f64 },
}

impl Reward {
    pub fn eval(&self, first_token_latency: f64) -> f64 {
        match self {
            Reward::Linear { tl_max } => (1.0 - first_token_latency / tl_max).max(0.0),
        }
    }
}

impl Default for Reward {
    fn default() -> Self {
        Reward::Linear { tl_max: DEFAULT_SLO_SECONDS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterBreakdown {
    pub requests: usize,
    pub finished: usize,
    pub aborted: usize,
    pub slo_attainment: f64,
    pub avg_first_token_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_requests: usize,
    pub finished: usize,
    pub aborted: usize,
    /// Simulated seconds from time zero to the last event.
    pub duration: f64,
    /// Finished requests per second of simulated time.
    pub throughput: f64,
    pub avg_request_latency: f64,
    pub avg_first_token_latency: f64,
    pub slo_attainment: f64,
    pub avg_satisfaction: f64,
    pub abort_rate: f64,
    pub per_adapter: BTreeMap<AdapterId, AdapterBreakdown>,
}

impl MetricsReport {
    /// Stable, versioned column set for sweep CSVs.
    pub fn csv_header() -> &'static str {
        "schema,total_requests,finished,aborted,duration_s,throughput_rps,\
         avg_request_latency_s,avg_first_token_latency_s,slo_attainment,\
         avg_satisfaction,abort_rate"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "v1,{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.total_requests,
            self.finished,
            self.aborted,
            self.duration,
            self.throughput,
            self.avg_request_latency,
            self.avg_first_token_latency,
            self.slo_attainment,
            self.avg_satisfaction,
            self.abort_rate
        )
    }
}

#[derive(Default)]
struct RequestTimeline {
    adapter: Option<AdapterId>,
    arrival: Option<f64>,
    admit: Option<f64>,
    first_token: Option<f64>,
    finish: Option<f64>,
    abort: Option<f64>,
}

pub fn compute(
    log: &[EventRecord],
    slo_seconds: f64,
    reward: Reward,
) -> Result<MetricsReport, MetricsError> {
    let mut timelines: BTreeMap<u64, RequestTimeline> = BTreeMap::new();
    let mut duration = 0.0f64;
    for e in log {
        duration = duration.max(e.time);
        let tl = timelines.entry(e.request_id).or_default();
        tl.adapter = tl.adapter.or(e.adapter_id);
        let slot = match e.event {
            EventKind::Arrival => &mut tl.arrival,
            EventKind::Admit => &mut tl.admit,
            EventKind::Abort => &mut tl.abort,
            EventKind::FirstToken => &mut tl.first_token,
            EventKind::Finish => &mut tl.finish,
        };
        if slot.is_some() {
            return Err(MetricsError::InconsistentLog(format!(
                "request {} has duplicate {:?} events",
                e.request_id, e.event
            )));
        }
        *slot = Some(e.time);
    }

    for (id, tl) in &timelines {
        if tl.arrival.is_none() {
            return Err(MetricsError::InconsistentLog(format!("request {id} has no arrival")));
        }
        if tl.finish.is_some() && tl.admit.is_none() {
            return Err(MetricsError::InconsistentLog(format!(
                "request {id} finished without being admitted"
            )));
        }
        if tl.finish.is_some() && tl.first_token.is_none() {
            return Err(MetricsError::InconsistentLog(format!(
                "request {id} finished without a first token"
            )));
        }
        if tl.abort.is_some() && tl.finish.is_some() {
            return Err(MetricsError::InconsistentLog(format!(
                "request {id} both aborted and finished"
            )));
        }
    }

    let total = timelines.len();
    let mut finished = 0usize;
    let mut aborted = 0usize;
    let mut latency_sum = 0.0;
    let mut first_token_sum = 0.0;
    let mut first_token_count = 0usize;
    let mut attained = 0usize;
    let mut satisfaction_sum = 0.0;
    let mut per_adapter: BTreeMap<AdapterId, (AdapterBreakdown, f64, usize)> = BTreeMap::new();

    for tl in timelines.values() {
        let arrival = tl.arrival.unwrap();
        let adapter = tl.adapter.unwrap_or(u64::MAX);
        let slot = per_adapter.entry(adapter).or_default();
        slot.0.requests += 1;
        if tl.abort.is_some() {
            aborted += 1;
            slot.0.aborted += 1;
        }
        if let Some(finish) = tl.finish {
            finished += 1;
            slot.0.finished += 1;
            latency_sum += finish - arrival;
        }
        if let Some(ft) = tl.first_token {
            let ft_latency = ft - arrival;
            first_token_sum += ft_latency;
            first_token_count += 1;
            slot.1 += ft_latency;
            slot.2 += 1;
            if ft_latency <= slo_seconds {
                attained += 1;
                slot.0.slo_attainment += 1.0;
            }
            satisfaction_sum += reward.eval(ft_latency);
        }
        // Requests without a first token (aborted or still queued at log end)
        // contribute zero satisfaction and a missed SLO.
    }

    let per_adapter = per_adapter
        .into_iter()
        .map(|(id, (mut b, ft_sum, ft_count))| {
            b.slo_attainment /= b.requests.max(1) as f64;
            b.avg_first_token_latency = if ft_count > 0 { ft_sum / ft_count as f64 } else { 0.0 };
            (id, b)
        })
        .collect();

    let denom = total.max(1) as f64;
    Ok(MetricsReport {
        total_requests: total,
        finished,
        aborted,
        duration,
        throughput: if duration > 0.0 { finished as f64 / duration } else { 0.0 },
        avg_request_latency: if finished > 0 { latency_sum / finished as f64 } else { 0.0 },
        avg_first_token_latency: if first_token_count > 0 {
            first_token_sum / first_token_count as f64
        } else {
            0.0
        },
        slo_attainment: attained as f64 / denom,
        avg_satisfaction: satisfaction_sum / denom,
        abort_rate: aborted as f64 / denom,
        per_adapter,
    })
}
