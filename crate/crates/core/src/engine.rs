//! Token-level continuous-batching engine over the unified page pool, driven
//! by a trace under a parametric latency model.
//!
//! Each step prefills newly admitted requests and decodes one token for every
//! running request. Admission rounds run at fetch intervals (and whenever the
//! batch drains): arrivals are ingested, the early-abort filter and ordering
//! run when enabled, adapter clustering bounds the distinct adapters in the
//! batch, and requests are admitted while pool pages and the token budget
//! allow. KV pages for a request's whole decode are reserved at admission so
//! the pool can never run out mid-step.
//!
//! The latency model is synthetic and fully configurable:
//!   step      = c0 + c1 * decode_tokens (+ lora_coeff * adapter tokens)
//!   prefill   = p0 + p1 * input_len per admitted request
//!   load      = pages * io_per_page, overlapped with the previous step when
//!               prefetch is on (only the excess is charged)
//!   merged mode swaps the per-token adapter cost for a fixed cost whenever
//!   the merged adapter switches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventKind, EventRecord};
use crate::pool::{AdapterId, KvHandle, PagePool, PoolError, RequestId};
use crate::sched::{
    early_abort_filter, AdmissionOrder, AdmissionState, Request, RequestState, SchedulerConfig,
    SchedulerPolicy,
};
use crate::workload::Trace;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("pool failure during step (admission must prevent this): {0}")]
    PoolDuringStep(PoolError),
    #[error("engine made no progress at t={0}")]
    Stalled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeMode {
    /// Adapters stay factored; every adapter token pays `lora_coeff`.
    Factored,
    /// One adapter at a time is merged into the base weights; switching
    /// adapters drains the batch and costs `adapter_switch_cost`.
    Merged,
}

/// Synthetic latency constants, in seconds. Not fitted to any hardware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub c0: f64,
    pub c1: f64,
    pub p0: f64,
    pub p1: f64,
    pub io_per_page: f64,
    pub lora_coeff: f64,
    pub adapter_switch_cost: f64,
    pub prefetch: bool,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            c0: 0.01,
            c1: 2.0e-4,
            p0: 2.0e-3,
            p1: 1.0e-4,
            io_per_page: 2.0e-5,
            lora_coeff: 4.0e-5,
            adapter_switch_cost: 0.25,
            prefetch: true,
        }
    }
}

impl LatencyModel {
    pub fn prefill_latency(&self, input_len: u32) -> f64 {
        self.p0 + self.p1 * input_len as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSetup {
    pub scheduler: SchedulerConfig,
    pub latency: LatencyModel,
    pub mode: ComputeMode,
    pub pool_page_size: usize,
    pub pool_capacity_pages: usize,
    pub num_layers: usize,
    pub projections_per_layer: usize,
}

impl Default for EngineSetup {
    fn default() -> Self {
        Self {
            scheduler: SchedulerConfig::default(),
            latency: LatencyModel::default(),
            mode: ComputeMode::Factored,
            pool_page_size: 64,
            pool_capacity_pages: 40_000,
            num_layers: 1,
            projections_per_layer: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Prefill,
    Decoding,
}

pub struct Engine {
    setup: EngineSetup,
    pool: PagePool,
    requests: Vec<Request>,
    index_of: BTreeMap<RequestId, usize>,
    /// Request ids in arrival order; `arrival_cursor` walks this list.
    arrival_order: Vec<RequestId>,
    adapter_ranks: Vec<usize>,
    arrival_cursor: usize,
    waiting: Vec<RequestId>,
    running: Vec<(RequestId, Phase)>,
    adapter_active: BTreeMap<AdapterId, usize>,
    adapter_last_used: BTreeMap<AdapterId, u64>,
    /// Pages reserved for future decode growth of running requests.
    reserved_pages: usize,
    now: f64,
    step_index: u64,
    prev_step_duration: f64,
    pages_loaded_this_round: usize,
    pending_switch_cost: f64,
    merged_adapter: Option<AdapterId>,
    switch_target: Option<AdapterId>,
    pub admission: AdmissionState,
    events: Vec<EventRecord>,
    arrivals_since_fetch: usize,
}

impl Engine {
    pub fn from_trace(trace: &Trace, setup: EngineSetup) -> Self {
        let requests: Vec<Request> = trace
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Request::new(i as RequestId, Some(e.adapter_id), e.arrival_time, e.input_len, e.output_len)
            })
            .collect();
        let adapter_ranks =
            (0..trace.meta.n_adapters).map(|i| trace.rank_for_adapter(i as u64)).collect();
        Self::new(requests, adapter_ranks, setup)
    }

    pub fn new(requests: Vec<Request>, adapter_ranks: Vec<usize>, setup: EngineSetup) -> Self {
        let pool = PagePool::new(setup.pool_page_size, setup.pool_capacity_pages);
        let index_of: BTreeMap<RequestId, usize> =
            requests.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        assert_eq!(index_of.len(), requests.len(), "request ids must be unique");
        let mut arrival_order: Vec<RequestId> = requests.iter().map(|r| r.id).collect();
        arrival_order.sort_by(|a, b| {
            let (ra, rb) = (&requests[index_of[a]], &requests[index_of[b]]);
            ra.arrival_time.partial_cmp(&rb.arrival_time).unwrap().then(ra.id.cmp(&rb.id))
        });
        Self {
            setup,
            pool,
            requests,
            index_of,
            arrival_order,
            adapter_ranks,
            arrival_cursor: 0,
            waiting: Vec::new(),
            running: Vec::new(),
            adapter_active: BTreeMap::new(),
            adapter_last_used: BTreeMap::new(),
            reserved_pages: 0,
            now: 0.0,
            step_index: 0,
            prev_step_duration: 0.0,
            pages_loaded_this_round: 0,
            pending_switch_cost: 0.0,
            merged_adapter: None,
            switch_target: None,
            admission: AdmissionState::default(),
            events: Vec::new(),
            arrivals_since_fetch: 0,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn into_events(self) -> Vec<EventRecord> {
        self.events
    }

    pub fn pool(&self) -> &PagePool {
        &self.pool
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn waiting_ids(&self) -> &[RequestId] {
        &self.waiting
    }

    pub fn running_adapters(&self) -> BTreeSet<AdapterId> {
        self.running
            .iter()
            .filter_map(|(id, _)| self.requests[self.index_of[id]].adapter_id)
            .collect()
    }

    pub fn done(&self) -> bool {
        self.arrival_cursor == self.requests.len()
            && self.waiting.is_empty()
            && self.running.is_empty()
    }

    fn log(&mut self, time: f64, event: EventKind, request_id: RequestId) {
        let adapter_id = self.requests[self.index_of[&request_id]].adapter_id;
        self.events.push(EventRecord { time, event, request_id, adapter_id });
    }

    fn adapter_rank(&self, adapter: AdapterId) -> usize {
        self.adapter_ranks[adapter as usize]
    }

    /// Pages a resident copy of this adapter occupies: one tensor pair per
    /// projection per layer, rank pages per tensor.
    pub fn adapter_pages(&self, adapter: AdapterId) -> usize {
        self.adapter_rank(adapter) * self.setup.projections_per_layer * 2 * self.setup.num_layers
    }

    fn kv_pages_total(&self, r: &Request) -> usize {
        // input_len pages at prefill, one more per decode step after the
        // first token: input + output - 1 per layer.
        (r.input_len as usize + (r.output_len as usize).saturating_sub(1)) * self.setup.num_layers
    }

    /// A request that could not be admitted even into an empty engine.
    fn infeasible_ever(&self, r: &Request) -> bool {
        if r.input_len as usize > self.setup.scheduler.batch_token_budget {
            return true;
        }
        let adapter_pages = match (self.setup.mode, r.adapter_id) {
            (ComputeMode::Factored, Some(a)) => self.adapter_pages(a),
            _ => 0,
        };
        adapter_pages + self.kv_pages_total(r) > self.setup.pool_capacity_pages
    }

    fn ingest_arrivals(&mut self) {
        while self.arrival_cursor < self.arrival_order.len()
            && self.requests[self.index_of[&self.arrival_order[self.arrival_cursor]]].arrival_time
                <= self.now
        {
            let id = self.arrival_order[self.arrival_cursor];
            let arrival = self.requests[self.index_of[&id]].arrival_time;
            self.arrival_cursor += 1;
            self.arrivals_since_fetch += 1;
            self.log(arrival, EventKind::Arrival, id);
            if self.infeasible_ever(&self.requests[self.index_of[&id]]) {
                self.requests[self.index_of[&id]].state = RequestState::Aborted;
                self.log(self.now, EventKind::Abort, id);
                continue;
            }
            self.waiting.push(id);
        }
    }

    fn next_arrival_time(&self) -> Option<f64> {
        self.arrival_order
            .get(self.arrival_cursor)
            .map(|id| self.requests[self.index_of[id]].arrival_time)
    }

    fn order_waiting(&mut self, order: AdmissionOrder) {
        let requests = &self.requests;
        let index_of = &self.index_of;
        match order {
            AdmissionOrder::OldestFirst => self.waiting.sort_by(|a, b| {
                let (ra, rb) = (&requests[index_of[a]], &requests[index_of[b]]);
                ra.arrival_time.partial_cmp(&rb.arrival_time).unwrap().then(ra.id.cmp(&rb.id))
            }),
            AdmissionOrder::NewestFirst => self.waiting.sort_by(|a, b| {
                let (ra, rb) = (&requests[index_of[a]], &requests[index_of[b]]);
                rb.arrival_time.partial_cmp(&ra.arrival_time).unwrap().then(ra.id.cmp(&rb.id))
            }),
        }
    }

    /// Evict least-recently-used unpinned adapters until `needed` pages are
    /// free (beyond the growth reservation); false if that is impossible.
    fn make_room(&mut self, needed: usize) -> bool {
        while self.pool.free_pages() < self.reserved_pages + needed {
            let victim = self
                .pool
                .resident_adapters()
                .filter(|a| !self.pool.is_pinned(*a))
                .min_by_key(|a| self.adapter_last_used.get(a).copied().unwrap_or(0));
            match victim {
                Some(a) => {
                    self.pool.evict_adapter(a).expect("victim is resident and unpinned");
                }
                None => return false,
            }
        }
        true
    }

    /// Tokens the next step will process for the current running set: one
    /// per decoding request, the whole prompt for pending prefills.
    fn step_tokens(&self) -> usize {
        self.running
            .iter()
            .map(|(id, phase)| match phase {
                Phase::Decoding => 1,
                Phase::Prefill => self.requests[self.index_of[id]].input_len as usize,
            })
            .sum()
    }

    fn try_admit(&mut self, id: RequestId) -> AdmitOutcome {
        let r = self.requests[self.index_of[&id]].clone();
        if self.step_tokens() + r.input_len as usize > self.setup.scheduler.batch_token_budget {
            return AdmitOutcome::CapacityStop;
        }
        let adapter_pages = match (self.setup.mode, r.adapter_id) {
            (ComputeMode::Factored, Some(a)) if !self.pool.is_resident(a) => self.adapter_pages(a),
            _ => 0,
        };
        let kv_now = r.input_len as usize * self.setup.num_layers;
        let kv_future = (r.output_len as usize).saturating_sub(1) * self.setup.num_layers;
        if !self.make_room(adapter_pages + kv_now + kv_future) {
            return AdmitOutcome::CapacityStop;
        }
        if let (ComputeMode::Factored, Some(a)) = (self.setup.mode, r.adapter_id) {
            if !self.pool.is_resident(a) {
                let rank = self.adapter_rank(a);
                let tensors = self.setup.projections_per_layer * 2 * self.setup.num_layers;
                let rows = vec![vec![0.0; self.setup.pool_page_size]; rank * tensors];
                self.pool.load_adapter(a, rank, tensors, &rows).expect("room was made");
                self.pages_loaded_this_round += rank * tensors;
            }
            let active = self.adapter_active.entry(a).or_insert(0);
            if *active == 0 {
                self.pool.pin(a).expect("adapter resident");
            }
            *active += 1;
        } else if let Some(a) = r.adapter_id {
            *self.adapter_active.entry(a).or_insert(0) += 1;
        }
        self.pool
            .alloc_kv(id, r.input_len as usize, self.setup.num_layers)
            .expect("room was made");
        self.reserved_pages += kv_future;
        if let Some(a) = r.adapter_id {
            self.adapter_last_used.insert(a, self.step_index);
        }
        self.requests[self.index_of[&id]].state = RequestState::Running;
        self.running.push((id, Phase::Prefill));
        self.log(self.now, EventKind::Admit, id);
        AdmitOutcome::Admitted
    }

    fn admission_phase(&mut self) {
        self.ingest_arrivals();
        let arrivals = std::mem::take(&mut self.arrivals_since_fetch);
        self.admission.observe_arrivals(arrivals);

        let scheduler = self.setup.scheduler.clone();
        let order = match scheduler.policy {
            SchedulerPolicy::Fcfs => AdmissionOrder::OldestFirst,
            SchedulerPolicy::Lcfs => AdmissionOrder::NewestFirst,
            SchedulerPolicy::EarlyAbort => {
                let queue: Vec<(RequestId, f64)> = self
                    .waiting
                    .iter()
                    .map(|id| (*id, self.requests[self.index_of[id]].arrival_time))
                    .collect();
                let aborted =
                    early_abort_filter(&queue, &self.admission, self.now, scheduler.slo_first_token);
                for id in aborted {
                    self.waiting.retain(|w| *w != id);
                    self.requests[self.index_of[&id]].state = RequestState::Aborted;
                    self.log(self.now, EventKind::Abort, id);
                }
                self.admission.order()
            }
        };
        self.order_waiting(order);

        // Merged mode: the batch serves one adapter at a time. A switch is
        // scheduled when some other adapter's waiting backlog exceeds the
        // current adapter's remaining work; admission then drains the batch
        // and the switch cost is charged once the batch is empty.
        if self.setup.mode == ComputeMode::Merged {
            let mut backlog: BTreeMap<AdapterId, (usize, f64)> = BTreeMap::new();
            for id in &self.waiting {
                let r = &self.requests[self.index_of[id]];
                if let Some(a) = r.adapter_id {
                    let slot = backlog.entry(a).or_insert((0, f64::INFINITY));
                    slot.0 += 1;
                    slot.1 = slot.1.min(r.arrival_time);
                }
            }
            let current_load = self
                .merged_adapter
                .map(|m| backlog.get(&m).map_or(0, |b| b.0) + self.running.len());
            let challenger = backlog
                .iter()
                .filter(|(a, _)| Some(**a) != self.merged_adapter)
                .max_by(|(a1, (c1, t1)), (a2, (c2, t2))| {
                    c1.cmp(c2)
                        .then(t2.partial_cmp(t1).unwrap())
                        .then(a2.cmp(a1))
                });
            if let Some((&a, &(count, _))) = challenger {
                match current_load {
                    None => self.switch_target = Some(a),
                    Some(load) if count > load => self.switch_target = Some(a),
                    _ => {}
                }
            }
            if let Some(target) = self.switch_target {
                if self.running.is_empty() {
                    // Merging into the base weights is paid on every switch,
                    // including the first.
                    self.pending_switch_cost += self.setup.latency.adapter_switch_cost;
                    self.merged_adapter = Some(target);
                    self.switch_target = None;
                }
            }
        }

        let mut admitted = 0usize;
        let mut deferred: Vec<RequestId> = Vec::new();
        let mut capacity_blocked = false;
        let mut batch_adapters = self.running_adapters();

        // Pass 1: respect the cluster limit, admitting in policy order.
        let queue: Vec<RequestId> = self.waiting.clone();
        for id in queue {
            let adapter = self.requests[self.index_of[&id]].adapter_id;
            if self.setup.mode == ComputeMode::Merged
                && adapter.is_some()
                && (adapter != self.merged_adapter || self.switch_target.is_some())
            {
                deferred.push(id);
                continue;
            }
            if let (Some(limit), Some(a)) = (scheduler.cluster_limit, adapter) {
                if !batch_adapters.contains(&a) && batch_adapters.len() >= limit {
                    deferred.push(id);
                    continue;
                }
            }
            match self.try_admit(id) {
                AdmitOutcome::Admitted => {
                    admitted += 1;
                    if let Some(a) = adapter {
                        batch_adapters.insert(a);
                    }
                    self.waiting.retain(|w| *w != id);
                }
                AdmitOutcome::CapacityStop => {
                    capacity_blocked = true;
                    break;
                }
            }
        }

        // Pass 2: the cluster-limit relaxation. Only when no request of an
        // in-batch adapter is left waiting (their queues are exhausted) may
        // requests for new adapters use the leftover space.
        let in_batch_waiting = self
            .waiting
            .iter()
            .any(|id| match self.requests[self.index_of[id]].adapter_id {
                Some(a) => batch_adapters.contains(&a),
                None => false,
            });
        if !capacity_blocked
            && !in_batch_waiting
            && self.setup.mode == ComputeMode::Factored
        {
            for id in deferred {
                if !self.waiting.contains(&id) {
                    continue;
                }
                match self.try_admit(id) {
                    AdmitOutcome::Admitted => {
                        admitted += 1;
                        self.waiting.retain(|w| *w != id);
                    }
                    AdmitOutcome::CapacityStop => break,
                }
            }
        }

        self.admission.observe_admitted(admitted);
    }

    /// Run one engine step: admission at fetch boundaries, then prefill the
    /// new requests and decode one token for everything else.
    pub fn step(&mut self) -> Result<(), EngineError> {
        if self.done() {
            return Ok(());
        }
        let fetch_due = self.step_index % self.setup.scheduler.fetch_interval.max(1) == 0;
        if fetch_due || self.running.is_empty() {
            self.admission_phase();
        }
        // Idle: fast-forward to the next arrival and admit immediately.
        if self.running.is_empty() {
            match self.next_arrival_time() {
                Some(t) => {
                    self.now = self.now.max(t);
                    self.admission_phase();
                }
                None => {
                    // Waiting requests with no way to run would be a stall.
                    if !self.waiting.is_empty() {
                        return Err(EngineError::Stalled(self.now));
                    }
                    return Ok(());
                }
            }
            if self.running.is_empty() {
                if self.waiting.is_empty() && self.arrival_cursor == self.requests.len() {
                    return Ok(());
                }
                if self.waiting.is_empty() {
                    // Nothing admitted yet; loop again from the next arrival.
                    self.step_index += 1;
                    return Ok(());
                }
                return Err(EngineError::Stalled(self.now));
            }
        }

        let prefills: Vec<RequestId> = self
            .running
            .iter()
            .filter(|(_, p)| *p == Phase::Prefill)
            .map(|(id, _)| *id)
            .collect();
        let decodes: Vec<RequestId> = self
            .running
            .iter()
            .filter(|(_, p)| *p == Phase::Decoding)
            .map(|(id, _)| *id)
            .collect();

        // Decode KV growth comes out of the admission-time reservation.
        for &id in &decodes {
            self.pool
                .append_kv(&KvHandle { request_id: id }, 1)
                .map_err(EngineError::PoolDuringStep)?;
            self.reserved_pages -= self.setup.num_layers;
        }

        let lat = &self.setup.latency;
        let mut duration = lat.c0 + lat.c1 * decodes.len() as f64;
        let mut adapter_tokens = 0usize;
        for &id in &decodes {
            if self.requests[self.index_of[&id]].adapter_id.is_some() {
                adapter_tokens += 1;
            }
        }
        for &id in &prefills {
            let r = &self.requests[self.index_of[&id]];
            duration += lat.prefill_latency(r.input_len);
            if r.adapter_id.is_some() {
                adapter_tokens += r.input_len as usize;
            }
        }
        if self.setup.mode == ComputeMode::Factored {
            duration += lat.lora_coeff * adapter_tokens as f64;
        }
        let load_time = self.pages_loaded_this_round as f64 * lat.io_per_page;
        duration += if lat.prefetch {
            (load_time - self.prev_step_duration).max(0.0)
        } else {
            load_time
        };
        duration += self.pending_switch_cost;
        self.pages_loaded_this_round = 0;
        self.pending_switch_cost = 0.0;

        self.now += duration;
        if !prefills.is_empty() {
            // The admission-to-first-token latency of this minibatch feeds
            // the early-abort filter's worst-case estimate.
            self.admission.observe_minibatch_latency(duration);
        }

        for (id, phase) in self.running.iter_mut() {
            let r = &mut self.requests[self.index_of[id]];
            match phase {
                Phase::Prefill => {
                    r.generated = 1;
                    r.first_token_time = Some(self.now);
                    *phase = Phase::Decoding;
                }
                Phase::Decoding => r.generated += 1,
            }
            if let Some(a) = r.adapter_id {
                self.adapter_last_used.insert(a, self.step_index);
            }
        }
        let first_token_ids: Vec<RequestId> = prefills;
        for id in first_token_ids {
            self.log(self.now, EventKind::FirstToken, id);
        }

        let finished: Vec<RequestId> = self
            .running
            .iter()
            .filter(|(id, _)| {
                let r = &self.requests[self.index_of[id]];
                r.generated >= r.output_len
            })
            .map(|(id, _)| *id)
            .collect();
        for id in finished {
            self.pool
                .free_kv(&KvHandle { request_id: id })
                .map_err(EngineError::PoolDuringStep)?;
            self.running.retain(|(rid, _)| *rid != id);
            let r = &mut self.requests[self.index_of[&id]];
            r.state = RequestState::Finished;
            r.finish_time = Some(self.now);
            if let Some(a) = r.adapter_id {
                let active = self.adapter_active.get_mut(&a).expect("active count tracked");
                *active -= 1;
                if *active == 0 && self.setup.mode == ComputeMode::Factored {
                    let _ = self.pool.unpin(a);
                }
            }
            self.log(self.now, EventKind::Finish, id);
        }

        self.prev_step_duration = duration;
        self.step_index += 1;
        Ok(())
    }

    /// Drive the trace to completion; every request ends Finished or Aborted.
    pub fn run(&mut self) -> Result<(), EngineError> {
        self.run_with(|_| {})
    }

    /// Like [`Engine::run`], invoking the observer after every step.
    pub fn run_with(&mut self, mut on_step: impl FnMut(&Engine)) -> Result<(), EngineError> {
        let mut last_progress = (self.arrival_cursor, self.events.len(), self.now);
        while !self.done() {
            self.step()?;
            on_step(self);
            let progress = (self.arrival_cursor, self.events.len(), self.now);
            if progress == last_progress {
                return Err(EngineError::Stalled(self.now));
            }
            last_progress = progress;
        }
        Ok(())
    }
}

enum AdmitOutcome {
    Admitted,
    CapacityStop,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::RequestState;

    fn setup_small() -> EngineSetup {
        EngineSetup {
            pool_page_size: 4,
            pool_capacity_pages: 64,
            ..EngineSetup::default()
        }
    }

    fn request(id: u64, adapter: u64, arrival: f64, input: u32, output: u32) -> Request {
        Request::new(id, Some(adapter), arrival, input, output)
    }

    #[test]
    fn single_request_finishes_after_output_len_steps() {
        let mut engine = Engine::new(vec![request(0, 0, 0.0, 2, 3)], vec![1], setup_small());
        let mut steps = 0;
        while !engine.done() {
            engine.step().unwrap();
            steps += 1;
        }
        // One prefill step plus two decode steps.
        assert_eq!(steps, 3);
        let r = &engine.requests()[0];
        assert_eq!(r.state, RequestState::Finished);
        assert_eq!(r.generated, 3);
        assert!(r.first_token_time.unwrap() < r.finish_time.unwrap());
    }

    #[test]
    fn finished_request_pages_freed_same_step() {
        let mut engine = Engine::new(vec![request(0, 0, 0.0, 2, 2)], vec![1], setup_small());
        engine.run().unwrap();
        engine.pool().audit().unwrap();
        // KV pages released at finish; the adapter stays resident, unpinned.
        let report = engine.pool().fragmentation_report();
        assert!(report.kv_pages_by_request.is_empty());
        assert!(engine.pool().is_resident(0));
        assert!(!engine.pool().is_pinned(0));
    }

    #[test]
    fn admission_stops_when_pool_is_full() {
        // Adapter (rank 1 x 8 tensors = 8 pages) + kv(2 + 1) = 11 pages per
        // request with distinct adapters; 23 pages fit exactly two.
        let setup = EngineSetup { pool_capacity_pages: 23, ..setup_small() };
        let requests = vec![
            request(0, 0, 0.0, 2, 2),
            request(1, 1, 0.1, 2, 2),
            request(2, 2, 0.2, 2, 2),
        ];
        let mut engine = Engine::new(requests, vec![1, 1, 1], setup);
        engine.now = 1.0;
        engine.admission_phase();
        let states: Vec<RequestState> = engine.requests().iter().map(|r| r.state).collect();
        assert_eq!(states[0], RequestState::Running);
        assert_eq!(states[1], RequestState::Running);
        assert_eq!(states[2], RequestState::Waiting);
        // The blocked request is admitted once space frees, and everything
        // still terminates.
        engine.run().unwrap();
        assert!(engine
            .requests()
            .iter()
            .all(|r| r.state == RequestState::Finished));
    }

    #[test]
    fn no_admission_without_space() {
        let setup = EngineSetup { pool_capacity_pages: 16, ..setup_small() };
        // First request consumes nearly everything (8 adapter + 4 + 1).
        let requests = vec![request(0, 0, 0.0, 4, 2), request(1, 1, 0.0, 4, 2)];
        let mut engine = Engine::new(requests, vec![1, 1], setup);
        engine.step().unwrap();
        assert_eq!(engine.requests()[0].state, RequestState::Running);
        assert_eq!(engine.requests()[1].state, RequestState::Waiting);
        engine.run().unwrap();
        assert!(engine.requests().iter().all(|r| r.state == RequestState::Finished));
    }

    #[test]
    fn fcfs_admits_oldest_first() {
        let setup = EngineSetup { pool_capacity_pages: 23, ..setup_small() };
        let requests = vec![
            request(0, 0, 0.3, 2, 2),
            request(1, 1, 0.1, 2, 2),
            request(2, 2, 0.2, 2, 2),
        ];
        let mut engine = Engine::new(requests, vec![1, 1, 1], setup);
        engine.now = 1.0;
        engine.admission_phase();
        // Room for two: the two oldest arrivals (ids 1 and 2) get in.
        assert_eq!(engine.requests()[1].state, RequestState::Running);
        assert_eq!(engine.requests()[2].state, RequestState::Running);
        assert_eq!(engine.requests()[0].state, RequestState::Waiting);
    }

    #[test]
    fn cluster_limit_defers_new_adapters() {
        let setup = EngineSetup {
            scheduler: SchedulerConfig { cluster_limit: Some(2), ..SchedulerConfig::default() },
            pool_capacity_pages: 256,
            ..setup_small()
        };
        // Adapters {a, a, b, c}: both a's and b are admitted; c only joins
        // through the relaxation because the first three leave room.
        let requests = vec![
            request(0, 7, 0.0, 2, 4),
            request(1, 7, 0.0, 2, 4),
            request(2, 8, 0.0, 2, 4),
            request(3, 9, 0.0, 2, 4),
        ];
        let mut engine = Engine::new(requests, vec![1; 10], setup);
        engine.now = 0.5;
        engine.admission_phase();
        assert!(engine.requests().iter().all(|r| r.state == RequestState::Running));
        assert_eq!(engine.running_adapters().len(), 3);
    }

    #[test]
    fn cluster_limit_blocks_relaxation_while_cluster_requests_wait() {
        let setup = EngineSetup {
            scheduler: SchedulerConfig {
                cluster_limit: Some(1),
                batch_token_budget: 4,
                ..SchedulerConfig::default()
            },
            pool_capacity_pages: 256,
            ..setup_small()
        };
        // Budget of 4 tokens admits exactly two of the three a-requests; the
        // b-request must not jump in while an a-request is still waiting.
        let requests = vec![
            request(0, 7, 0.0, 2, 2),
            request(1, 7, 0.0, 2, 2),
            request(2, 7, 0.0, 2, 2),
            request(3, 8, 0.0, 2, 2),
        ];
        let mut engine = Engine::new(requests, vec![1; 10], setup);
        engine.now = 0.5;
        engine.admission_phase();
        assert_eq!(engine.requests()[0].state, RequestState::Running);
        assert_eq!(engine.requests()[1].state, RequestState::Running);
        assert_eq!(engine.requests()[2].state, RequestState::Waiting);
        assert_eq!(engine.requests()[3].state, RequestState::Waiting);
        assert_eq!(engine.running_adapters().len(), 1);
        engine.run().unwrap();
        assert!(engine.requests().iter().all(|r| r.state == RequestState::Finished));
    }

    #[test]
    fn saturated_decode_interval_matches_latency_model() {
        let setup = EngineSetup { pool_capacity_pages: 4096, ..setup_small() };
        let requests: Vec<Request> =
            (0..8).map(|i| request(i, i, 0.0, 1, 50)).collect();
        let mut engine = Engine::new(requests, vec![1; 8], setup.clone());
        engine.run().unwrap();
        let lat = &setup.latency;
        let decode_step = lat.c0 + 8.0 * (lat.c1 + lat.lora_coeff);
        for r in engine.requests() {
            let measured = (r.finish_time.unwrap() - r.first_token_time.unwrap()) / 49.0;
            assert!(
                (measured - decode_step).abs() < 1e-9,
                "measured {measured}, model {decode_step}"
            );
        }
    }

    #[test]
    fn every_request_terminates() {
        let config = crate::workload::SyntheticConfig {
            n_adapters: 12,
            duration: 20.0,
            total_rate: 4.0,
            seed: 5,
            ..Default::default()
        };
        let trace = crate::workload::gen_synthetic(&config).unwrap();
        let mut engine = Engine::from_trace(&trace, EngineSetup::default());
        engine.run().unwrap();
        assert_eq!(engine.requests().len(), trace.entries.len());
        assert!(engine
            .requests()
            .iter()
            .all(|r| matches!(r.state, RequestState::Finished | RequestState::Aborted)));
        engine.pool().audit().unwrap();
    }

    #[test]
    fn tight_pool_never_fails_mid_step() {
        // Growth reservations mean decode appends cannot hit a full pool.
        let setup = EngineSetup { pool_capacity_pages: 40, ..setup_small() };
        let requests = vec![
            request(0, 0, 0.0, 2, 20),
            request(1, 0, 0.0, 2, 20),
            request(2, 0, 0.1, 2, 20),
        ];
        let mut engine = Engine::new(requests, vec![1], setup);
        while !engine.done() {
            engine.step().expect("pool exhaustion during a step");
            engine.pool().audit().unwrap();
        }
        assert!(engine.requests().iter().all(|r| r.state == RequestState::Finished));
    }

    #[test]
    fn infeasible_requests_abort_immediately() {
        let setup = EngineSetup { pool_capacity_pages: 16, ..setup_small() };
        // Needs 8 adapter pages + 100 KV pages: can never fit.
        let requests = vec![request(0, 0, 0.0, 50, 51), request(1, 1, 0.0, 2, 2)];
        let mut engine = Engine::new(requests, vec![1, 1], setup);
        engine.run().unwrap();
        assert_eq!(engine.requests()[0].state, RequestState::Aborted);
        assert_eq!(engine.requests()[1].state, RequestState::Finished);
    }

    #[test]
    fn merged_mode_charges_one_switch_for_one_adapter() {
        let setup = EngineSetup {
            mode: ComputeMode::Merged,
            pool_capacity_pages: 4096,
            ..setup_small()
        };
        let factored = EngineSetup { mode: ComputeMode::Factored, ..setup.clone() };
        let requests: Vec<Request> = (0..6).map(|i| request(i, 0, i as f64 * 0.2, 4, 10)).collect();
        let mut merged_engine = Engine::new(requests.clone(), vec![2], setup.clone());
        merged_engine.run().unwrap();
        let mut factored_engine = Engine::new(requests, vec![2], factored);
        factored_engine.run().unwrap();
        let end = |e: &Engine| {
            e.requests().iter().map(|r| r.finish_time.unwrap()).fold(0.0f64, f64::max)
        };
        let merged_end = end(&merged_engine);
        let factored_end = end(&factored_engine);
        // One switch charge up front, then no per-token adapter cost.
        assert!(merged_end > setup.latency.adapter_switch_cost);
        assert!(merged_end < factored_end + setup.latency.adapter_switch_cost);
    }
}
