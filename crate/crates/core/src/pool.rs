//! Unified page pool: a fixed-capacity array of fixed-width pages shared by
//! KV-cache tensors and adapter weight tensors.
//!
//! One page holds one hidden-dimension vector, so a KV cache with sequence
//! length S consumes S pages per layer and a rank-R adapter tensor consumes
//! R pages. Pages are handed out from a free stack; handles never require
//! contiguity, which is what eliminates external fragmentation. Eviction
//! policy lives with the caller; the pool only enforces pinning.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::matrix::DenseMatrix;

pub type PageId = usize;
pub type RequestId = u64;
pub type AdapterId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("insufficient pages: need {needed}, {free} free")]
    InsufficientPages { needed: usize, free: usize },
    #[error("stale handle for request {0}")]
    StaleHandle(RequestId),
    #[error("request {0} already has live KV pages")]
    DuplicateRequest(RequestId),
    #[error("adapter {0} already resident")]
    AlreadyResident(AdapterId),
    #[error("adapter {0} not resident")]
    NotResident(AdapterId),
    #[error("adapter {0} is pinned")]
    PinnedEviction(AdapterId),
    #[error("adapter {0} not pinned")]
    NotPinned(AdapterId),
    #[error("page {0} is free; cannot read")]
    FreePageRead(PageId),
    #[error("page {0} out of range")]
    PageOutOfRange(PageId),
    #[error("expected {expected} weight rows, got {got}")]
    RowCountMismatch { expected: usize, got: usize },
    #[error("weight row has {got} elements, page size is {page_size}")]
    RowWidthMismatch { page_size: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum PageOwner {
    Free,
    Kv { request: RequestId, layer: usize, position: usize },
    Adapter { adapter: AdapterId, tensor: usize, row: usize },
}

/// Token for a live KV allocation; page lists are queried through the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvHandle {
    pub request_id: RequestId,
}

/// Token for a resident adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterHandle {
    pub adapter_id: AdapterId,
    pub rank: usize,
}

#[derive(Debug)]
struct KvState {
    layers: Vec<Vec<PageId>>,
    seq_len: usize,
}

#[derive(Debug)]
struct AdapterState {
    rank: usize,
    tensors: Vec<Vec<PageId>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FragmentationReport {
    pub capacity_pages: usize,
    pub page_size: usize,
    pub used: usize,
    pub free: usize,
    pub largest_contiguous_free_run: usize,
    pub kv_pages_by_request: BTreeMap<RequestId, usize>,
    pub adapter_pages_by_adapter: BTreeMap<AdapterId, usize>,
}

#[derive(Debug)]
pub struct PagePool {
    page_size: usize,
    capacity_pages: usize,
    data: Vec<f64>,
    owners: Vec<PageOwner>,
    free: Vec<PageId>,
    kv: BTreeMap<RequestId, KvState>,
    adapters: BTreeMap<AdapterId, AdapterState>,
    pinned: BTreeSet<AdapterId>,
}

/// Pages a byte budget can back at 8 bytes per element, after an optional
/// reservation for temporary activation storage.
pub fn capacity_for_budget(budget_bytes: u64, page_size: usize, reserve_bytes: u64) -> usize {
    let usable = budget_bytes.saturating_sub(reserve_bytes);
    (usable / (page_size as u64 * 8)) as usize
}

impl PagePool {
    pub fn new(page_size: usize, capacity_pages: usize) -> Self {
        assert!(page_size >= 1 && capacity_pages >= 1, "pool dimensions must be >= 1");
        Self {
            page_size,
            capacity_pages,
            data: vec![0.0; page_size * capacity_pages],
            owners: vec![PageOwner::Free; capacity_pages],
            // Stack order: lowest ids on top so fresh pools allocate low-to-high.
            free: (0..capacity_pages).rev().collect(),
            kv: BTreeMap::new(),
            adapters: BTreeMap::new(),
            pinned: BTreeSet::new(),
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn capacity_pages(&self) -> usize {
        self.capacity_pages
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn used_pages(&self) -> usize {
        self.capacity_pages - self.free.len()
    }

    pub fn owner(&self, page: PageId) -> Result<&PageOwner, PoolError> {
        self.owners.get(page).ok_or(PoolError::PageOutOfRange(page))
    }

    fn take_page(&mut self, owner: PageOwner) -> PageId {
        let page = self.free.pop().expect("caller checked free count");
        self.owners[page] = owner;
        page
    }

    fn release_page(&mut self, page: PageId) {
        self.owners[page] = PageOwner::Free;
        self.free.push(page);
    }

    /// Allocate `initial_len` pages per layer for a request's KV cache.
    pub fn alloc_kv(
        &mut self,
        request_id: RequestId,
        initial_len: usize,
        num_layers: usize,
    ) -> Result<KvHandle, PoolError> {
        if self.kv.contains_key(&request_id) {
            return Err(PoolError::DuplicateRequest(request_id));
        }
        let needed = initial_len * num_layers;
        if self.free.len() < needed {
            return Err(PoolError::InsufficientPages { needed, free: self.free.len() });
        }
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let mut pages = Vec::with_capacity(initial_len);
            for position in 0..initial_len {
                pages.push(self.take_page(PageOwner::Kv { request: request_id, layer, position }));
            }
            layers.push(pages);
        }
        self.kv.insert(request_id, KvState { layers, seq_len: initial_len });
        Ok(KvHandle { request_id })
    }

    /// Grow a KV cache by `num_tokens` pages on every layer.
    pub fn append_kv(&mut self, handle: &KvHandle, num_tokens: usize) -> Result<(), PoolError> {
        let num_layers = match self.kv.get(&handle.request_id) {
            Some(state) => state.layers.len(),
            None => return Err(PoolError::StaleHandle(handle.request_id)),
        };
        let needed = num_tokens * num_layers;
        if self.free.len() < needed {
            return Err(PoolError::InsufficientPages { needed, free: self.free.len() });
        }
        let seq_len = self.kv[&handle.request_id].seq_len;
        for layer in 0..num_layers {
            for t in 0..num_tokens {
                let page = self.take_page(PageOwner::Kv {
                    request: handle.request_id,
                    layer,
                    position: seq_len + t,
                });
                self.kv.get_mut(&handle.request_id).unwrap().layers[layer].push(page);
            }
        }
        self.kv.get_mut(&handle.request_id).unwrap().seq_len = seq_len + num_tokens;
        Ok(())
    }

    /// Release every page of a request's KV cache; returns the page count.
    pub fn free_kv(&mut self, handle: &KvHandle) -> Result<usize, PoolError> {
        let state =
            self.kv.remove(&handle.request_id).ok_or(PoolError::StaleHandle(handle.request_id))?;
        let mut released = 0;
        for pages in state.layers {
            for page in pages {
                self.release_page(page);
                released += 1;
            }
        }
        Ok(released)
    }

    pub fn kv_seq_len(&self, handle: &KvHandle) -> Result<usize, PoolError> {
        self.kv
            .get(&handle.request_id)
            .map(|s| s.seq_len)
            .ok_or(PoolError::StaleHandle(handle.request_id))
    }

    pub fn kv_pages(&self, handle: &KvHandle, layer: usize) -> Result<&[PageId], PoolError> {
        self.kv
            .get(&handle.request_id)
            .and_then(|s| s.layers.get(layer))
            .map(|v| v.as_slice())
            .ok_or(PoolError::StaleHandle(handle.request_id))
    }

    /// Load an adapter: `rank` rows per tensor, tensor-major, each row exactly
    /// one page wide. Rows of other widths are rejected; the page width is the
    /// hidden dimension by construction.
    pub fn load_adapter(
        &mut self,
        adapter_id: AdapterId,
        rank: usize,
        num_tensors: usize,
        weight_rows: &[Vec<f64>],
    ) -> Result<AdapterHandle, PoolError> {
        if self.adapters.contains_key(&adapter_id) {
            return Err(PoolError::AlreadyResident(adapter_id));
        }
        let expected = rank * num_tensors;
        if weight_rows.len() != expected {
            return Err(PoolError::RowCountMismatch { expected, got: weight_rows.len() });
        }
        if let Some(row) = weight_rows.iter().find(|r| r.len() != self.page_size) {
            return Err(PoolError::RowWidthMismatch { page_size: self.page_size, got: row.len() });
        }
        if self.free.len() < expected {
            return Err(PoolError::InsufficientPages { needed: expected, free: self.free.len() });
        }
        let mut tensors = Vec::with_capacity(num_tensors);
        for tensor in 0..num_tensors {
            let mut pages = Vec::with_capacity(rank);
            for row in 0..rank {
                let page = self.take_page(PageOwner::Adapter { adapter: adapter_id, tensor, row });
                let src = &weight_rows[tensor * rank + row];
                self.data[page * self.page_size..(page + 1) * self.page_size]
                    .copy_from_slice(src);
                pages.push(page);
            }
            tensors.push(pages);
        }
        self.adapters.insert(adapter_id, AdapterState { rank, tensors });
        Ok(AdapterHandle { adapter_id, rank })
    }

    /// Release a resident, unpinned adapter; returns the pages released.
    pub fn evict_adapter(&mut self, adapter_id: AdapterId) -> Result<usize, PoolError> {
        if !self.adapters.contains_key(&adapter_id) {
            return Err(PoolError::NotResident(adapter_id));
        }
        if self.pinned.contains(&adapter_id) {
            return Err(PoolError::PinnedEviction(adapter_id));
        }
        let state = self.adapters.remove(&adapter_id).unwrap();
        let mut released = 0;
        for pages in state.tensors {
            for page in pages {
                self.release_page(page);
                released += 1;
            }
        }
        Ok(released)
    }

    pub fn is_resident(&self, adapter_id: AdapterId) -> bool {
        self.adapters.contains_key(&adapter_id)
    }

    pub fn is_pinned(&self, adapter_id: AdapterId) -> bool {
        self.pinned.contains(&adapter_id)
    }

    /// Pin a resident adapter so it cannot be evicted. Idempotent.
    pub fn pin(&mut self, adapter_id: AdapterId) -> Result<(), PoolError> {
        if !self.adapters.contains_key(&adapter_id) {
            return Err(PoolError::NotResident(adapter_id));
        }
        self.pinned.insert(adapter_id);
        Ok(())
    }

    pub fn unpin(&mut self, adapter_id: AdapterId) -> Result<(), PoolError> {
        if !self.pinned.remove(&adapter_id) {
            return Err(PoolError::NotPinned(adapter_id));
        }
        Ok(())
    }

    pub fn adapter_tensor_pages(
        &self,
        adapter_id: AdapterId,
        tensor: usize,
    ) -> Result<&[PageId], PoolError> {
        self.adapters
            .get(&adapter_id)
            .and_then(|s| s.tensors.get(tensor))
            .map(|v| v.as_slice())
            .ok_or(PoolError::NotResident(adapter_id))
    }

    pub fn adapter_rank(&self, adapter_id: AdapterId) -> Result<usize, PoolError> {
        self.adapters.get(&adapter_id).map(|s| s.rank).ok_or(PoolError::NotResident(adapter_id))
    }

    pub fn resident_adapters(&self) -> impl Iterator<Item = AdapterId> + '_ {
        self.adapters.keys().copied()
    }

    /// Assemble the given pages, in order, into a rows x page_size matrix.
    pub fn gather(&self, page_ids: &[PageId]) -> Result<DenseMatrix, PoolError> {
        let mut out = DenseMatrix::zeros(page_ids.len(), self.page_size);
        for (i, &page) in page_ids.iter().enumerate() {
            match self.owner(page)? {
                PageOwner::Free => return Err(PoolError::FreePageRead(page)),
                _ => {}
            }
            out.row_mut(i)
                .copy_from_slice(&self.data[page * self.page_size..(page + 1) * self.page_size]);
        }
        Ok(out)
    }

    pub fn fragmentation_report(&self) -> FragmentationReport {
        let mut largest = 0;
        let mut run = 0;
        for owner in &self.owners {
            if *owner == PageOwner::Free {
                run += 1;
                largest = largest.max(run);
            } else {
                run = 0;
            }
        }
        let kv_pages_by_request = self
            .kv
            .iter()
            .map(|(id, s)| (*id, s.layers.iter().map(Vec::len).sum()))
            .collect();
        let adapter_pages_by_adapter = self
            .adapters
            .iter()
            .map(|(id, s)| (*id, s.tensors.iter().map(Vec::len).sum()))
            .collect();
        FragmentationReport {
            capacity_pages: self.capacity_pages,
            page_size: self.page_size,
            used: self.used_pages(),
            free: self.free_pages(),
            largest_contiguous_free_run: largest,
            kv_pages_by_request,
            adapter_pages_by_adapter,
        }
    }

    /// Owner-table audit: free stack and handle page sets must exactly
    /// partition the pool, with no page owned twice.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = vec![false; self.capacity_pages];
        for &page in &self.free {
            if self.owners[page] != PageOwner::Free {
                return Err(format!("page {page} on free stack but owned"));
            }
            if seen[page] {
                return Err(format!("page {page} appears twice on free stack"));
            }
            seen[page] = true;
        }
        let claim = |page: PageId, seen: &mut Vec<bool>| -> Result<(), String> {
            if seen[page] {
                return Err(format!("page {page} owned by two handles"));
            }
            seen[page] = true;
            Ok(())
        };
        for (id, state) in &self.kv {
            if state.layers.iter().any(|l| l.len() != state.seq_len) {
                return Err(format!("request {id}: layer page count != seq_len"));
            }
            for (layer, pages) in state.layers.iter().enumerate() {
                for (position, &page) in pages.iter().enumerate() {
                    claim(page, &mut seen)?;
                    let expect = PageOwner::Kv { request: *id, layer, position };
                    if self.owners[page] != expect {
                        return Err(format!("page {page} owner record mismatch"));
                    }
                }
            }
        }
        for (id, state) in &self.adapters {
            for (tensor, pages) in state.tensors.iter().enumerate() {
                if pages.len() != state.rank {
                    return Err(format!("adapter {id}: tensor {tensor} page count != rank"));
                }
                for (row, &page) in pages.iter().enumerate() {
                    claim(page, &mut seen)?;
                    let expect = PageOwner::Adapter { adapter: *id, tensor, row };
                    if self.owners[page] != expect {
                        return Err(format!("page {page} owner record mismatch"));
                    }
                }
            }
        }
        for id in &self.pinned {
            if !self.adapters.contains_key(id) {
                return Err(format!("pinned adapter {id} not resident"));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("some pages neither free nor owned".into());
        }
        Ok(())
    }
}

/// Contiguous best-fit allocator over the same page array: the baseline that
/// the paged pool is measured against. It fails an allocation whenever no
/// single free run is long enough, even if the total free count suffices.
#[derive(Debug)]
pub struct ContiguousBestFit {
    used: Vec<bool>,
    allocations: BTreeMap<u64, (usize, usize)>,
}

impl ContiguousBestFit {
    pub fn new(capacity_pages: usize) -> Self {
        Self { used: vec![false; capacity_pages], allocations: BTreeMap::new() }
    }

    pub fn free_pages(&self) -> usize {
        self.used.iter().filter(|u| !**u).count()
    }

    fn best_run(&self, len: usize) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        let mut start = 0;
        while start < self.used.len() {
            if self.used[start] {
                start += 1;
                continue;
            }
            let mut end = start;
            while end < self.used.len() && !self.used[end] {
                end += 1;
            }
            let run = end - start;
            if run >= len {
                match best {
                    Some((_, blen)) if blen <= run => {}
                    _ => best = Some((start, run)),
                }
            }
            start = end;
        }
        best.map(|(s, _)| s)
    }

    /// Allocate `len` contiguous pages under the given tag.
    pub fn alloc(&mut self, tag: u64, len: usize) -> Result<usize, PoolError> {
        if len == 0 {
            self.allocations.insert(tag, (0, 0));
            return Ok(0);
        }
        match self.best_run(len) {
            Some(start) => {
                for p in start..start + len {
                    self.used[p] = true;
                }
                self.allocations.insert(tag, (start, len));
                Ok(start)
            }
            None => Err(PoolError::InsufficientPages { needed: len, free: self.free_pages() }),
        }
    }

    pub fn free(&mut self, tag: u64) -> Result<usize, PoolError> {
        let (start, len) = self.allocations.remove(&tag).ok_or(PoolError::StaleHandle(tag))?;
        for p in start..start + len {
            self.used[p] = false;
        }
        Ok(len)
    }
}
