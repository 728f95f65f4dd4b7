//! Desk-scale serving engine for many concurrent LoRA adapters over one base
//! model: dense reference math for factored/merged adapter forwards, a
//! unified page pool shared by KV caches and adapter weights, heterogeneous
//! batched gather-matmul reference kernels, a continuous-batching scheduler
//! with adapter clustering and early-abort admission control, a
//! tensor-parallel partition/cost model, synthetic and real workload traces,
//! and the metrics that tie them together.

pub mod batch;
pub mod engine;
pub mod events;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod pool;
pub mod sched;
pub mod settings;
pub mod tp;
pub mod verify;
pub mod workload;

pub use engine::{ComputeMode, Engine, EngineSetup, LatencyModel};
pub use matrix::DenseMatrix;
pub use metrics::{MetricsReport, Reward};
pub use pool::{AdapterId, PagePool, RequestId};
pub use sched::{Request, SchedulerConfig, SchedulerPolicy};
pub use workload::{SyntheticConfig, Trace};
