//! Service surface of the decision platform: an HTTP/JSON API over a durable
//! data root, a bounded job pool for training and tuning, and the operator
//! CLI built on the same [`Platform`] handle.

pub mod api;
pub mod error;
pub mod http;
pub mod jobs;
pub mod platform;
pub mod scenarios;
pub mod store;

pub use error::{ApiError, ApiResult, ErrorCode};
pub use jobs::{JobKind, JobRecord, JobRequest, JobStatus};
pub use platform::{ManualClock, Platform, PlatformOptions};
