//! Command-line tools, ablation sweeps and an HTTP job service around the
//! removal pipeline in `attnerase-core`.

pub mod ablate;
pub mod cli;
pub mod error;
pub mod eval;
pub mod http;
pub mod io;
pub mod jobs;

pub use error::{ServiceError, ServiceResult};

use attnerase_core::backend::Backend;
use attnerase_core::orchestrator::{curves, run_removal, CurveRecord, RemovalConfig};
use attnerase_core::tensor::{Image, PixelMask};

/// Artifacts of one removal, encoded exactly as both the CLI and the job
/// service write them.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub result_png: Vec<u8>,
    pub curves: Vec<CurveRecord>,
}

impl Artifacts {
    pub fn curves_jsonl(&self) -> String {
        curves::to_jsonl(&self.curves)
    }
}

pub fn execute(
    backend: &mut dyn Backend,
    image: &Image,
    mask: &PixelMask,
    config: &RemovalConfig,
    job_id: &str,
) -> ServiceResult<Artifacts> {
    let out = run_removal(backend, image, mask, config, job_id)?;
    Ok(Artifacts {
        result_png: io::encode_png(&out.image)?,
        curves: out.curves,
    })
}
