//! Strategy × reference-scheme sweeps over a small corpus.
//!
//! A corpus directory holds `<name>.png` with `<name>.mask.png` and,
//! optionally, `<name>.ref.png` (a reference output to score against).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attnerase_core::backend;
use attnerase_core::orchestrator::{ReferenceScheme, RemovalConfig};
use attnerase_core::strategy::StrategyKind;
use attnerase_core::tensor::{Image, PixelMask};

use crate::error::{ServiceError, ServiceResult};
use crate::eval::{psnr, EvalReport, EvalRow};
use crate::io;

const MASK_SUFFIX: &str = ".mask.png";
const REF_SUFFIX: &str = ".ref.png";

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub reference: Option<PathBuf>,
}

/// Lists corpus items sorted by name. Every image needs a mask.
pub fn discover_corpus(dir: &Path) -> ServiceResult<Vec<CorpusItem>> {
    let entries = std::fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ServiceError::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if file.ends_with(MASK_SUFFIX) || file.ends_with(REF_SUFFIX) {
            continue;
        }
        if let Some(stem) = file.strip_suffix(".png") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let mask = dir.join(format!("{name}{MASK_SUFFIX}"));
            if !mask.is_file() {
                return Err(ServiceError::Usage(format!(
                    "corpus image `{name}.png` has no `{name}{MASK_SUFFIX}`"
                )));
            }
            let reference = Some(dir.join(format!("{name}{REF_SUFFIX}"))).filter(|p| p.is_file());
            Ok(CorpusItem {
                image: dir.join(format!("{name}.png")),
                mask,
                reference,
                name,
            })
        })
        .collect()
}

/// External per-run metrics keyed by `(image, strategy, reference)`.
pub type ExternalMetrics = BTreeMap<(String, String, String), BTreeMap<String, String>>;

/// Reads a CSV with `image,strategy,reference` key columns plus any metric columns.
pub fn read_external_metrics(path: &Path) -> ServiceResult<ExternalMetrics> {
    let bad = |m: String| ServiceError::Usage(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => ServiceError::io(path, io),
        other => bad(format!("{other:?}")),
    })?;
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing `{name}` column")))
    };
    let (ci, cs, cr) = (col("image")?, col("strategy")?, col("reference")?);
    let mut out = ExternalMetrics::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let key = (rec[ci].to_string(), rec[cs].to_string(), rec[cr].to_string());
        let metrics = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![ci, cs, cr].contains(i))
            .map(|(i, h)| (h.to_string(), rec.get(i).unwrap_or("").to_string()))
            .collect();
        out.insert(key, metrics);
    }
    Ok(out)
}

pub struct Sweep<'a> {
    pub base: &'a RemovalConfig,
    pub strategies: &'a [StrategyKind],
    pub references: &'a [ReferenceScheme],
    pub external: Option<&'a ExternalMetrics>,
}

struct Loaded {
    name: String,
    image: Image,
    mask: PixelMask,
    reference: Option<Image>,
}

pub fn run_sweep(items: &[CorpusItem], sweep: &Sweep<'_>) -> ServiceResult<EvalReport> {
    if items.is_empty() {
        return Err(ServiceError::Usage("corpus is empty".into()));
    }
    let loaded = items
        .iter()
        .map(|it| {
            Ok(Loaded {
                name: it.name.clone(),
                image: io::read_png(&it.image)?,
                mask: io::read_mask_png(&it.mask)?,
                reference: it.reference.as_deref().map(io::read_png).transpose()?,
            })
        })
        .collect::<ServiceResult<Vec<_>>>()?;
    let mut backend = backend::open(&sweep.base.backend)?;
    let mut rows = Vec::new();
    for item in &loaded {
        let dilated = item.mask.dilate(sweep.base.dilate);
        let background = PixelMask::from_fn(dilated.width(), dilated.height(), |x, y| !dilated.get(x, y));
        for &strategy in sweep.strategies {
            for &reference in sweep.references {
                let config = RemovalConfig {
                    strategy,
                    reference,
                    ..sweep.base.clone()
                };
                let job_id = format!("{}-{strategy}-{reference}", item.name);
                let out = attnerase_core::orchestrator::run_removal(
                    backend.as_mut(),
                    &item.image,
                    &item.mask,
                    &config,
                    &job_id,
                )?;
                let key = (item.name.clone(), strategy.to_string(), reference.to_string());
                rows.push(EvalRow {
                    psnr_full: psnr(&out.image, &item.image, None)?,
                    psnr_background: psnr(&out.image, &item.image, Some(&background))?,
                    mask_coverage: dilated.coverage(),
                    psnr_reference: item
                        .reference
                        .as_ref()
                        .map(|r| psnr(&out.image, r, None))
                        .transpose()?,
                    external: sweep
                        .external
                        .and_then(|m| m.get(&key))
                        .cloned()
                        .unwrap_or_default(),
                    image: key.0,
                    strategy: key.1,
                    reference: key.2,
                });
            }
        }
    }
    Ok(EvalReport { rows })
}

/// Writes `ablation.csv` and `ablation.json` into `out_dir`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> ServiceResult<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| ServiceError::io(out_dir, e))?;
    let csv_path = out_dir.join("ablation.csv");
    let json_path = out_dir.join("ablation.json");
    io::write_bytes(&csv_path, report.to_csv()?.as_bytes())?;
    io::write_bytes(&json_path, report.to_json().as_bytes())?;
    Ok((csv_path, json_path))
}
