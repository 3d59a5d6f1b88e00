//! PSNR and the evaluation table written by ablation sweeps.

use std::collections::BTreeMap;

use attnerase_core::tensor::{Image, PixelMask};
use attnerase_core::Error;
use serde::ser::Serializer;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::ServiceResult;

pub const MAX_VALUE: f64 = 255.0;

/// `10·log10(255² / MSE)` over the pixels where `region` is set (all pixels
/// when `None`). Identical images, and empty regions, give `+∞`.
pub fn psnr(a: &Image, b: &Image, region: Option<&PixelMask>) -> ServiceResult<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.width(), a.height()),
            actual: format!("{}x{}", b.width(), b.height()),
        }
        .into());
    }
    if let Some(r) = region {
        if (r.width(), r.height()) != (a.width(), a.height()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} region", a.width(), a.height()),
                actual: format!("{}x{}", r.width(), r.height()),
            }
            .into());
        }
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if region.is_some_and(|r| !r.get(x, y)) {
                continue;
            }
            for (p, q) in a.rgb(x, y).iter().zip(b.rgb(x, y)) {
                let d = *p as f64 - q as f64;
                sum += d * d;
            }
            count += 3;
        }
    }
    if sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sum / count as f64;
    Ok(10.0 * (MAX_VALUE * MAX_VALUE / mse).log10())
}

/// Formats dB values with `inf` for the identical-image sentinel.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid dB value `{s}`"))),
    }
}

mod opt_db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => ser_db(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(deserialize_with = "de_db")] f64);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub strategy: String,
    pub reference: String,
    /// Result vs input over the whole image.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_full: f64,
    /// Result vs input outside the dilated mask.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_background: f64,
    pub mask_coverage: f64,
    /// Result vs a supplied reference output, when the corpus has one.
    #[serde(with = "opt_db", default)]
    pub psnr_reference: Option<f64>,
    /// Columns merged in from an external metrics CSV.
    #[serde(default)]
    pub external: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn external_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.external.keys().cloned())
            .collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn to_csv(&self) -> ServiceResult<String> {
        let ext = self.external_columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "image",
            "strategy",
            "reference",
            "psnr_full",
            "psnr_background",
            "mask_coverage",
            "psnr_reference",
        ]
        .map(String::from)
        .to_vec();
        header.extend(ext.iter().cloned());
        let csv_err = |e: csv::Error| crate::ServiceError::Image(format!("writing CSV: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.image.clone(),
                r.strategy.clone(),
                r.reference.clone(),
                format_db(r.psnr_full),
                format_db(r.psnr_background),
                format!("{:.6}", r.mask_coverage),
                r.psnr_reference.map(format_db).unwrap_or_default(),
            ];
            rec.extend(ext.iter().map(|c| r.external.get(c).cloned().unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::ServiceError::Image(format!("writing CSV: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
