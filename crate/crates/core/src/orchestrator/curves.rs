//! Presence-curve log: one JSON object per line,
//! `{job_id, timestep, layer_id, token_index | "region", presence}`.

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::attention::LayerId;
use crate::error::{Error, Result};

/// A token index, or the whole masked region when per-token logging is capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenRef {
    Token(usize),
    Region,
}

impl Serialize for TokenRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TokenRef::Token(i) => s.serialize_u64(*i as u64),
            TokenRef::Region => s.serialize_str("region"),
        }
    }
}

impl<'de> Deserialize<'de> for TokenRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(TokenRef::Token(i)),
            Raw::Name(s) if s == "region" => Ok(TokenRef::Region),
            Raw::Name(s) => Err(de::Error::custom(format!("invalid token_index `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub job_id: String,
    pub timestep: usize,
    pub layer_id: LayerId,
    pub token_index: TokenRef,
    pub presence: f64,
}

pub fn to_jsonl(records: &[CurveRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("curve records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<CurveRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidInput(format!("curve log line {}: {e}", n + 1)))
        })
        .collect()
}
