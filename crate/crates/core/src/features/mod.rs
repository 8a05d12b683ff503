//! Impression/request data model, hashed embedding tables, JSON-lines
//! ingestion and the planted-signal synthetic log generator.

pub mod embedding;
pub mod jsonl;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embedding::{bucket_of, EmbeddingTable, Embeddings};
pub use jsonl::{load_jsonl, read_jsonl, write_jsonl, ErrorPolicy, JsonlReader};
pub use synth::{generate_synthetic, SynthConfig};

pub const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorType {
    Impression,
    Click,
    AddToCart,
    Purchase,
}

impl BehaviorType {
    pub const ALL: [BehaviorType; 4] = [
        BehaviorType::Impression,
        BehaviorType::Click,
        BehaviorType::AddToCart,
        BehaviorType::Purchase,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Default intent rank; higher means stronger user intent.
    pub fn intent_rank(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorType::Impression => "impression",
            BehaviorType::Click => "click",
            BehaviorType::AddToCart => "add_to_cart",
            BehaviorType::Purchase => "purchase",
        }
    }
}

impl fmt::Display for BehaviorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One user behavior. The side information (category, price bucket) is the
/// minimal set the synthetic schema carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub item: String,
    #[serde(rename = "cat")]
    pub category: String,
    pub price_bucket: u32,
    #[serde(rename = "ts", default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    #[serde(rename = "type")]
    pub type_tag: BehaviorType,
    pub events: Vec<Event>,
}

impl BehaviorSequence {
    pub fn new(type_tag: BehaviorType, events: Vec<Event>) -> Self {
        Self { type_tag, events }
    }

    /// The most recent `max_len` events.
    pub fn recent(&self, max_len: usize) -> &[Event] {
        let n = self.events.len();
        &self.events[n.saturating_sub(max_len)..]
    }

    fn validate(&self) -> Result<(), String> {
        let mut last = i64::MIN;
        for (i, e) in self.events.iter().enumerate() {
            if let Some(ts) = e.timestamp {
                if ts < 0 {
                    return Err(format!("{} event {i}: negative timestamp", self.type_tag));
                }
                if ts < last {
                    return Err(format!(
                        "{} event {i}: timestamps not ascending ({ts} after {last})",
                        self.type_tag
                    ));
                }
                last = ts;
            }
        }
        Ok(())
    }
}

/// A scalar feature value. Every value is hashed through its string form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl FeatureValue {
    pub fn key(&self) -> String {
        match self {
            FeatureValue::Int(v) => v.to_string(),
            FeatureValue::Float(v) => v.to_string(),
            FeatureValue::Bool(v) => v.to_string(),
            FeatureValue::Str(s) => s.clone(),
        }
    }
}

impl From<&str> for FeatureValue {
    fn from(s: &str) -> Self {
        FeatureValue::Str(s.to_owned())
    }
}

impl From<String> for FeatureValue {
    fn from(s: String) -> Self {
        FeatureValue::Str(s)
    }
}

impl From<i64> for FeatureValue {
    fn from(v: i64) -> Self {
        FeatureValue::Int(v)
    }
}

pub type FeatureMap = BTreeMap<String, FeatureValue>;

/// Hash key used for features missing from a record.
pub const MISSING_KEY: &str = "<missing>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(default)]
    pub features: FeatureMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_seq: Option<BehaviorSequence>,
    pub click: u8,
    pub conv: u8,
}

impl CandidateRecord {
    pub fn clicked(&self) -> bool {
        self.click == 1
    }

    pub fn converted(&self) -> bool {
        self.conv == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub user_id: String,
    pub ts: i64,
    /// Day index used for daily metrics; derived from `ts` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<u32>,
    #[serde(rename = "user", default)]
    pub user_profile_features: FeatureMap,
    #[serde(rename = "context", default)]
    pub context_features: FeatureMap,
    #[serde(default)]
    pub sequences: Vec<BehaviorSequence>,
    pub candidates: Vec<CandidateRecord>,
}

impl Request {
    pub fn day(&self) -> u32 {
        self.day
            .unwrap_or_else(|| (self.ts.max(0) / MS_PER_DAY) as u32)
    }

    pub fn sequence(&self, t: BehaviorType) -> Option<&BehaviorSequence> {
        self.sequences.iter().find(|s| s.type_tag == t)
    }

    /// Checks the record-level invariants enforced at ingestion.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Record { line: 0, message: m });
        if self.candidates.is_empty() {
            return fail(format!("request {}: no candidates", self.request_id));
        }
        for s in &self.sequences {
            if let Err(m) = s.validate() {
                return fail(format!("request {}: {m}", self.request_id));
            }
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.click > 1 || c.conv > 1 {
                return fail(format!("request {} candidate {i}: labels must be 0 or 1", self.request_id));
            }
            if c.conv > c.click {
                return fail(format!(
                    "request {} candidate {i}: conversion without click",
                    self.request_id
                ));
            }
            if let Some(s) = &c.sim_seq {
                if let Err(m) = s.validate() {
                    return fail(format!("request {} candidate {i} sim_seq: {m}", self.request_id));
                }
            }
        }
        Ok(())
    }
}

/// Where a non-sequential feature is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureSource {
    User,
    Context,
    Item,
}

/// A qualified non-sequential feature name such as `user.age` or `item.cat`.
///
/// The embedding table is named by the part after the dot, so `item.cat`
/// shares the `cat` table with behavior events.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureRef {
    pub qualified: String,
    pub source: FeatureSource,
    pub name: String,
}

impl FeatureRef {
    pub fn parse(qualified: &str) -> Result<Self> {
        let (src, name) = qualified
            .split_once('.')
            .ok_or_else(|| Error::config(format!("feature `{qualified}` must be `<source>.<name>`")))?;
        let source = match src {
            "user" => FeatureSource::User,
            "context" => FeatureSource::Context,
            "item" => FeatureSource::Item,
            other => {
                return Err(Error::config(format!(
                    "feature `{qualified}`: unknown source `{other}` (expected user, context or item)"
                )))
            }
        };
        if name.is_empty() {
            return Err(Error::config(format!("feature `{qualified}` has an empty name")));
        }
        Ok(Self {
            qualified: qualified.to_owned(),
            source,
            name: name.to_owned(),
        })
    }

    pub fn table(&self) -> &str {
        &self.name
    }

    pub fn key(&self, request: &Request, candidate: &CandidateRecord) -> String {
        let map = match self.source {
            FeatureSource::User => &request.user_profile_features,
            FeatureSource::Context => &request.context_features,
            FeatureSource::Item => &candidate.features,
        };
        map.get(&self.name)
            .map(FeatureValue::key)
            .unwrap_or_else(|| MISSING_KEY.to_owned())
    }
}

/// Embedding tables used for every behavior event.
pub const EVENT_TABLES: [&str; 3] = ["item", "cat", "price_bucket"];
