//! JSON Lines trace files: one header line, then one record per line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::counters::CounterEvent;
use crate::platform::CoreId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "V")]
    Victim,
    #[serde(rename = "A")]
    Adversary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub scenario: String,
    pub rep: u32,
    pub core: CoreId,
    pub role: Role,
    pub iter: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub ctr: BTreeMap<CounterEvent, u64>,
}

impl TraceRecord {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

/// Offset between cores' views of the shared clock, measured once per
/// campaign by a ping-pong handshake. Recorded, not corrected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockSkew {
    /// Largest |offset| against the reference core.
    pub max_abs_offset_ns: u64,
    /// Smallest round trip seen across all pairs.
    pub min_round_trip_ns: u64,
    pub offsets_ns: BTreeMap<CoreId, i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub tool_version: String,
    pub config_hash: String,
    pub topology_hash: String,
    pub scenario: String,
    pub rep: u32,
    pub clock_domain: String,
    pub clock_skew: ClockSkew,
    /// Topology core to OS CPU.
    pub core_map: BTreeMap<CoreId, usize>,
    pub valid: bool,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize)]
struct HeaderLineRef<'a> {
    header: &'a TraceHeader,
}

#[derive(Deserialize)]
struct HeaderLine {
    header: TraceHeader,
}

impl RunTrace {
    pub fn victim_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.role == Role::Victim)
    }

    pub fn adversary_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.role == Role::Adversary)
    }

    pub fn victim_durations(&self) -> Vec<u64> {
        self.victim_records().map(TraceRecord::duration_ns).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &HeaderLineRef { header: &self.header })?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, HarnessError> {
        let mut lines = input.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| HarnessError::Trace("empty trace file".into()))?;
        let first = first.map_err(|e| HarnessError::Trace(e.to_string()))?;
        let header: HeaderLine =
            serde_json::from_str(&first).map_err(|e| HarnessError::Trace(format!("line 1: header: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| HarnessError::Trace(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TraceRecord =
                serde_json::from_str(&line).map_err(|e| HarnessError::Trace(format!("line {}: {e}", i + 1)))?;
            if r.end_ns <= r.start_ns {
                return Err(HarnessError::Trace(format!(
                    "line {}: end_ns {} is not after start_ns {}",
                    i + 1,
                    r.end_ns,
                    r.start_ns
                )));
            }
            records.push(r);
        }
        Ok(RunTrace {
            header: header.header,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> TraceHeader {
        TraceHeader {
            tool_version: "0.1.0".into(),
            config_hash: "abc".into(),
            topology_hash: "def".into(),
            scenario: "s".into(),
            rep: 0,
            clock_domain: "CLOCK_MONOTONIC".into(),
            clock_skew: ClockSkew::default(),
            core_map: [(0, 0)].into_iter().collect(),
            valid: true,
            flags: vec![],
            error: None,
        }
    }

    #[test]
    fn record_line_format() {
        let r = TraceRecord {
            scenario: "s".into(),
            rep: 1,
            core: 2,
            role: Role::Adversary,
            iter: 3,
            start_ns: 10,
            end_ns: 20,
            ctr: [(CounterEvent::LlcMisses, 5)].into_iter().collect(),
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"scenario":"s","rep":1,"core":2,"role":"A","iter":3,"start_ns":10,"end_ns":20,"ctr":{"LLC_MISSES":5}}"#
        );
    }

    #[test]
    fn rejects_reversed_timestamps() {
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&serde_json::json!({"header": header()})).unwrap(),
            r#"{"scenario":"s","rep":0,"core":0,"role":"V","iter":0,"start_ns":9,"end_ns":9,"ctr":{}}"#
        );
        assert!(RunTrace::read_jsonl(text.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(spans in prop::collection::vec((0u64..1 << 40, 1u64..1 << 20, any::<bool>()), 0..50)) {
            let records = spans
                .iter()
                .enumerate()
                .map(|(i, &(start, len, victim))| TraceRecord {
                    scenario: "s".into(),
                    rep: 0,
                    core: if victim { 0 } else { 1 },
                    role: if victim { Role::Victim } else { Role::Adversary },
                    iter: i as u64,
                    start_ns: start,
                    end_ns: start + len,
                    ctr: BTreeMap::new(),
                })
                .collect();
            let t = RunTrace { header: header(), records };
            let back = RunTrace::read_jsonl(t.to_jsonl().as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
