use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Activity, CounterBackend, CounterError, CounterEvent, CounterHandle, Reading};
use crate::platform::CoreId;

/// How modeled counters respond to a region's activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// Counts exactly the reported activity.
    #[default]
    Faithful,
    /// Counts half of it.
    Undercount,
    /// Counts every event twice.
    Overcount,
    /// Never moves.
    StuckAtZero,
    /// Only scripted values; anything else is a model error.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub core: CoreId,
    pub event: CounterEvent,
    /// Successive raw readings.
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedModel {
    pub mode: SimulationMode,
    pub counter_bits: u32,
    /// Events the simulated platform does not expose.
    pub unmapped: BTreeSet<CounterEvent>,
    /// Scripted readings; these take precedence over the modeled counters.
    pub script: Vec<ScriptEntry>,
}

impl Default for SimulatedModel {
    fn default() -> Self {
        SimulatedModel {
            mode: SimulationMode::Faithful,
            counter_bits: 48,
            unmapped: [CounterEvent::BusCycles].into_iter().collect(),
            script: Vec::new(),
        }
    }
}

impl SimulatedModel {
    pub fn parse(text: &str) -> Result<Self, CounterError> {
        let model: SimulatedModel =
            serde_json::from_str(text).map_err(|e| CounterError::Config(format!("simulated counter script: {e}")))?;
        if model.counter_bits == 0 || model.counter_bits > 64 {
            return Err(CounterError::Config(format!(
                "counter_bits {} outside 1..=64",
                model.counter_bits
            )));
        }
        Ok(model)
    }

    fn scale(&self, n: u64) -> u64 {
        match self.mode {
            SimulationMode::Faithful | SimulationMode::Scripted => n,
            SimulationMode::Undercount => n / 2,
            SimulationMode::Overcount => n.saturating_mul(2),
            SimulationMode::StuckAtZero => 0,
        }
    }
}

#[derive(Debug, Default)]
struct SimState {
    scripted: BTreeMap<(CoreId, CounterEvent), VecDeque<u64>>,
    modeled: BTreeMap<(CoreId, CounterEvent), u64>,
}

/// Deterministic backend driven by a [`SimulatedModel`]. Handles share one
/// state behind a mutex, so several streams may read concurrently.
#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    model: Arc<SimulatedModel>,
    state: Arc<Mutex<SimState>>,
}

impl SimulatedBackend {
    pub fn new(model: SimulatedModel) -> Self {
        let scripted = model
            .script
            .iter()
            .map(|e| ((e.core, e.event), e.values.iter().copied().collect()))
            .collect();
        SimulatedBackend {
            model: Arc::new(model),
            state: Arc::new(Mutex::new(SimState {
                scripted,
                modeled: BTreeMap::new(),
            })),
        }
    }

    pub fn model(&self) -> &SimulatedModel {
        &self.model
    }
}

impl CounterBackend for SimulatedBackend {
    fn name(&self) -> String {
        format!("simulated ({:?})", self.model.mode).to_lowercase()
    }

    fn open(&self, core: CoreId) -> Result<Box<dyn CounterHandle>, CounterError> {
        Ok(Box::new(SimulatedHandle {
            core,
            model: self.model.clone(),
            state: self.state.clone(),
        }))
    }
}

struct SimulatedHandle {
    core: CoreId,
    model: Arc<SimulatedModel>,
    state: Arc<Mutex<SimState>>,
}

impl CounterHandle for SimulatedHandle {
    fn observes(&self, event: CounterEvent) -> bool {
        !self.model.unmapped.contains(&event)
    }

    fn read(&mut self, event: CounterEvent) -> Result<Reading, CounterError> {
        if self.model.unmapped.contains(&event) {
            return Ok(Reading::Unmapped);
        }
        let mut state = self.state.lock().expect("simulated counter state poisoned");
        if let Some(queue) = state.scripted.get_mut(&(self.core, event)) {
            return queue
                .pop_front()
                .map(Reading::Value)
                .ok_or_else(|| CounterError::Model(format!("script for (core {}, {event}) is exhausted", self.core)));
        }
        if self.model.mode == SimulationMode::Scripted {
            return Err(CounterError::Model(format!(
                "no script for (core {}, {event})",
                self.core
            )));
        }
        let raw = *state.modeled.get(&(self.core, event)).unwrap_or(&0);
        let bits = self.model.counter_bits;
        Ok(Reading::Value(if bits >= 64 {
            raw
        } else {
            raw & ((1u64 << bits) - 1)
        }))
    }

    fn counter_bits(&self) -> u32 {
        self.model.counter_bits
    }

    fn advance(&mut self, activity: &Activity) {
        if self.model.mode == SimulationMode::Scripted {
            return;
        }
        let mut state = self.state.lock().expect("simulated counter state poisoned");
        for event in CounterEvent::ALL {
            let add = self.model.scale(activity.count(event));
            let slot = state.modeled.entry((self.core, event)).or_insert(0);
            *slot = slot.wrapping_add(add);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_script_file() {
        let m = SimulatedModel::parse(
            r#"{"mode": "scripted", "counter_bits": 32,
                "script": [{"core": 0, "event": "LOADS_RETIRED", "values": [0, 1000]}]}"#,
        )
        .unwrap();
        assert_eq!(m.mode, SimulationMode::Scripted);
        assert_eq!(m.script[0].values, vec![0, 1000]);
        assert!(SimulatedModel::parse(r#"{"counter_bits": 0}"#).is_err());
        assert!(SimulatedModel::parse(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn modeled_counters_wrap_at_width() {
        let b = SimulatedBackend::new(SimulatedModel {
            counter_bits: 8,
            ..SimulatedModel::default()
        });
        let mut h = b.open(0).unwrap();
        h.advance(&Activity {
            loads: 300,
            ..Activity::default()
        });
        assert_eq!(h.read(CounterEvent::LoadsRetired).unwrap(), Reading::Value(300 & 0xff));
    }

    #[test]
    fn handles_share_state_per_core() {
        let b = SimulatedBackend::new(SimulatedModel::default());
        let mut a = b.open(2).unwrap();
        let mut c = b.open(2).unwrap();
        a.advance(&Activity {
            stores: 7,
            ..Activity::default()
        });
        assert_eq!(c.read(CounterEvent::StoresRetired).unwrap(), Reading::Value(7));
        let mut other = b.open(3).unwrap();
        assert_eq!(other.read(CounterEvent::StoresRetired).unwrap(), Reading::Value(0));
    }
}
