use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Stage;

/// One line of the append-only project log. Stage transitions carry
/// `iteration` and `stage`; other events leave `stage` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub at: String,
    pub event: String,
    pub iteration: Option<usize>,
    pub stage: Option<Stage>,
    pub detail: Value,
}

/// Replays the log into the sequence of stages each iteration went through.
pub fn stage_history(events: &[AuditEvent]) -> BTreeMap<usize, Vec<Stage>> {
    let mut history: BTreeMap<usize, Vec<Stage>> = BTreeMap::new();
    for e in events {
        if let (Some(i), Some(stage)) = (e.iteration, e.stage) {
            history.entry(i).or_default().push(stage);
        }
    }
    history
}
