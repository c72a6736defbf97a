//! Brute-force check of the lifecycle transition function against a table
//! written out pair by pair.

use std::collections::HashMap;

use gate_core::model::{LifecycleEvent as E, LifecyclePhase as P};
use gate_core::session_transition;

pub fn table() -> HashMap<(P, E), P> {
    let mut t = HashMap::new();
    t.insert((P::Idle, E::SpawnRequested), P::Submitting);
    t.insert((P::Submitting, E::Submitted), P::Pending);
    t.insert((P::Pending, E::SchedulerRunning), P::Starting);
    t.insert((P::Starting, E::CallbackReceived), P::Running);
    t.insert((P::Stopping, E::ExitObserved), P::Stopped);
    t.insert((P::Running, E::ExitObserved), P::Failed);
    t.insert((P::Pending, E::Timeout), P::Failed);
    t.insert((P::Starting, E::Timeout), P::Failed);
    for p in [P::Idle, P::Submitting, P::Pending, P::Starting, P::Running, P::Stopping] {
        t.insert((p, E::StopRequested), P::Stopping);
        t.insert((p, E::Error), P::Failed);
    }
    t
}

#[derive(Debug, Default)]
pub struct GridReport {
    pub pairs: usize,
    pub legal: usize,
    pub mismatches: Vec<String>,
}

pub fn run_grid() -> GridReport {
    let table = table();
    let mut report = GridReport::default();
    for p in P::ALL {
        for e in E::ALL {
            report.pairs += 1;
            match (session_transition(p, e), table.get(&(p, e))) {
                (Ok(next), Some(expected)) if next == *expected => report.legal += 1,
                (Err(err), None) if (err.phase, err.event) == (p, e) => {}
                (got, want) => report.mismatches.push(format!("{p:?} + {e:?}: got {got:?}, table says {want:?}")),
            }
        }
    }
    if report.legal != table.len() {
        report.mismatches.push(format!("{} legal pairs, table has {}", report.legal, table.len()));
    }
    report
}
