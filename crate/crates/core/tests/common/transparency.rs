//! Wrapper transparency: ProfilesSpawner(P) against the spawner P describes,
//! driven through the same scenario on separate mock schedulers.

use std::sync::Arc;

use gate_core::batch::{builtin_adapters, BatchSpawner, CommandRunner, RecordingRunner, TemplateVars};
use gate_core::model::Profile;
use gate_core::profiles::{apply_selection, OptionsSelection, ProfileCatalog, ProfilesSpawner};
use gate_core::spawner::{LocalSpawner, LocalSpawnerConfig, Spawner, SpawnerRegistry};
use mocksched::{Dialect, MockScheduler};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};

use super::{frozen_sched, request, MockRunner};

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Poll,
    Advance(u8),
    Callback(u16),
    Reload,
    Stop,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Poll),
        2 => (1u8..6).prop_map(Op::Advance),
        1 => (20000u16..60000).prop_map(Op::Callback),
        1 => Just(Op::Reload),
        1 => Just(Op::Stop),
    ]
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub delay: u8,
    pub ops: Vec<Op>,
}

/// `n` scenarios from a seeded generator; each ends with a stop and a poll.
pub fn scenarios(seed: u8, n: usize) -> Vec<Scenario> {
    let mut runner = TestRunner::new_with_rng(
        Config::default(),
        proptest::test_runner::TestRng::from_seed(
            proptest::test_runner::RngAlgorithm::ChaCha,
            &[seed; 32],
        ),
    );
    let strategy = (0u8..8, prop::collection::vec(op_strategy(), 2..12));
    (0..n)
        .map(|_| {
            let (delay, mut ops) = strategy.new_tree(&mut runner).unwrap().current();
            ops.push(Op::Stop);
            ops.push(Op::Poll);
            Scenario { delay, ops }
        })
        .collect()
}

/// External command trace plus the debug rendering of every result.
#[derive(Debug, PartialEq)]
pub struct Observation {
    pub trace: Vec<Vec<String>>,
    pub outcomes: Vec<String>,
}

fn recording(sched: &MockScheduler, profile: &Profile) -> Arc<RecordingRunner<MockRunner>> {
    let dialect = match profile.config.get("adapter") {
        Some(a) => a.to_string().parse().unwrap(),
        None => Dialect::Torque,
    };
    Arc::new(RecordingRunner::new(MockRunner {
        sched: sched.clone(),
        dialect,
    }))
}

fn registry(runner: Arc<dyn CommandRunner>) -> Arc<SpawnerRegistry> {
    super::registry(runner)
}

/// Build the spawner a profile describes without going through the
/// registry.
fn direct(profile: &Profile, runner: Arc<dyn CommandRunner>) -> Box<dyn Spawner> {
    match profile.spawner_kind.as_str() {
        "batch" => {
            let name = profile.config["adapter"].to_string();
            let adapter = builtin_adapters().into_iter().find(|a| a.name() == name).unwrap();
            Box::new(
                BatchSpawner::new(Arc::new(adapter), runner, &profile.config, &TemplateVars::new(), None).unwrap(),
            )
        }
        "local" => Box::new(LocalSpawner::new(LocalSpawnerConfig::from_config(&profile.config).unwrap())),
        other => panic!("no direct construction for {other}"),
    }
}

fn drive(
    spawner: &mut Box<dyn Spawner>,
    fresh: &dyn Fn() -> Box<dyn Spawner>,
    sched: &MockScheduler,
    scenario: &Scenario,
) -> Vec<String> {
    let mut outcomes = vec![format!("{:?}", spawner.start(&request("alice")).map_err(|e| e.to_string()))];
    for op in &scenario.ops {
        let outcome = match op {
            Op::Poll => format!("{:?}", spawner.poll().map_err(|e| e.to_string())),
            Op::Advance(s) => format!("{:?}", sched.advance(*s as f64).map_err(|e| e.to_string())),
            Op::Callback(port) => {
                spawner.record_address("mocknode1", *port);
                "callback".to_string()
            }
            Op::Reload => {
                let state = spawner.get_state();
                let mut next = fresh();
                let r = next.load_state(&state).map_err(|e| e.to_string());
                *spawner = next;
                format!("{r:?}")
            }
            Op::Stop => format!("{:?}", spawner.stop().map_err(|e| e.to_string())),
        };
        outcomes.push(outcome);
    }
    outcomes
}

fn observe(profile: &Profile, scenario: &Scenario, wrapped: bool) -> Observation {
    let (_dir, sched) = frozen_sched();
    sched.set_delay(scenario.delay as f64).unwrap();
    let runner = recording(&sched, profile);
    let dyn_runner: Arc<dyn CommandRunner> = runner.clone();
    let outcomes = if wrapped {
        let reg = registry(dyn_runner);
        let catalog = ProfileCatalog::new(vec![profile.clone()], profile.id.clone()).unwrap();
        let (_, descriptor) = apply_selection(&catalog, &OptionsSelection::profile(&profile.id)).unwrap();
        let mut sp: Box<dyn Spawner> = Box::new(ProfilesSpawner::with_descriptor(reg.clone(), descriptor).unwrap());
        let fresh = move || -> Box<dyn Spawner> { Box::new(ProfilesSpawner::new(reg.clone())) };
        drive(&mut sp, &fresh, &sched, scenario)
    } else {
        let mut sp = direct(profile, dyn_runner.clone());
        let p = profile.clone();
        let fresh = move || direct(&p, dyn_runner.clone());
        drive(&mut sp, &fresh, &sched, scenario)
    };
    Observation {
        trace: runner.trace(),
        outcomes,
    }
}

/// Run one scenario through the wrapper and directly; returns both
/// observations (wrapped first).
pub fn compare(profile: &Profile, scenario: &Scenario) -> (Observation, Observation) {
    (observe(profile, scenario, true), observe(profile, scenario, false))
}
