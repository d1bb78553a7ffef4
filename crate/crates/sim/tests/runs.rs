//! End-to-end runs of generated and bundled scenarios.

use std::path::Path;

use sara_sim::gen::{generate, GenOptions, ModelKind};
use sara_sim::scenario::TransportKind;
use sara_sim::{replay, run, RunOptions, Scenario};

fn scenario(model: ModelKind, seed: u64, ops: usize) -> Scenario {
    generate(&GenOptions { clients: 3, ops, model, seed })
}

#[tokio::test]
async fn same_seed_gives_the_same_report() {
    let sc = scenario(ModelKind::Mixed, 21, 80);
    let opts = RunOptions { seed: 21, ..RunOptions::default() };
    let a = run(&sc, &opts).await.unwrap();
    let b = run(&sc, &opts).await.unwrap();
    assert!(a.passed, "{:?}", a.failures());
    assert_eq!(a.normalized().to_json(), b.normalized().to_json());
}

#[tokio::test]
async fn transport_does_not_change_the_outcome() {
    let sc = scenario(ModelKind::Ownership, 8, 80);
    let mut hashes = Vec::new();
    for t in [TransportKind::Tcp, TransportKind::Ws] {
        let r = run(&sc, &RunOptions { transport: Some(t), ..RunOptions::default() }).await.unwrap();
        assert!(r.passed, "{t:?}: {:?}", r.failures());
        hashes.push((r.final_hash, r.final_revision, r.rejected_steps));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[tokio::test]
async fn empty_timeline_leaves_the_initial_grid() {
    let mut sc = scenario(ModelKind::Unconstrained, 3, 0);
    sc.timeline.clear();
    let r = run(&sc, &RunOptions::default()).await.unwrap();
    assert!(r.passed && r.converged, "{:?}", r.failures());
    assert!(r.steps.is_empty());
    assert_eq!(r.setup.accepted, r.setup.events);
    assert_eq!(r.final_revision, r.setup.events as u64);
    assert!(r.oracle.server_state_match);
}

#[test]
fn oracle_replay_is_repeatable() {
    for model in [ModelKind::Turn, ModelKind::Layer, ModelKind::Hierarchy, ModelKind::Mixed] {
        let sc = scenario(model, 5, 150);
        assert_eq!(replay(&sc).unwrap(), replay(&sc).unwrap(), "{model:?}");
    }
}

#[tokio::test]
async fn bundled_scenarios_pass() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let sc = Scenario::load(&path).unwrap();
        let r = run(&sc, &RunOptions::default()).await.unwrap();
        assert!(r.passed, "{}: {:?}", path.display(), r.failures());
        seen += 1;
    }
    assert_eq!(seen, 3);
}
