//! Seeded random scenarios over the voxel world.

use std::str::FromStr;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use sara_core::protocol::{Convention, DeviceProfile, StateFormat};
use serde_json::{json, Value};

use crate::scenario::{ClientSpec, Expectations, Op, RoleSpec, Scenario, Step, TransportKind, World};
use crate::voxel::{cube_id, Face, Tool, TERRAIN_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Unconstrained,
    Turn,
    Ownership,
    Layer,
    Hierarchy,
    /// Two distinct kinds composed.
    Mixed,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "unconstrained" => Self::Unconstrained,
            "turn" => Self::Turn,
            "ownership" => Self::Ownership,
            "layer" => Self::Layer,
            "hierarchy" => Self::Hierarchy,
            "mixed" => Self::Mixed,
            other => return Err(format!("unknown model `{other}` (unconstrained, turn, ownership, layer, hierarchy, mixed)")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    /// Total clients including the provider, 2 to 4.
    pub clients: usize,
    pub ops: usize,
    pub model: ModelKind,
    pub seed: u64,
}

const BLOCKS: [&str; 4] = ["grass", "stone", "sand", "dirt"];
const PROVIDER: &str = "provider";

fn model_json(kind: ModelKind, consumers: &[String], rng: &mut StdRng) -> Vec<Value> {
    let single = |k: ModelKind, rng: &mut StdRng| -> Value {
        match k {
            ModelKind::Unconstrained | ModelKind::Mixed => json!({"kind": "unconstrained"}),
            ModelKind::Turn => json!({"kind": "turn", "order": consumers, "holder": consumers[0]}),
            ModelKind::Ownership => {
                let mode = if rng.gen_bool(0.5) { "OWNER_ONLY" } else { "ALL_VISIBLE" };
                json!({"kind": "ownership", "visibility_mode": mode})
            }
            ModelKind::Layer => json!({
                "kind": "layer",
                "layers": {"L1": [TERRAIN_ID], "L2": []},
                "access": {PROVIDER: ["L1", "L2"], consumers[0].as_str(): ["L1"]}
            }),
            ModelKind::Hierarchy => {
                let mut parent = serde_json::Map::new();
                for (i, c) in consumers.iter().enumerate() {
                    let up = if i == 0 { PROVIDER.to_string() } else { consumers[(i - 1) / 2].clone() };
                    parent.insert(c.clone(), Value::String(up));
                }
                json!({"kind": "hierarchy", "tree": {"root": PROVIDER, "parent": parent}})
            }
        }
    };
    match kind {
        ModelKind::Unconstrained => vec![],
        ModelKind::Mixed => {
            let kinds = [ModelKind::Turn, ModelKind::Ownership, ModelKind::Layer, ModelKind::Hierarchy];
            let pair: Vec<_> = kinds.choose_multiple(rng, 2).copied().collect();
            pair.into_iter().map(|k| single(k, rng)).collect()
        }
        k => vec![single(k, rng)],
    }
}

fn random_cube(rng: &mut StdRng, world: &World) -> String {
    // mostly the floor, sometimes one layer up or one step past the edge
    let edge = |n: u32, rng: &mut StdRng| if rng.gen_bool(0.05) { n as i64 } else { rng.gen_range(0..n as i64) };
    let (x, y) = (edge(world.size[0], rng), edge(world.size[1], rng));
    let z = if rng.gen_bool(0.8) { rng.gen_range(0..world.height as i64) } else { world.height as i64 };
    cube_id([x, y, z])
}

fn random_op(rng: &mut StdRng, sc: &Scenario, kinds: &[&str], names: &[String]) -> Op {
    let consumer = || names.iter().filter(|n| *n != PROVIDER).cloned().collect::<Vec<_>>();
    let roll = rng.gen_range(0..100);
    let node = random_cube(rng, &sc.world);
    let block = BLOCKS.choose(rng).expect("non-empty").to_string();
    let model_op = |rng: &mut StdRng| -> Option<Op> {
        let kind = *kinds.choose(rng)?;
        let who = consumer().choose(rng).cloned()?;
        Some(match kind {
            "turn" if rng.gen_bool(0.5) => Op::RequestTurn,
            "turn" => Op::PassTurn { to: rng.gen_bool(0.5).then(|| names.choose(rng).cloned()).flatten() },
            "ownership" => Op::Transfer { node: random_cube(rng, &sc.world), to: who },
            "layer" if rng.gen_bool(0.7) => Op::Grant { layer: ["L1", "L2"].choose(rng)?.to_string(), user: who },
            "layer" => Op::Revoke { layer: "L1".into(), user: who },
            "hierarchy" => Op::Permit { user: who, nodes: (0..rng.gen_range(1..6)).map(|_| random_cube(rng, &sc.world)).collect() },
            _ => return None,
        })
    };
    match roll {
        0..=44 => {
            let tool = match rng.gen_range(0..10) {
                0..=1 => Some(Tool::Shovel),
                2..=4 => Some(Tool::Brush(block)),
                5..=8 => Some(Tool::Adder(block)),
                _ => None,
            };
            Op::Click { node, face: *Face::ALL.choose(rng).expect("six faces"), tool }
        }
        45..=49 => Op::Drag { node, delta: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0] },
        50..=61 => Op::Paint { node, block },
        62..=67 => {
            let [x, y, z] = [rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64, rng.gen_range(0..3) as f64];
            Op::Nudge { node, position: [x + rng.gen_range(-0.25..0.25), y, z] }
        }
        68..=73 => {
            let p = [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(1..3)];
            let parent = if rng.gen_bool(0.9) { TERRAIN_ID.to_string() } else { "root".to_string() };
            Op::Add { parent, node: cube_id(p), position: p.map(|c| c as f64), block: Some(block) }
        }
        74..=76 => Op::Remove { node },
        _ => model_op(rng).unwrap_or(Op::Paint { node, block }),
    }
}

/// A scenario with `opts.clients` clients (one provider) and `opts.ops` timeline events.
pub fn generate(opts: &GenOptions) -> Scenario {
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let n = opts.clients.clamp(2, 4);
    let consumers: Vec<String> = (1..n).map(|i| format!("c{i}")).collect();
    let mut names = vec![PROVIDER.to_string()];
    names.extend(consumers.iter().cloned());

    let models = model_json(opts.model, &consumers, &mut rng);
    let strategy = ["LAST_WRITER_WINS", "MERGE_MEAN", "REJECT_SECOND"].choose(&mut rng).expect("three");
    let session = serde_json::from_value(json!({"models": models, "conflict_strategy": strategy})).expect("generated settings parse");

    let late = n > 2 && rng.gen_bool(0.3);
    let profiles = [DeviceProfile::DesktopPointer, DeviceProfile::HandheldTouch, DeviceProfile::HmdGesture];
    let clients = names
        .iter()
        .enumerate()
        .map(|(i, name)| ClientSpec {
            name: name.clone(),
            role: if i == 0 { RoleSpec::Provider } else { RoleSpec::Consumer },
            transport: if rng.gen_bool(0.5) { TransportKind::Tcp } else { TransportKind::Ws },
            convention: if rng.gen_bool(0.5) { Convention::RightHanded } else { Convention::LeftHanded },
            profile: *profiles.choose(&mut rng).expect("three"),
            format: StateFormat::CustomJson,
            late: late && i == n - 1,
        })
        .collect();

    let mut sc = Scenario {
        name: format!("gen-{}-{}", opts.seed, format!("{:?}", opts.model).to_lowercase()),
        session_id: "voxel".into(),
        session,
        world: World::default(),
        clients,
        timeline: Vec::new(),
        expect: Expectations::default(),
    };
    let kinds: Vec<&str> = models_kinds(&sc);
    let late_name = late.then(|| names[n - 1].clone());
    let join_at = opts.ops / 2;
    let mut at = 0u64;
    for i in 0..opts.ops {
        at += rng.gen_range(0..60);
        if late_name.is_some() && i == join_at {
            sc.timeline.push(Step { at_ms: at, client: late_name.clone().unwrap(), op: Op::Join });
        }
        let pool: Vec<String> = names.iter().filter(|c| late_name.as_ref() != Some(*c) || i >= join_at).cloned().collect();
        let op = random_op(&mut rng, &sc, &kinds, &names);
        let client = match &op {
            // model control mostly comes from the top of the tree or the current owner
            Op::Grant { .. } | Op::Revoke { .. } | Op::Permit { .. } | Op::Transfer { .. } if rng.gen_bool(0.6) => PROVIDER.to_string(),
            _ => pool.iter().filter(|c| *c != PROVIDER).cloned().collect::<Vec<_>>().choose(&mut rng).cloned().unwrap_or_else(|| PROVIDER.into()),
        };
        sc.timeline.push(Step { at_ms: at, client, op });
    }
    sc.validate().expect("generated scenarios are valid");
    sc
}

fn models_kinds(sc: &Scenario) -> Vec<&'static str> {
    sc.session.models.iter().map(|m| m.kind()).filter(|k| *k != "unconstrained").collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenario() {
        for model in ["unconstrained", "turn", "ownership", "layer", "hierarchy", "mixed"] {
            let o = GenOptions { clients: 4, ops: 120, model: model.parse().unwrap(), seed: 9 };
            let (a, b) = (generate(&o), generate(&o));
            assert_eq!(a, b);
            assert_eq!(a.timeline.iter().filter(|s| s.op.sends_event()).count(), 120);
            assert_eq!(Scenario::from_json(&a.to_json()).unwrap(), a);
        }
    }

    #[test]
    fn mixed_composes_two_kinds() {
        let sc = generate(&GenOptions { clients: 3, ops: 10, model: ModelKind::Mixed, seed: 4 });
        let kinds = models_kinds(&sc);
        assert_eq!(kinds.len(), 2);
        assert_ne!(kinds[0], kinds[1]);
    }
}
