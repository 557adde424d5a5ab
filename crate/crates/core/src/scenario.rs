//! Reference scenes and seeded plan generation.
//!
//! Used by the test suites and handy for demos. Everything here is a pure
//! function of its arguments.

use crate::model::{EntityKind, Quantity, Triple};
use crate::rng::SplitMix64;
use crate::simworld::constants::{capacity_ul, graspable, POUR_NOISE_PPM};
use crate::simworld::{Action, Gripper, Plan, Scene, SceneEntity};

/// Resting height of the gripper at the start of every reference scene.
pub const HOME_Z_UM: i64 = 200_000;

/// An entity at `(x, 0, 0)`; containers start open and empty.
pub fn entity(id: &str, kind: EntityKind, x_um: i64, mass_g: i64) -> SceneEntity {
    let container = capacity_ul(kind) > 0;
    SceneEntity {
        id: id.into(),
        kind,
        pose: Triple::um(x_um, 0, 0),
        mass: Quantity::ug(mass_g * 1_000_000),
        is_container: container,
        is_open: container,
        fill: Quantity::ul(0),
        transparent: false,
    }
}

pub fn at(x_um: i64) -> Triple {
    Triple::um(x_um, 0, 0)
}

fn scene_of(entities: Vec<SceneEntity>, gripper: Triple) -> Scene {
    Scene {
        entities,
        gripper: Gripper {
            pose: gripper,
            holding: None,
        },
        spilled: Quantity::ul(0),
    }
}

/// A closed bottle holding 200 mL at x = 100 mm and an open, empty,
/// transparent cup at x = 300 mm.
pub fn lab_scene(bottle_mass_g: i64) -> Scene {
    let mut bottle = entity("bottle1", EntityKind::Bottle, 100_000, bottle_mass_g);
    bottle.fill = Quantity::ul(200_000);
    bottle.is_open = false;
    let mut cup = entity("cup1", EntityKind::Cup, 300_000, 50);
    cup.transparent = true;
    scene_of(vec![bottle, cup], Triple::um(0, 0, HOME_Z_UM))
}

/// Open the bottle, carry it over the cup, pour 50 mL, close it and put it back.
pub fn pour_plan() -> Plan {
    let mut plan = Plan::new(vec![
        Action::MoveTo { target: at(100_000) },
        Action::Open {
            entity: "bottle1".into(),
        },
        Action::Grasp {
            entity: "bottle1".into(),
        },
        Action::MoveTo { target: at(290_000) },
        Action::Pour {
            source: "bottle1".into(),
            destination: "cup1".into(),
            volume: Quantity::ul(50_000),
        },
        Action::Close {
            entity: "bottle1".into(),
        },
        Action::MoveTo { target: at(100_000) },
        Action::Release,
    ]);
    plan.task = "serve_drink".into();
    plan
}

/// Open bottle under the gripper, open cup, closed canister.
pub fn pour_ready_scene() -> Scene {
    let mut bottle = entity("bottle1", EntityKind::Bottle, 100_000, 300);
    bottle.fill = Quantity::ul(200_000);
    let mut canister = entity("canister1", EntityKind::Canister, 500_000, 400);
    canister.is_open = false;
    scene_of(
        vec![
            bottle,
            entity("cup1", EntityKind::Cup, 300_000, 50),
            canister,
        ],
        at(100_000),
    )
}

/// One action of each kind, all succeeding on [`pour_ready_scene`]: grasp,
/// move, pour, release, open, close.
pub fn six_action_plan() -> Plan {
    Plan::new(vec![
        Action::Grasp {
            entity: "bottle1".into(),
        },
        Action::MoveTo { target: at(290_000) },
        Action::Pour {
            source: "bottle1".into(),
            destination: "cup1".into(),
            volume: Quantity::ul(80_000),
        },
        Action::Release,
        Action::Open {
            entity: "canister1".into(),
        },
        Action::Close {
            entity: "bottle1".into(),
        },
    ])
}

/// A scene with 1-2 liquid sources (bottles, canisters), 1-2 empty cups,
/// sometimes a tray and sometimes an obstacle off the table line.
pub fn random_scene(seed: u64) -> Scene {
    let mut rng = SplitMix64::new(seed);
    let mut entities = Vec::new();
    let mut x = 100_000;
    let mut place = |rng: &mut SplitMix64| {
        let p = x;
        x += 100_000 + rng.range(0, 20) * 1_000;
        p
    };
    for i in 1..=rng.range(1, 2) {
        let kind = if rng.below(2) == 0 {
            EntityKind::Bottle
        } else {
            EntityKind::Canister
        };
        let id = format!("{}{i}", kind.name());
        let mut e = entity(&id, kind, place(&mut rng), rng.range(50, 400));
        e.fill = Quantity::ul(rng.range(150, capacity_ul(kind) / 1000 * 8 / 10) * 1000);
        e.is_open = rng.below(2) == 0;
        entities.push(e);
    }
    for i in 1..=rng.range(1, 2) {
        let mut e = entity(&format!("cup{i}"), EntityKind::Cup, place(&mut rng), rng.range(30, 120));
        e.is_open = rng.below(4) != 0;
        e.transparent = rng.below(2) == 0;
        entities.push(e);
    }
    if rng.below(2) == 0 {
        entities.push(entity("tray1", EntityKind::Tray, place(&mut rng), rng.range(100, 400)));
    }
    if rng.below(3) == 0 {
        let mut o = entity("obstacle1", EntityKind::Obstacle, rng.range(100, 500) * 1000, 1000);
        o.pose.y = 150_000;
        entities.push(o);
    }
    scene_of(entities, Triple::um(0, 0, HOME_Z_UM))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanStyle {
    /// Well-formed tasks that succeed in a fault-free run whatever the pour
    /// noise: pick-pour-return, relocations and lid toggles.
    Feasible,
    /// Uniformly drawn actions; many fail their preconditions.
    Arbitrary,
}

/// Seeded plan over the entities of `scene`.
pub fn random_plan(scene: &Scene, seed: u64, style: PlanStyle) -> Plan {
    let mut rng = SplitMix64::new(seed ^ 0x706c_616e);
    let actions = match style {
        PlanStyle::Feasible => feasible_actions(scene, &mut rng),
        PlanStyle::Arbitrary => arbitrary_actions(scene, &mut rng),
    };
    let mut plan = Plan::new(actions);
    plan.task = "tidy_up".into();
    plan
}

fn pick<'a, T>(rng: &mut SplitMix64, items: &'a [T]) -> &'a T {
    &items[rng.below(items.len() as u64) as usize]
}

/// Nominal state tracked while composing feasible tasks.
struct Tracker {
    entities: Vec<SceneEntity>,
    actions: Vec<Action>,
}

impl Tracker {
    fn get(&self, id: &str) -> &SceneEntity {
        self.entities.iter().find(|e| e.id == id).expect("tracked entity")
    }

    fn get_mut(&mut self, id: &str) -> &mut SceneEntity {
        self.entities.iter_mut().find(|e| e.id == id).expect("tracked entity")
    }

    fn ensure_open(&mut self, id: &str) {
        if !self.get(id).is_open {
            self.actions.push(Action::Open { entity: id.into() });
            self.get_mut(id).is_open = true;
        }
    }

    fn free_x(&self, rng: &mut SplitMix64) -> i64 {
        loop {
            let x = rng.range(8, 80) * 10_000;
            if self
                .entities
                .iter()
                .all(|e| (e.pose.x - x).abs() >= 50_000 || e.pose.y != 0)
            {
                return x;
            }
        }
    }
}

fn feasible_actions(scene: &Scene, rng: &mut SplitMix64) -> Vec<Action> {
    let sources: Vec<String> = scene
        .entities
        .iter()
        .filter(|e| matches!(e.kind, EntityKind::Bottle | EntityKind::Canister))
        .map(|e| e.id.clone())
        .collect();
    let cups: Vec<String> = scene
        .entities
        .iter()
        .filter(|e| e.kind == EntityKind::Cup)
        .map(|e| e.id.clone())
        .collect();
    let movable: Vec<String> = scene
        .entities
        .iter()
        .filter(|e| graspable(e.kind))
        .map(|e| e.id.clone())
        .collect();
    let containers: Vec<String> = scene
        .entities
        .iter()
        .filter(|e| e.is_container)
        .map(|e| e.id.clone())
        .collect();
    let mut t = Tracker {
        entities: scene.entities.clone(),
        actions: Vec::new(),
    };
    for _ in 0..rng.range(2, 4) {
        match rng.below(4) {
            0 | 1 if !sources.is_empty() && !cups.is_empty() => {
                let src = pick(rng, &sources).clone();
                let dst = pick(rng, &cups).clone();
                let room = capacity_ul(EntityKind::Cup) - t.get(&dst).fill.value;
                let max = (t.get(&src).fill.value.min(room) * 8 / 10) / 1000;
                if max < 10 {
                    continue;
                }
                let volume = rng.range(10, max) * 1000;
                let home = t.get(&src).pose;
                let over = t.get(&dst).pose;
                t.actions.push(Action::MoveTo { target: home });
                t.ensure_open(&src);
                t.actions.push(Action::Grasp { entity: src.clone() });
                t.actions.push(Action::MoveTo {
                    target: Triple::um(over.x - 10_000, over.y, over.z),
                });
                t.ensure_open(&dst);
                t.actions.push(Action::Pour {
                    source: src.clone(),
                    destination: dst.clone(),
                    volume: Quantity::ul(volume),
                });
                // Worst case under pour noise.
                let moved = volume + (volume * POUR_NOISE_PPM as i64 + 999_999) / 1_000_000;
                t.get_mut(&src).fill.value -= moved;
                t.get_mut(&dst).fill.value += moved;
                if rng.below(2) == 0 {
                    t.actions.push(Action::Close { entity: src.clone() });
                    t.get_mut(&src).is_open = false;
                }
                t.actions.push(Action::MoveTo { target: home });
                t.actions.push(Action::Release);
            }
            2 if !movable.is_empty() => {
                let id = pick(rng, &movable).clone();
                let to = at(t.free_x(rng));
                let from = t.get(&id).pose;
                t.actions.push(Action::MoveTo { target: from });
                t.actions.push(Action::Grasp { entity: id.clone() });
                t.actions.push(Action::MoveTo { target: to });
                t.actions.push(Action::Release);
                t.get_mut(&id).pose = to;
            }
            _ if !containers.is_empty() => {
                let id = pick(rng, &containers).clone();
                let open = !t.get(&id).is_open;
                t.actions.push(if open {
                    Action::Open { entity: id.clone() }
                } else {
                    Action::Close { entity: id.clone() }
                });
                t.get_mut(&id).is_open = open;
            }
            _ => {}
        }
    }
    if t.actions.is_empty() {
        t.actions.push(Action::MoveTo {
            target: Triple::um(0, 0, HOME_Z_UM),
        });
    }
    t.actions
}

fn arbitrary_actions(scene: &Scene, rng: &mut SplitMix64) -> Vec<Action> {
    let ids: Vec<String> = scene.entities.iter().map(|e| e.id.clone()).collect();
    let n = rng.range(1, 10);
    (0..n)
        .map(|_| {
            let id = pick(rng, &ids).clone();
            match rng.below(6) {
                0 => Action::MoveTo {
                    target: match rng.below(3) {
                        0 => scene.entity(&id).expect("listed").pose,
                        1 => Triple::um(rng.range(-1_200, 1_200) * 1000, 0, 0),
                        _ => Triple::um(
                            rng.range(0, 600) * 1000,
                            rng.range(-100, 100) * 1000,
                            rng.range(0, 300) * 1000,
                        ),
                    },
                },
                1 => Action::Grasp { entity: id },
                2 => Action::Release,
                3 => Action::Open { entity: id },
                4 => Action::Close { entity: id },
                _ => Action::Pour {
                    source: id,
                    destination: pick(rng, &ids).clone(),
                    volume: Quantity::ul(rng.range(1, 300) * 1000),
                },
            }
        })
        .collect()
}
