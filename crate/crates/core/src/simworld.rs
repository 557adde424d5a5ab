//! Deterministic tabletop micro-world.
//!
//! Executes symbolic plans against a kinematic scene and records complete
//! episodes: a `joints` frame per tick, `force_torque` frames on grasp and
//! release, `proximity` frames when obstacles exist, one transition per state
//! change, one annotation per action under a root annotation, and a belief
//! snapshot at every action boundary.
//!
//! The same engine run with noise and faults disabled is the prediction
//! model of the imagination cycle ([`predict`]); [`compare_outcomes`]
//! explains differences between a prediction and an observed run using a
//! small table of causal rules. Constants are documented in `docs/world.md`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canon::{self, CanonError};
use crate::hash::ContentHash;
use crate::model::{
    Belief, BeliefSnapshot, BeliefSource, EntityDescriptor, EntityKind, Episode, EpisodeMeta,
    FaultSpec, Outcome, Quantity, RawFrame, Role, SemanticAnnotation, StateValue,
    SymbolicTransition, Timestamp, Triple, Unit, GRIPPER_ID, SCHEMA_VERSION, WORKSPACE_ID,
};
use crate::perception::{self, PipelineNode};
use crate::replay::{self, WorldState};
use crate::rng::SplitMix64;

pub const PLAN_TAG: &str = "plan";
pub const SCENE_TAG: &str = "scene";
pub const FAULTS_TAG: &str = "faults";

/// World constants. See `docs/world.md`.
pub mod constants {
    use crate::model::EntityKind;

    /// Gripper speed: 100 mm/s.
    pub const SPEED_UM_PER_S: i64 = 100_000;
    /// Travel time per µm at [`SPEED_UM_PER_S`].
    pub const US_PER_UM: i64 = 1_000_000 / SPEED_UM_PER_S;
    /// Targets farther than this from the origin are unreachable (1 m).
    pub const REACH_LIMIT_UM: i64 = 1_000_000;
    /// The gripper must be this close to an object to grasp it (20 mm).
    pub const GRASP_TOLERANCE_UM: i64 = 20_000;
    pub const GRASP_US: u64 = 500_000;
    pub const RELEASE_US: u64 = 300_000;
    pub const OPEN_US: u64 = 800_000;
    pub const CLOSE_US: u64 = 800_000;
    pub const POUR_US: u64 = 1_500_000;
    /// Gravity in m/s²; contact force in µN = mass in mg × 10.
    pub const GRAVITY: i64 = 10;
    /// Pour volume noise: ε uniform in ±20000 ppm.
    pub const POUR_NOISE_PPM: u64 = 20_000;
    /// Share of the transferred volume lost when the spill fault fires.
    pub const SPILL_FRACTION_PPM: i64 = 100_000;
    /// Minimum tick.
    pub const MIN_TICK_US: u64 = 1_000;
    /// Tick used by [`super::predict`].
    pub const PREDICT_TICK_US: u64 = 10_000;
    /// Pose tolerance of [`super::compare_outcomes`] (1 mm).
    pub const POSE_TOLERANCE_UM: i64 = 1_000;
    /// Fill tolerance of [`super::compare_outcomes`]: 5% of the predicted transfer.
    pub const FILL_TOLERANCE_PERCENT: i64 = 5;

    /// Liquid capacity in µL; zero for non-containers.
    pub fn capacity_ul(kind: EntityKind) -> i64 {
        match kind {
            EntityKind::Bottle => 500_000,
            EntityKind::Cup => 250_000,
            EntityKind::Canister => 1_000_000,
            EntityKind::Tray
            | EntityKind::Obstacle
            | EntityKind::Gripper
            | EntityKind::Workspace => 0,
        }
    }

    pub fn graspable(kind: EntityKind) -> bool {
        matches!(
            kind,
            EntityKind::Bottle | EntityKind::Cup | EntityKind::Tray | EntityKind::Canister
        )
    }
}

use constants::*;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntity {
    pub id: String,
    pub kind: EntityKind,
    pub pose: Triple,
    pub mass: Quantity,
    pub is_container: bool,
    pub is_open: bool,
    pub fill: Quantity,
    pub transparent: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gripper {
    pub pose: Triple,
    pub holding: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub entities: Vec<SceneEntity>,
    pub gripper: Gripper,
    /// Liquid spilled onto the workspace so far.
    #[serde(default = "zero_ul")]
    pub spilled: Quantity,
}

fn zero_ul() -> Quantity {
    Quantity::ul(0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    MoveTo {
        target: Triple,
    },
    Grasp {
        entity: String,
    },
    Release,
    Open {
        entity: String,
    },
    Close {
        entity: String,
    },
    Pour {
        source: String,
        destination: String,
        volume: Quantity,
    },
}

impl Action {
    pub fn event_type(&self) -> &'static str {
        match self {
            Action::MoveTo { .. } => "move_to",
            Action::Grasp { .. } => "grasp",
            Action::Release => "release",
            Action::Open { .. } => "open",
            Action::Close { .. } => "close",
            Action::Pour { .. } => "pour",
        }
    }

    /// Entities named by the action.
    pub fn entities(&self) -> Vec<&str> {
        match self {
            Action::MoveTo { .. } | Action::Release => vec![],
            Action::Grasp { entity } | Action::Open { entity } | Action::Close { entity } => {
                vec![entity]
            }
            Action::Pour {
                source,
                destination,
                ..
            } => vec![source, destination],
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::MoveTo { target } => {
                write!(f, "move_to({}, {}, {})", target.x, target.y, target.z)
            }
            Action::Grasp { entity } => write!(f, "grasp({entity})"),
            Action::Release => f.write_str("release()"),
            Action::Open { entity } => write!(f, "open({entity})"),
            Action::Close { entity } => write!(f, "close({entity})"),
            Action::Pour {
                source,
                destination,
                volume,
            } => write!(f, "pour({source}, {destination}, {volume})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    /// Event type of the root annotation.
    #[serde(default = "default_task")]
    pub task: String,
    pub actions: Vec<Action>,
}

fn default_task() -> String {
    "task".to_string()
}

impl Plan {
    pub fn new(actions: Vec<Action>) -> Self {
        Plan {
            task: default_task(),
            actions,
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canon::to_canonical_tagged(PLAN_TAG, self).expect("plans always encode")
    }

    pub fn hash(&self) -> ContentHash {
        ContentHash::of(&self.canonical_bytes())
    }
}

/// Decodes a stored plan, requiring canonical bytes.
pub fn decode_canonical_plan(bytes: &[u8]) -> Result<Plan, CanonError> {
    canon::from_canonical_tagged(PLAN_TAG, bytes)
}

pub fn decode_plan(bytes: &[u8]) -> Result<Plan, CanonError> {
    canon::from_text_tagged(PLAN_TAG, bytes)
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene, CanonError> {
    canon::from_text_tagged(SCENE_TAG, bytes)
}

pub fn decode_faults(bytes: &[u8]) -> Result<FaultSpec, CanonError> {
    canon::from_text_tagged(FAULTS_TAG, bytes)
}

/// Id of the annotation recording plan action `index` (0-based).
pub fn action_annotation_id(index: usize) -> String {
    format!("a{}", index + 1)
}

/// Inverse of [`action_annotation_id`].
pub fn action_index(annotation_id: &str) -> Option<usize> {
    let n: usize = annotation_id.strip_prefix('a')?.parse().ok()?;
    n.checked_sub(1)
}

pub const ROOT_ANNOTATION_ID: &str = "a0";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("tick {0} µs is below the minimum of {MIN_TICK_US} µs")]
    InvalidTick(u64),
    #[error("episodes were recorded from different plans ({predicted} vs {observed})")]
    PlanMismatch {
        predicted: ContentHash,
        observed: ContentHash,
    },
    #[error(transparent)]
    Replay(#[from] replay::ReplayError),
    #[error(transparent)]
    Perception(#[from] perception::PerceptionError),
}

impl Scene {
    pub fn entity(&self, id: &str) -> Option<&SceneEntity> {
        self.entities.iter().find(|e| e.id == id)
    }

    fn entity_mut(&mut self, id: &str) -> Option<&mut SceneEntity> {
        self.entities.iter_mut().find(|e| e.id == id)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entities {
            if e.id == GRIPPER_ID || e.id == WORKSPACE_ID {
                return bad(format!("entity id {} is reserved", e.id));
            }
            if matches!(e.kind, EntityKind::Gripper | EntityKind::Workspace) {
                return bad(format!("entity {} has reserved kind {}", e.id, e.kind.name()));
            }
            if !seen.insert(e.id.as_str()) {
                return bad(format!("duplicate entity id {}", e.id));
            }
            if e.pose.unit != Unit::Micrometre {
                return bad(format!("entity {}: pose must be in µm", e.id));
            }
            if e.mass.unit != Unit::Microgram || e.mass.value < 0 {
                return bad(format!("entity {}: mass must be a non-negative µg quantity", e.id));
            }
            if e.fill.unit != Unit::Microlitre || e.fill.value < 0 {
                return bad(format!("entity {}: fill must be a non-negative µL quantity", e.id));
            }
            let cap = capacity_ul(e.kind);
            if e.fill.value > cap {
                return bad(format!(
                    "entity {}: fill {} µL exceeds capacity {cap} µL",
                    e.id, e.fill.value
                ));
            }
            if e.is_container && cap == 0 {
                return bad(format!("entity {}: a {} cannot be a container", e.id, e.kind.name()));
            }
            if !e.is_container && (e.fill.value != 0 || e.is_open) {
                return bad(format!("entity {}: only containers hold liquid or open", e.id));
            }
        }
        if self.gripper.pose.unit != Unit::Micrometre {
            return bad("gripper pose must be in µm".into());
        }
        if let Some(h) = &self.gripper.holding {
            match self.entity(h) {
                Some(e) if graspable(e.kind) => {}
                _ => return bad(format!("gripper holds {h}, which is not a graspable entity")),
            }
        }
        if self.spilled.unit != Unit::Microlitre || self.spilled.value < 0 {
            return bad("spilled must be a non-negative µL quantity".into());
        }
        Ok(())
    }

    /// Scene manifest: every entity plus the gripper and the workspace.
    pub fn to_manifest(&self) -> Vec<EntityDescriptor> {
        let mut out: Vec<EntityDescriptor> = self
            .entities
            .iter()
            .map(|e| EntityDescriptor {
                id: e.id.clone(),
                kind: e.kind,
                pose: e.pose,
                mass: e.mass,
                is_container: e.is_container,
                is_open: e.is_open,
                fill: e.fill,
                transparent: e.transparent,
                holding: None,
            })
            .collect();
        out.push(EntityDescriptor {
            id: GRIPPER_ID.into(),
            kind: EntityKind::Gripper,
            pose: self.gripper.pose,
            mass: Quantity::ug(0),
            is_container: false,
            is_open: false,
            fill: Quantity::ul(0),
            transparent: false,
            holding: self.gripper.holding.clone(),
        });
        out.push(EntityDescriptor {
            id: WORKSPACE_ID.into(),
            kind: EntityKind::Workspace,
            pose: Triple::um(0, 0, 0),
            mass: Quantity::ug(0),
            is_container: false,
            is_open: false,
            fill: self.spilled,
            transparent: false,
            holding: None,
        });
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Rebuilds the scene recorded in an episode manifest.
    pub fn from_manifest(manifest: &[EntityDescriptor]) -> Result<Scene, SimError> {
        let gripper = manifest
            .iter()
            .find(|d| d.kind == EntityKind::Gripper)
            .ok_or_else(|| SimError::InvalidScene("manifest has no gripper".into()))?;
        let spilled = manifest
            .iter()
            .find(|d| d.kind == EntityKind::Workspace)
            .map(|d| d.fill)
            .unwrap_or_else(zero_ul);
        let entities = manifest
            .iter()
            .filter(|d| !matches!(d.kind, EntityKind::Gripper | EntityKind::Workspace))
            .map(|d| SceneEntity {
                id: d.id.clone(),
                kind: d.kind,
                pose: d.pose,
                mass: d.mass,
                is_container: d.is_container,
                is_open: d.is_open,
                fill: d.fill,
                transparent: d.transparent,
            })
            .collect();
        let scene = Scene {
            entities,
            gripper: Gripper {
                pose: gripper.pose,
                holding: gripper.holding.clone(),
            },
            spilled,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Total liquid in containers plus spillage, in µL.
    pub fn total_liquid_ul(&self) -> i64 {
        self.entities.iter().map(|e| e.fill.value).sum::<i64>() + self.spilled.value
    }
}

impl Plan {
    pub fn validate(&self, scene: &Scene) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidPlan(m));
        if self.actions.is_empty() {
            return bad("plan has no actions".into());
        }
        if self.task.is_empty() {
            return bad("task name is empty".into());
        }
        for (i, a) in self.actions.iter().enumerate() {
            for id in a.entities() {
                if scene.entity(id).is_none() {
                    return bad(format!("action {i} ({a}) references unknown entity {id}"));
                }
            }
            match a {
                Action::MoveTo { target } if target.unit != Unit::Micrometre => {
                    return bad(format!("action {i}: move target must be in µm"));
                }
                Action::Pour { volume, .. }
                    if volume.unit != Unit::Microlitre || volume.value <= 0 =>
                {
                    return bad(format!("action {i}: pour volume must be a positive µL quantity"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Whether pour noise and faults are drawn from the PRNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Seeded,
    /// ε forced to 0 and faults disabled.
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub seed: u64,
    pub tick_us: u64,
    pub faults: FaultSpec,
    pub noise: NoiseMode,
}

impl RunConfig {
    pub fn seeded(seed: u64, tick_us: u64, faults: FaultSpec) -> Self {
        RunConfig {
            seed,
            tick_us,
            faults,
            noise: NoiseMode::Seeded,
        }
    }
}

/// An episode together with the simulator's own final scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Simulation {
    pub episode: Episode,
    pub final_scene: Scene,
}

/// Executes `plan` and records the episode.
pub fn run_plan(
    scene: &Scene,
    plan: &Plan,
    seed: u64,
    tick_us: u64,
    faults: FaultSpec,
) -> Result<Episode, SimError> {
    Ok(simulate(scene, plan, &RunConfig::seeded(seed, tick_us, faults))?.episode)
}

/// Nominal prediction: noise and faults disabled, seed 0.
pub fn predict(scene: &Scene, plan: &Plan) -> Result<Episode, SimError> {
    let cfg = RunConfig {
        seed: 0,
        tick_us: PREDICT_TICK_US,
        faults: FaultSpec::NONE,
        noise: NoiseMode::Nominal,
    };
    Ok(simulate(scene, plan, &cfg)?.episode)
}

/// Runs the plan and, when a pipeline is given, perceives the final scene
/// with a seed-derived noise stream and attaches the result.
pub fn record(
    scene: &Scene,
    plan: &Plan,
    cfg: &RunConfig,
    pipeline: Option<&PipelineNode>,
) -> Result<Episode, SimError> {
    let sim = simulate(scene, plan, cfg)?;
    let Some(root) = pipeline else {
        return Ok(sim.episode);
    };
    let obs = match cfg.noise {
        NoiseMode::Seeded => perception::observe(
            &sim.final_scene,
            &mut perception::SeededNoise::for_episode(cfg.seed),
        ),
        NoiseMode::Nominal => perception::observe(&sim.final_scene, &mut perception::ZeroNoise),
    };
    let (cas, trace) = perception::execute_pipeline(root, &obs)?;
    let mut episode = perception::attach_to_episode(&cas, &trace, sim.episode);
    episode.meta.pipeline_hash = Some(perception::pipeline_hash(root));
    Ok(episode)
}

pub fn simulate(scene: &Scene, plan: &Plan, cfg: &RunConfig) -> Result<Simulation, SimError> {
    scene.validate()?;
    plan.validate(scene)?;
    if cfg.tick_us < MIN_TICK_US {
        return Err(SimError::InvalidTick(cfg.tick_us));
    }
    let mut sim = Sim::new(scene.clone(), cfg);
    sim.emit_frames(0, |_| scene.gripper.pose);
    sim.snapshot();
    for (i, action) in plan.actions.iter().enumerate() {
        sim.execute(i, action);
        sim.snapshot();
    }
    let end = sim.t;
    let failed = sim
        .annotations
        .iter()
        .filter(|a| a.outcome == Outcome::Failed)
        .count();
    let root = SemanticAnnotation {
        id: ROOT_ANNOTATION_ID.into(),
        parent: None,
        event_type: plan.task.clone(),
        begin: Timestamp::ZERO,
        end: Timestamp(end),
        participants: BTreeMap::from([(Role::Agent, GRIPPER_ID.to_string())]),
        outcome: if failed == 0 {
            Outcome::Succeeded
        } else {
            Outcome::Failed
        },
        failure_reason: (failed > 0)
            .then(|| format!("{failed} of {} actions failed", plan.actions.len())),
    };
    let mut annotations = Vec::with_capacity(sim.annotations.len() + 1);
    annotations.push(root);
    annotations.append(&mut sim.annotations);

    let episode = Episode {
        meta: EpisodeMeta {
            schema_version: SCHEMA_VERSION,
            plan_hash: plan.hash(),
            seed: cfg.seed,
            tick_us: cfg.tick_us,
            faults: cfg.faults,
            pipeline_hash: None,
            created: None,
        },
        scene: scene.to_manifest(),
        frames: sim.frames,
        transitions: sim.transitions,
        annotations,
        beliefs: sim.beliefs,
    }
    .normalized();
    Ok(Simulation {
        episode,
        final_scene: sim.scene,
    })
}

struct Sim {
    scene: Scene,
    rng: SplitMix64,
    noise: NoiseMode,
    faults: FaultSpec,
    tick: u64,
    /// Current time in µs.
    t: u64,
    /// Next tick at which a joints frame is due.
    next_tick: u64,
    obstacles: Vec<Triple>,
    frames: Vec<RawFrame>,
    transitions: Vec<SymbolicTransition>,
    annotations: Vec<SemanticAnnotation>,
    beliefs: Vec<BeliefSnapshot>,
}

/// Outcome of one action attempt.
struct Step {
    duration: u64,
    failure: Option<String>,
}

impl Step {
    fn ok(duration: u64) -> Self {
        Step {
            duration,
            failure: None,
        }
    }
    fn fail(duration: u64, reason: String) -> Self {
        Step {
            duration,
            failure: Some(reason),
        }
    }
}

impl Sim {
    fn new(scene: Scene, cfg: &RunConfig) -> Self {
        let obstacles = scene
            .entities
            .iter()
            .filter(|e| e.kind == EntityKind::Obstacle)
            .map(|e| e.pose)
            .collect();
        Sim {
            scene,
            rng: SplitMix64::new(cfg.seed),
            noise: cfg.noise,
            faults: cfg.faults,
            tick: cfg.tick_us,
            t: 0,
            next_tick: 0,
            obstacles,
            frames: Vec::new(),
            transitions: Vec::new(),
            annotations: Vec::new(),
            beliefs: Vec::new(),
        }
    }

    fn fault_fires(&mut self, ppm: u32) -> bool {
        self.noise == NoiseMode::Seeded && ppm > 0 && self.rng.chance_ppm(ppm)
    }

    /// Emits the per-tick frames due up to and including `until`.
    fn emit_frames(&mut self, until: u64, pose_at: impl Fn(u64) -> Triple) {
        while self.next_tick <= until {
            let t = self.next_tick;
            let p = pose_at(t);
            self.frames.push(RawFrame {
                t: Timestamp(t),
                stream: "joints".into(),
                payload: BTreeMap::from([
                    ("x".to_string(), Quantity::um(p.x)),
                    ("y".to_string(), Quantity::um(p.y)),
                    ("z".to_string(), Quantity::um(p.z)),
                ]),
            });
            if let Some(nearest) = self.obstacles.iter().map(|o| o.distance(&p)).min() {
                self.frames.push(RawFrame {
                    t: Timestamp(t),
                    stream: "proximity".into(),
                    payload: BTreeMap::from([("nearest".to_string(), Quantity::um(nearest))]),
                });
            }
            self.next_tick += self.tick;
        }
    }

    fn force_frame(&mut self, t: u64, fz: i64) {
        self.frames.push(RawFrame {
            t: Timestamp(t),
            stream: "force_torque".into(),
            payload: BTreeMap::from([
                ("fx".to_string(), Quantity::un(0)),
                ("fy".to_string(), Quantity::un(0)),
                ("fz".to_string(), Quantity::un(fz)),
            ]),
        });
    }

    fn change(&mut self, t: u64, entity: &str, attribute: &str, old: StateValue, new: StateValue) {
        if old != new {
            self.transitions.push(SymbolicTransition {
                t: Timestamp(t),
                entity: entity.to_string(),
                attribute: attribute.to_string(),
                old_value: old,
                new_value: new,
            });
        }
    }

    fn snapshot(&mut self) {
        let mut beliefs: BTreeMap<String, Belief> = self
            .scene
            .entities
            .iter()
            .map(|e| {
                (
                    e.id.clone(),
                    Belief {
                        pose: e.pose,
                        confidence_ppm: 1_000_000,
                    },
                )
            })
            .collect();
        beliefs.insert(
            GRIPPER_ID.to_string(),
            Belief {
                pose: self.scene.gripper.pose,
                confidence_ppm: 1_000_000,
            },
        );
        self.beliefs.push(BeliefSnapshot {
            t: Timestamp(self.t),
            source: BeliefSource::Kinematic,
            beliefs,
        });
    }

    fn execute(&mut self, index: usize, action: &Action) {
        let begin = self.t;
        let mut participants = BTreeMap::from([(Role::Agent, GRIPPER_ID.to_string())]);
        let step = match action {
            Action::MoveTo { target } => {
                if let Some(h) = &self.scene.gripper.holding {
                    participants.insert(Role::Patient, h.clone());
                }
                self.move_to(*target)
            }
            Action::Grasp { entity } => {
                participants.insert(Role::Patient, entity.clone());
                self.grasp(entity)
            }
            Action::Release => {
                if let Some(h) = &self.scene.gripper.holding {
                    participants.insert(Role::Patient, h.clone());
                }
                self.release()
            }
            Action::Open { entity } => {
                participants.insert(Role::Patient, entity.clone());
                self.set_open(entity, true)
            }
            Action::Close { entity } => {
                participants.insert(Role::Patient, entity.clone());
                self.set_open(entity, false)
            }
            Action::Pour {
                source,
                destination,
                volume,
            } => {
                participants.insert(Role::Source, source.clone());
                participants.insert(Role::Destination, destination.clone());
                self.pour(source, destination, volume.value)
            }
        };
        let end = begin + step.duration;
        self.t = end;
        self.annotations.push(SemanticAnnotation {
            id: action_annotation_id(index),
            parent: Some(ROOT_ANNOTATION_ID.into()),
            event_type: action.event_type().into(),
            begin: Timestamp(begin),
            end: Timestamp(end),
            participants,
            outcome: if step.failure.is_none() {
                Outcome::Succeeded
            } else {
                Outcome::Failed
            },
            failure_reason: step.failure,
        });
    }

    /// Holds the gripper still for `duration`, emitting tick frames.
    fn dwell(&mut self, duration: u64) {
        let pose = self.scene.gripper.pose;
        self.emit_frames(self.t + duration, |_| pose);
    }

    fn move_to(&mut self, target: Triple) -> Step {
        let limit = REACH_LIMIT_UM as i128;
        if target.distance_sq(&Triple::um(0, 0, 0)) > limit * limit {
            return Step::fail(
                0,
                format!("target beyond reach limit of {REACH_LIMIT_UM} µm"),
            );
        }
        let start = self.scene.gripper.pose;
        let duration = (start.distance(&target) * US_PER_UM) as u64;
        let begin = self.t;
        let end = begin + duration;
        self.emit_frames(end, |t| interpolate(start, target, t - begin, duration));
        self.change(
            end,
            GRIPPER_ID,
            "pose",
            StateValue::Triple(start),
            StateValue::Triple(target),
        );
        self.scene.gripper.pose = target;
        if let Some(h) = self.scene.gripper.holding.clone() {
            let obj = self.scene.entity_mut(&h).expect("held entity exists");
            let old = obj.pose;
            obj.pose = target;
            self.change(end, &h, "pose", StateValue::Triple(old), StateValue::Triple(target));
        }
        Step::ok(duration)
    }

    fn grasp(&mut self, id: &str) -> Step {
        self.dwell(GRASP_US);
        let end = self.t + GRASP_US;
        let obj = self.scene.entity(id).expect("plan validated").clone();
        let failure = if let Some(h) = &self.scene.gripper.holding {
            Some(format!("gripper already holding {h}"))
        } else if !graspable(obj.kind) {
            Some(format!("entity {id} is not graspable"))
        } else {
            let d = obj.pose.distance(&self.scene.gripper.pose);
            (d > GRASP_TOLERANCE_UM).then(|| {
                format!("gripper not at {id} (distance {d} µm exceeds {GRASP_TOLERANCE_UM} µm)")
            })
        };
        if let Some(reason) = failure {
            self.force_frame(end, 0);
            return Step::fail(GRASP_US, reason);
        }
        if self.fault_fires(self.faults.grasp_slip_ppm) {
            self.force_frame(end, 0);
            return Step::fail(
                GRASP_US,
                format!("grasp slip fault: {id} slipped from the gripper"),
            );
        }
        let mass_mg = obj.mass.value / 1000;
        self.force_frame(end, mass_mg * GRAVITY);
        self.change(
            end,
            GRIPPER_ID,
            "holding",
            StateValue::Nothing,
            StateValue::Entity(id.to_string()),
        );
        self.scene.gripper.holding = Some(id.to_string());
        Step::ok(GRASP_US)
    }

    fn release(&mut self) -> Step {
        self.dwell(RELEASE_US);
        let end = self.t + RELEASE_US;
        self.force_frame(end, 0);
        let Some(h) = self.scene.gripper.holding.take() else {
            return Step::fail(RELEASE_US, "gripper holding nothing".into());
        };
        self.change(
            end,
            GRIPPER_ID,
            "holding",
            StateValue::Entity(h),
            StateValue::Nothing,
        );
        Step::ok(RELEASE_US)
    }

    fn set_open(&mut self, id: &str, open: bool) -> Step {
        let duration = if open { OPEN_US } else { CLOSE_US };
        self.dwell(duration);
        let end = self.t + duration;
        let obj = self.scene.entity(id).expect("plan validated");
        if !obj.is_container {
            return Step::fail(duration, format!("{id} is not a container"));
        }
        if obj.is_open == open {
            let state = if open { "open" } else { "closed" };
            return Step::fail(duration, format!("{id} already {state}"));
        }
        self.change(
            end,
            id,
            "is_open",
            StateValue::Bool(!open),
            StateValue::Bool(open),
        );
        self.scene.entity_mut(id).expect("exists").is_open = open;
        Step::ok(duration)
    }

    fn pour(&mut self, source: &str, destination: &str, requested: i64) -> Step {
        self.dwell(POUR_US);
        let end = self.t + POUR_US;
        let src = self.scene.entity(source).expect("plan validated").clone();
        let dst = self.scene.entity(destination).expect("plan validated").clone();
        let failure = if source == destination {
            Some("source and destination must differ".to_string())
        } else if self.scene.gripper.holding.as_deref() != Some(source) {
            Some(format!("pour requires holding the source container {source}"))
        } else if !src.is_container {
            Some(format!("{source} is not a container"))
        } else if !dst.is_container {
            Some(format!("{destination} is not a container"))
        } else if !src.is_open {
            Some(format!(
                "containers must be open before pouring: source {source} closed"
            ))
        } else if !dst.is_open {
            Some(format!(
                "containers must be open before pouring: destination {destination} closed"
            ))
        } else if src.fill.value < requested {
            Some(format!(
                "insufficient liquid in {source}: {} µL < {requested} µL",
                src.fill.value
            ))
        } else {
            None
        };
        if let Some(reason) = failure {
            return Step::fail(POUR_US, reason);
        }

        let eps = match self.noise {
            NoiseMode::Seeded => self.rng.symmetric(POUR_NOISE_PPM),
            NoiseMode::Nominal => 0,
        };
        let noisy = requested + (requested as i128 * eps as i128).div_euclid(1_000_000) as i64;
        let moved = noisy.clamp(0, src.fill.value);
        let mut spilled = 0;
        let mut failure = None;
        if self.fault_fires(self.faults.pour_spill_ppm) {
            spilled = moved * SPILL_FRACTION_PPM / 1_000_000;
            failure = Some(format!("pour spill fault: {spilled} µL spilled"));
        }
        let mut delivered = moved - spilled;
        let room = capacity_ul(dst.kind) - dst.fill.value;
        if delivered > room {
            let overflow = delivered - room;
            delivered = room;
            spilled += overflow;
            failure.get_or_insert(format!(
                "destination overflow: {overflow} µL spilled from {destination}"
            ));
        }

        let src_new = src.fill.value - moved;
        let dst_new = dst.fill.value + delivered;
        self.change(
            end,
            source,
            "fill_level",
            StateValue::Quantity(src.fill),
            StateValue::Quantity(Quantity::ul(src_new)),
        );
        self.change(
            end,
            destination,
            "fill_level",
            StateValue::Quantity(dst.fill),
            StateValue::Quantity(Quantity::ul(dst_new)),
        );
        let spill_old = self.scene.spilled;
        let spill_new = Quantity::ul(spill_old.value + spilled);
        self.change(
            end,
            WORKSPACE_ID,
            "spilled",
            StateValue::Quantity(spill_old),
            StateValue::Quantity(spill_new),
        );
        self.scene.entity_mut(source).expect("exists").fill = Quantity::ul(src_new);
        self.scene.entity_mut(destination).expect("exists").fill = Quantity::ul(dst_new);
        self.scene.spilled = spill_new;
        match failure {
            None => Step::ok(POUR_US),
            Some(reason) => Step::fail(POUR_US, reason),
        }
    }
}

fn interpolate(start: Triple, end: Triple, elapsed: u64, duration: u64) -> Triple {
    if duration == 0 || elapsed >= duration {
        return end;
    }
    let lerp = |a: i64, b: i64| {
        a + ((b - a) as i128 * elapsed as i128).div_euclid(duration as i128) as i64
    };
    Triple::um(
        lerp(start.x, end.x),
        lerp(start.y, end.y),
        lerp(start.z, end.z),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Match,
    Mismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub entity: String,
    pub attribute: String,
    pub predicted: StateValue,
    pub observed: StateValue,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub discrepancies: Vec<Discrepancy>,
    pub overall: Overall,
}

impl DiscrepancyReport {
    pub fn is_match(&self) -> bool {
        self.overall == Overall::Match
    }
}

/// Causal rules: failure-reason prefix → explanation of the resulting
/// deviation.
const CAUSAL_RULES: &[(&str, &str)] = &[
    ("grasp slip fault", "grasp slip fault"),
    (
        "containers must be open before pouring: destination",
        "pour blocked: destination container closed",
    ),
    (
        "containers must be open before pouring: source",
        "pour blocked: source container closed",
    ),
    ("pour spill fault", "pour spill fault: liquid lost during transfer"),
    ("destination overflow", "destination overflow: liquid spilled"),
    ("insufficient liquid", "pour blocked: insufficient liquid in source"),
    ("pour requires holding", "pour blocked: source container not held"),
    ("gripper not at", "grasp failed: gripper not at object"),
    ("gripper already holding", "grasp failed: gripper already holding an object"),
    ("gripper holding nothing", "release failed: gripper holding nothing"),
    ("target beyond reach", "motion blocked: target beyond reach limit"),
    ("already open", "container state differed from expectation"),
    ("already closed", "container state differed from expectation"),
];

fn explain_failure(reason: &str) -> String {
    CAUSAL_RULES
        .iter()
        .find(|(prefix, _)| reason.starts_with(prefix) || reason.contains(prefix))
        .map(|(_, explanation)| explanation.to_string())
        .unwrap_or_else(|| format!("action failed: {reason}"))
}

/// Compares the final scene states of a prediction and an observation and
/// explains each mismatch.
pub fn compare_outcomes(
    predicted: &Episode,
    observed: &Episode,
) -> Result<DiscrepancyReport, SimError> {
    if predicted.meta.plan_hash != observed.meta.plan_hash {
        return Err(SimError::PlanMismatch {
            predicted: predicted.meta.plan_hash,
            observed: observed.meta.plan_hash,
        });
    }
    let pred_final = replay::replay(predicted)?.final_state;
    let obs_final = replay::replay(observed)?.final_state;
    let pred_initial = WorldState::from_manifest(&predicted.scene);

    let mut discrepancies = Vec::new();
    for (entity, attrs) in &pred_final.entities {
        for (attribute, pv) in attrs {
            let ov = obs_final.get(entity, attribute).unwrap_or(&StateValue::Nothing);
            let initial = pred_initial.get(entity, attribute);
            if !mismatch(pv, ov, initial) {
                continue;
            }
            discrepancies.push(Discrepancy {
                entity: entity.clone(),
                attribute: attribute.clone(),
                predicted: pv.clone(),
                observed: ov.clone(),
                explanation: explain(predicted, observed, entity, attribute),
            });
        }
    }
    let overall = if discrepancies.is_empty() {
        Overall::Match
    } else {
        Overall::Mismatch
    };
    Ok(DiscrepancyReport {
        discrepancies,
        overall,
    })
}

fn mismatch(predicted: &StateValue, observed: &StateValue, initial: Option<&StateValue>) -> bool {
    match (predicted, observed) {
        (StateValue::Triple(p), StateValue::Triple(o)) => {
            let tol = POSE_TOLERANCE_UM as i128;
            p.distance_sq(o) > tol * tol
        }
        (StateValue::Quantity(p), StateValue::Quantity(o)) if p.unit == o.unit => {
            let base = match initial {
                Some(StateValue::Quantity(i)) => i.value,
                _ => 0,
            };
            let transfer = (p.value - base).abs() as i128;
            let delta = (o.value - p.value).abs() as i128;
            delta * 100 > transfer * FILL_TOLERANCE_PERCENT as i128
        }
        _ => predicted != observed,
    }
}

/// First observed action failure, absent from the prediction, that involves
/// the entity; mapped through the causal rule table.
fn explain(predicted: &Episode, observed: &Episode, entity: &str, attribute: &str) -> String {
    for a in &observed.annotations {
        let Some(reason) = &a.failure_reason else {
            continue;
        };
        let Some(counterpart) = predicted.annotation(&a.id) else {
            continue;
        };
        if counterpart.failure_reason.as_deref() == Some(reason.as_str()) {
            continue;
        }
        let involved = entity == GRIPPER_ID
            || (entity == WORKSPACE_ID && a.event_type == "pour")
            || a.participants.values().any(|p| p == entity);
        if involved {
            return explain_failure(reason);
        }
    }
    match attribute {
        "fill_level" | "spilled" => "pour volume deviation beyond 5% tolerance".to_string(),
        "pose" => "pose deviation beyond 1 mm tolerance".to_string(),
        _ => "unexplained deviation".to_string(),
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub fn entity(id: &str, kind: EntityKind, x: i64, mass_g: i64) -> SceneEntity {
        let container = capacity_ul(kind) > 0;
        SceneEntity {
            id: id.into(),
            kind,
            pose: Triple::um(x, 0, 0),
            mass: Quantity::ug(mass_g * 1_000_000),
            is_container: container,
            is_open: container,
            fill: Quantity::ul(0),
            transparent: false,
        }
    }

    /// Bottle with 200 mL at x=100 mm, empty cup at x=300 mm.
    pub fn lab_scene() -> Scene {
        let mut bottle = entity("bottle1", EntityKind::Bottle, 100_000, 100);
        bottle.fill = Quantity::ul(200_000);
        bottle.is_open = false;
        Scene {
            entities: vec![bottle, entity("cup1", EntityKind::Cup, 300_000, 50)],
            gripper: Gripper {
                pose: Triple::um(0, 0, 200_000),
                holding: None,
            },
            spilled: Quantity::ul(0),
        }
    }

    pub fn at(x: i64) -> Triple {
        Triple::um(x, 0, 0)
    }

    /// Open bottle, grasp it, carry it over the cup, pour 50 mL, put it back.
    pub fn pour_plan() -> Plan {
        Plan::new(vec![
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
        ])
    }
}
