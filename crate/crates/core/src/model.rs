//! Three-layer episode data model.
//!
//! An episode holds raw sensor frames, symbolic state transitions and
//! semantic annotations of one task execution, plus the belief timeline of
//! the agent. All continuous quantities are integers in micro-units and all
//! timestamps are microseconds relative to episode start, so encodings are
//! bit-exact across platforms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canon::{self, CanonError};
use crate::hash::ContentHash;

/// The only schema version this build reads or writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Object kind tag of episodes in the canonical text form.
pub const EPISODE_TAG: &str = "episode";

/// Reserved id of the robot gripper in every scene manifest.
pub const GRIPPER_ID: &str = "gripper";
/// Reserved id of the workspace surface that collects spilled liquid.
pub const WORKSPACE_ID: &str = "workspace";

/// Microseconds since episode start.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn micros(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}µs", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "um")]
    Micrometre,
    #[serde(rename = "urad")]
    Microradian,
    #[serde(rename = "uN")]
    Micronewton,
    #[serde(rename = "uL")]
    Microlitre,
    #[serde(rename = "ug")]
    Microgram,
    #[serde(rename = "us")]
    Microsecond,
    #[serde(rename = "ppm")]
    Ppm,
}

impl Unit {
    /// Human-readable symbol used in messages and formatted rules.
    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Micrometre => "µm",
            Unit::Microradian => "µrad",
            Unit::Micronewton => "µN",
            Unit::Microlitre => "µL",
            Unit::Microgram => "µg",
            Unit::Microsecond => "µs",
            Unit::Ppm => "ppm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantity {
    pub value: i64,
    pub unit: Unit,
}

impl Quantity {
    pub fn new(value: i64, unit: Unit) -> Self {
        Quantity { value, unit }
    }
    pub fn um(value: i64) -> Self {
        Self::new(value, Unit::Micrometre)
    }
    pub fn un(value: i64) -> Self {
        Self::new(value, Unit::Micronewton)
    }
    pub fn ul(value: i64) -> Self {
        Self::new(value, Unit::Microlitre)
    }
    pub fn ug(value: i64) -> Self {
        Self::new(value, Unit::Microgram)
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.value, self.unit.symbol())
    }
}

/// Three components sharing one unit; poses are triples in µm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub unit: Unit,
    pub x: i64,
    pub y: i64,
    pub z: i64,
}

impl Triple {
    pub fn um(x: i64, y: i64, z: i64) -> Self {
        Triple {
            unit: Unit::Micrometre,
            x,
            y,
            z,
        }
    }

    pub fn distance_sq(&self, other: &Triple) -> i128 {
        let dx = (self.x - other.x) as i128;
        let dy = (self.y - other.y) as i128;
        let dz = (self.z - other.z) as i128;
        dx * dx + dy * dy + dz * dz
    }

    /// Floor of the Euclidean distance.
    pub fn distance(&self, other: &Triple) -> i64 {
        isqrt(self.distance_sq(other)) as i64
    }

    pub fn norm(&self) -> i64 {
        self.distance(&Triple::um(0, 0, 0))
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}) {}", self.x, self.y, self.z, self.unit.symbol())
    }
}

/// Integer square root (floor) of a non-negative value.
pub fn isqrt(n: i128) -> i128 {
    if n <= 0 {
        return 0;
    }
    let mut x = (n as f64).sqrt() as i128;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFrame {
    pub t: Timestamp,
    pub stream: String,
    /// Field name → reading, ordered by field name.
    pub payload: BTreeMap<String, Quantity>,
}

/// Value of a symbolic attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum StateValue {
    Quantity(Quantity),
    Triple(Triple),
    Entity(String),
    Bool(bool),
    Text(String),
    Nothing,
}

impl fmt::Display for StateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateValue::Quantity(q) => write!(f, "{q}"),
            StateValue::Triple(t) => write!(f, "{t}"),
            StateValue::Entity(e) => write!(f, "{e}"),
            StateValue::Bool(b) => write!(f, "{b}"),
            StateValue::Text(s) => write!(f, "{s:?}"),
            StateValue::Nothing => f.write_str("nothing"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolicTransition {
    pub t: Timestamp,
    pub entity: String,
    pub attribute: String,
    pub old_value: StateValue,
    pub new_value: StateValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Agent,
    Patient,
    Source,
    Destination,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Agent, Role::Patient, Role::Source, Role::Destination];

    pub fn name(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::Patient => "patient",
            Role::Source => "source",
            Role::Destination => "destination",
        }
    }

    pub fn from_name(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Succeeded,
    Failed,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Succeeded => "succeeded",
            Outcome::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticAnnotation {
    pub id: String,
    pub parent: Option<String>,
    pub event_type: String,
    pub begin: Timestamp,
    pub end: Timestamp,
    pub participants: BTreeMap<Role, String>,
    pub outcome: Outcome,
    pub failure_reason: Option<String>,
}

impl SemanticAnnotation {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.begin <= t && t <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefSource {
    /// Derived from the robot's own state estimate.
    Kinematic,
    /// Derived from a perception pipeline run.
    Perception,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Belief {
    pub pose: Triple,
    pub confidence_ppm: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefSnapshot {
    pub t: Timestamp,
    pub source: BeliefSource,
    pub beliefs: BTreeMap<String, Belief>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Bottle,
    Cup,
    Tray,
    Canister,
    Obstacle,
    Gripper,
    Workspace,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Bottle => "bottle",
            EntityKind::Cup => "cup",
            EntityKind::Tray => "tray",
            EntityKind::Canister => "canister",
            EntityKind::Obstacle => "obstacle",
            EntityKind::Gripper => "gripper",
            EntityKind::Workspace => "workspace",
        }
    }
}

/// Initial state of one entity, as recorded in the scene manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityDescriptor {
    pub id: String,
    pub kind: EntityKind,
    pub pose: Triple,
    pub mass: Quantity,
    pub is_container: bool,
    pub is_open: bool,
    pub fill: Quantity,
    pub transparent: bool,
    /// Only meaningful for the gripper.
    pub holding: Option<String>,
}

/// Fault injection probabilities, drawn from the episode PRNG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub grasp_slip_ppm: u32,
    #[serde(default)]
    pub pour_spill_ppm: u32,
}

impl FaultSpec {
    pub const NONE: FaultSpec = FaultSpec {
        grasp_slip_ppm: 0,
        pour_spill_ppm: 0,
    };
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub schema_version: u32,
    pub plan_hash: ContentHash,
    pub seed: u64,
    pub tick_us: u64,
    pub faults: FaultSpec,
    pub pipeline_hash: Option<ContentHash>,
    /// Wall-clock creation time (ISO-8601). Not part of the canonical
    /// encoding, so identical reruns hash identically.
    #[serde(skip)]
    pub created: Option<String>,
}

/// One complete recorded task execution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub scene: Vec<EntityDescriptor>,
    pub frames: Vec<RawFrame>,
    pub transitions: Vec<SymbolicTransition>,
    pub annotations: Vec<SemanticAnnotation>,
    pub beliefs: Vec<BeliefSnapshot>,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid episode: {}", .0.join("; "))]
    InvalidEpisode(Vec<String>),
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error(transparent)]
    Canon(#[from] CanonError),
}

impl Episode {
    /// Canonical ordering of the parts whose in-memory order carries no
    /// meaning: the scene manifest (by id) and frames (by time, then stream).
    /// Transitions, annotations and belief snapshots keep recorded order.
    pub fn normalized(&self) -> Episode {
        let mut e = self.clone();
        e.scene.sort_by(|a, b| a.id.cmp(&b.id));
        e.frames
            .sort_by(|a, b| (a.t, &a.stream).cmp(&(b.t, &b.stream)));
        e
    }

    pub fn annotation(&self, id: &str) -> Option<&SemanticAnnotation> {
        self.annotations.iter().find(|a| a.id == id)
    }

    pub fn root_annotation(&self) -> Option<&SemanticAnnotation> {
        self.annotations.iter().find(|a| a.parent.is_none())
    }

    pub fn event_types(&self) -> BTreeSet<String> {
        self.annotations.iter().map(|a| a.event_type.clone()).collect()
    }

    pub fn entity(&self, id: &str) -> Option<&EntityDescriptor> {
        self.scene.iter().find(|d| d.id == id)
    }

    /// Largest annotation end, i.e. the episode duration.
    pub fn end_time(&self) -> Timestamp {
        self.annotations
            .iter()
            .map(|a| a.end)
            .max()
            .unwrap_or(Timestamp::ZERO)
    }
}

/// Checks every type invariant; an empty result means the episode is valid.
pub fn validate_episode(e: &Episode) -> Vec<String> {
    let mut out = Vec::new();

    if e.meta.schema_version != SCHEMA_VERSION {
        out.push(format!(
            "meta.schema_version: unsupported version {}",
            e.meta.schema_version
        ));
    }

    let mut entities = BTreeSet::new();
    for d in &e.scene {
        if !entities.insert(d.id.as_str()) {
            out.push(format!("scene: duplicate entity id {}", d.id));
        }
    }
    let known = |id: &str| entities.contains(id);
    for d in &e.scene {
        if let Some(h) = &d.holding {
            if !known(h) {
                out.push(format!("scene entity {}: holding unknown entity {h}", d.id));
            }
        }
    }

    let max_end = e.end_time();
    let check_time = |out: &mut Vec<String>, what: String, t: Timestamp| {
        if t > max_end {
            out.push(format!(
                "{what}: timestamp {} exceeds last annotation end {}",
                t.0, max_end.0
            ));
        }
    };

    let mut last_in_stream: HashMap<&str, Timestamp> = HashMap::new();
    for (i, f) in e.frames.iter().enumerate() {
        if let Some(prev) = last_in_stream.get(f.stream.as_str()) {
            if f.t <= *prev {
                out.push(format!(
                    "frame {i} (stream {}): timestamp {} not strictly increasing",
                    f.stream, f.t.0
                ));
            }
        }
        last_in_stream.insert(&f.stream, f.t);
        check_time(&mut out, format!("frame {i}"), f.t);
    }

    for (i, tr) in e.transitions.iter().enumerate() {
        if !known(&tr.entity) {
            out.push(format!("transition {i}: unknown entity {}", tr.entity));
        }
        if tr.old_value == tr.new_value {
            out.push(format!(
                "transition {i}: new_value equals old_value for {}.{}",
                tr.entity, tr.attribute
            ));
        }
        for v in [&tr.old_value, &tr.new_value] {
            if let StateValue::Entity(id) = v {
                if !known(id) {
                    out.push(format!("transition {i}: unknown entity {id} in value"));
                }
            }
        }
        check_time(&mut out, format!("transition {i}"), tr.t);
    }

    // Annotation tree.
    let mut by_id: BTreeMap<&str, &SemanticAnnotation> = BTreeMap::new();
    for a in &e.annotations {
        if by_id.insert(a.id.as_str(), a).is_some() {
            out.push(format!("annotation {}: duplicate id", a.id));
        }
    }
    let roots: Vec<&str> = e
        .annotations
        .iter()
        .filter(|a| a.parent.is_none())
        .map(|a| a.id.as_str())
        .collect();
    if roots.len() != 1 {
        out.push(format!(
            "annotations: expected exactly one root annotation, found {}",
            roots.len()
        ));
    }
    for a in &e.annotations {
        if a.begin > a.end {
            out.push(format!("annotation {}: begin after end", a.id));
        }
        for (role, id) in &a.participants {
            if !known(id) {
                out.push(format!(
                    "annotation {}: participant {} references unknown entity {id}",
                    a.id,
                    role.name()
                ));
            }
        }
        if let Some(p) = &a.parent {
            match by_id.get(p.as_str()) {
                None => out.push(format!("annotation {}: unknown parent {p}", a.id)),
                Some(parent) => {
                    if a.begin < parent.begin || a.end > parent.end {
                        out.push(format!(
                            "annotation {}: interval not contained in parent {p}",
                            a.id
                        ));
                    }
                }
            }
        }
    }
    // Cycles: every annotation must reach a root by following parents.
    for a in &e.annotations {
        let mut seen = BTreeSet::new();
        let mut cur = a;
        while let Some(p) = &cur.parent {
            if !seen.insert(cur.id.as_str()) {
                out.push(format!("annotation {}: parent chain contains a cycle", a.id));
                break;
            }
            match by_id.get(p.as_str()) {
                Some(next) => cur = next,
                None => break,
            }
        }
    }

    let mut prev_t = Timestamp::ZERO;
    for (i, b) in e.beliefs.iter().enumerate() {
        if b.t < prev_t {
            out.push(format!("belief snapshot {i}: not ordered by timestamp"));
        }
        prev_t = b.t;
        check_time(&mut out, format!("belief snapshot {i}"), b.t);
        for (id, belief) in &b.beliefs {
            if !known(id) {
                out.push(format!("belief snapshot {i}: unknown entity {id}"));
            }
            if belief.confidence_ppm > 1_000_000 {
                out.push(format!(
                    "belief snapshot {i}: confidence {} of {id} exceeds 1000000 ppm",
                    belief.confidence_ppm
                ));
            }
        }
    }

    out
}

/// Encodes a valid episode in canonical text form.
pub fn canonical_encode(e: &Episode) -> Result<Vec<u8>, ModelError> {
    let e = e.normalized();
    let violations = validate_episode(&e);
    if !violations.is_empty() {
        return Err(ModelError::InvalidEpisode(violations));
    }
    Ok(canon::to_canonical_tagged(EPISODE_TAG, &e)?)
}

/// Content hash of an episode's canonical encoding.
pub fn episode_hash(e: &Episode) -> Result<ContentHash, ModelError> {
    Ok(ContentHash::of(&canonical_encode(e)?))
}

/// Decodes episode text. Whitespace and key order are free; the schema
/// version must be supported and the episode valid.
pub fn decode_episode(bytes: &[u8]) -> Result<Episode, ModelError> {
    let e: Episode = canon::from_text_tagged(EPISODE_TAG, bytes)?;
    check_decoded(e)
}

/// Decodes episode bytes that must already be in canonical form.
pub fn decode_canonical_episode(bytes: &[u8]) -> Result<Episode, ModelError> {
    let e: Episode = canon::from_canonical_tagged(EPISODE_TAG, bytes)?;
    let e = check_decoded(e)?;
    if e != e.normalized() {
        return Err(ModelError::Canon(CanonError::NotCanonical));
    }
    Ok(e)
}

fn check_decoded(e: Episode) -> Result<Episode, ModelError> {
    if e.meta.schema_version != SCHEMA_VERSION {
        return Err(ModelError::UnsupportedSchema(e.meta.schema_version));
    }
    let violations = validate_episode(&e);
    if !violations.is_empty() {
        return Err(ModelError::InvalidEpisode(violations));
    }
    Ok(e)
}

/// Label of a task-tree node. Timestamps and quantities are deliberately
/// absent.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskLabel {
    pub event_type: String,
    /// Sorted role names of the annotation's participants.
    pub roles: Vec<Role>,
    pub outcome: Outcome,
}

impl TaskLabel {
    pub fn new(event_type: impl Into<String>, mut roles: Vec<Role>, outcome: Outcome) -> Self {
        roles.sort();
        roles.dedup();
        TaskLabel {
            event_type: event_type.into(),
            roles,
            outcome,
        }
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let roles: Vec<&str> = self.roles.iter().map(|r| r.name()).collect();
        write!(
            f,
            "{}[{}]:{}",
            self.event_type,
            roles.join(","),
            self.outcome.name()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub label: TaskLabel,
    pub children: Vec<TaskNode>,
}

impl TaskNode {
    pub fn leaf(label: TaskLabel) -> Self {
        TaskNode {
            label,
            children: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TaskNode::size).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(TaskNode::depth).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTree {
    pub root: TaskNode,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("episode has no annotations")]
    Empty,
    #[error("annotation tree has {0} roots")]
    MultipleRoots(usize),
    #[error("annotation parent links contain a cycle")]
    CycleDetected,
    #[error("annotation {0} references unknown parent {1}")]
    UnknownParent(String, String),
}

/// Abstracts the annotation tree into a labeled rooted tree. Children keep
/// annotation order.
pub fn extract_task_tree(e: &Episode) -> Result<TaskTree, TreeError> {
    if e.annotations.is_empty() {
        return Err(TreeError::Empty);
    }
    let ids: BTreeSet<&str> = e.annotations.iter().map(|a| a.id.as_str()).collect();
    let mut children: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut roots = Vec::new();
    for (i, a) in e.annotations.iter().enumerate() {
        match &a.parent {
            None => roots.push(i),
            Some(p) if ids.contains(p.as_str()) => children.entry(p.as_str()).or_default().push(i),
            Some(p) => return Err(TreeError::UnknownParent(a.id.clone(), p.clone())),
        }
    }
    match roots.len() {
        0 => return Err(TreeError::CycleDetected),
        1 => {}
        n => return Err(TreeError::MultipleRoots(n)),
    }

    fn build(
        e: &Episode,
        idx: usize,
        children: &BTreeMap<&str, Vec<usize>>,
        visited: &mut Vec<bool>,
    ) -> Result<TaskNode, TreeError> {
        if visited[idx] {
            return Err(TreeError::CycleDetected);
        }
        visited[idx] = true;
        let a = &e.annotations[idx];
        let label = TaskLabel::new(
            a.event_type.clone(),
            a.participants.keys().copied().collect(),
            a.outcome,
        );
        let kids = children
            .get(a.id.as_str())
            .map(|c| {
                c.iter()
                    .map(|&k| build(e, k, children, visited))
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()?
            .unwrap_or_default();
        Ok(TaskNode {
            label,
            children: kids,
        })
    }

    let mut visited = vec![false; e.annotations.len()];
    let root = build(e, roots[0], &children, &mut visited)?;
    // Anything unreachable from the root sits on a parent cycle.
    if visited.iter().any(|v| !v) {
        return Err(TreeError::CycleDetected);
    }
    Ok(TaskTree { root })
}
