//! Replay from trace and re-execution.
//!
//! [`replay`] rebuilds the world state and belief timeline from an episode's
//! symbolic layer alone. [`re_execute_and_diff`] runs the recorded plan
//! again and reports how the new recording relates to the stored one.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::hash::ContentHash;
use crate::model::{
    self, Belief, BeliefSnapshot, BeliefSource, EntityDescriptor, EntityKind, Episode, StateValue,
    Timestamp, GRIPPER_ID,
};
use crate::perception;
use crate::simworld::{self, NoiseMode, Plan, RunConfig, Scene};
use crate::store::{Store, StoreError};
use crate::verify;

/// Attribute values per entity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub entities: BTreeMap<String, BTreeMap<String, StateValue>>,
}

impl WorldState {
    /// Initial state recorded in a scene manifest.
    pub fn from_manifest(manifest: &[EntityDescriptor]) -> WorldState {
        let mut entities = BTreeMap::new();
        for d in manifest {
            let mut attrs = BTreeMap::new();
            match d.kind {
                EntityKind::Workspace => {
                    attrs.insert("spilled".to_string(), StateValue::Quantity(d.fill));
                }
                EntityKind::Gripper => {
                    attrs.insert("pose".to_string(), StateValue::Triple(d.pose));
                    attrs.insert(
                        "holding".to_string(),
                        d.holding
                            .clone()
                            .map_or(StateValue::Nothing, StateValue::Entity),
                    );
                }
                _ => {
                    attrs.insert("pose".to_string(), StateValue::Triple(d.pose));
                    if d.is_container {
                        attrs.insert("is_open".to_string(), StateValue::Bool(d.is_open));
                        attrs.insert("fill_level".to_string(), StateValue::Quantity(d.fill));
                    }
                }
            }
            entities.insert(d.id.clone(), attrs);
        }
        WorldState { entities }
    }

    pub fn get(&self, entity: &str, attribute: &str) -> Option<&StateValue> {
        self.entities.get(entity)?.get(attribute)
    }

    fn kinematic_beliefs(&self) -> BTreeMap<String, Belief> {
        self.entities
            .iter()
            .filter_map(|(id, attrs)| match attrs.get("pose") {
                Some(StateValue::Triple(pose)) => Some((
                    id.clone(),
                    Belief {
                        pose: *pose,
                        confidence_ppm: 1_000_000,
                    },
                )),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayResult {
    pub final_state: WorldState,
    pub belief_timeline: Vec<BeliefSnapshot>,
    /// Transitions applied.
    pub steps: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("invalid episode: {}", .0.join("; "))]
    InvalidEpisode(Vec<String>),
    #[error(
        "transition {index} ({entity}.{attribute}): recorded old value {recorded} but state holds {actual}"
    )]
    InconsistentTransition {
        index: usize,
        entity: String,
        attribute: String,
        recorded: StateValue,
        actual: StateValue,
    },
    #[error("{what} {hash} is not available: {source}")]
    Unavailable {
        what: &'static str,
        hash: ContentHash,
        source: StoreError,
    },
    #[error("stored {what} {hash} is malformed: {reason}")]
    Malformed {
        what: &'static str,
        hash: ContentHash,
        reason: String,
    },
    #[error("re-execution failed: {0}")]
    Execution(String),
}

/// Rebuilds state and beliefs from the symbolic layer. Raw frames are never
/// consulted.
pub fn replay(e: &Episode) -> Result<ReplayResult, ReplayError> {
    let problems = model::validate_episode(&e.normalized());
    if !problems.is_empty() {
        return Err(ReplayError::InvalidEpisode(problems));
    }
    let mut state = WorldState::from_manifest(&e.scene);
    let mut order: Vec<usize> = (0..e.transitions.len()).collect();
    order.sort_by_key(|&i| (e.transitions[i].t, i));

    let mut belief_timeline = Vec::with_capacity(e.beliefs.len());
    let mut snapshots = e.beliefs.iter().peekable();
    let mut applied = 0;
    let mut emit_until = |t: Option<Timestamp>, state: &WorldState, out: &mut Vec<BeliefSnapshot>| {
        while let Some(s) = snapshots.next_if(|s| t.is_none_or(|t| s.t < t)) {
            out.push(match s.source {
                BeliefSource::Kinematic => BeliefSnapshot {
                    t: s.t,
                    source: BeliefSource::Kinematic,
                    beliefs: state.kinematic_beliefs(),
                },
                BeliefSource::Perception => s.clone(),
            });
        }
    };
    for i in order {
        let tr = &e.transitions[i];
        emit_until(Some(tr.t), &state, &mut belief_timeline);
        let attrs = state.entities.entry(tr.entity.clone()).or_default();
        let current = attrs
            .get(&tr.attribute)
            .cloned()
            .unwrap_or(StateValue::Nothing);
        if current != tr.old_value {
            return Err(ReplayError::InconsistentTransition {
                index: i,
                entity: tr.entity.clone(),
                attribute: tr.attribute.clone(),
                recorded: tr.old_value.clone(),
                actual: current,
            });
        }
        attrs.insert(tr.attribute.clone(), tr.new_value.clone());
        applied += 1;
    }
    emit_until(None, &state, &mut belief_timeline);
    Ok(ReplayResult {
        final_state: state,
        belief_timeline,
        steps: applied,
    })
}

/// State at time `t`: every transition with timestamp ≤ `t` applied.
pub fn state_at(e: &Episode, t: Timestamp) -> Result<WorldState, ReplayError> {
    let mut truncated = e.clone();
    truncated.transitions.retain(|tr| tr.t <= t);
    truncated.beliefs.clear();
    Ok(replay(&truncated)?.final_state)
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub plan: Option<Plan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReexecVerdict {
    /// Canonical bytes are identical.
    IdenticalBytes,
    /// Same task tree and final states within tolerance.
    SemanticMatch,
    Mismatch,
}

impl fmt::Display for ReexecVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReexecVerdict::IdenticalBytes => "identical_bytes",
            ReexecVerdict::SemanticMatch => "semantic_match",
            ReexecVerdict::Mismatch => "mismatch",
        })
    }
}

/// First record at which two episodes differ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDiff {
    pub section: String,
    pub index: Option<usize>,
    pub original: Option<String>,
    pub reexecuted: Option<String>,
}

impl fmt::Display for RecordDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{i}]", self.section)?,
            None => write!(f, "{}", self.section)?,
        }
        let show = |s: &Option<String>| s.clone().unwrap_or_else(|| "absent".into());
        write!(
            f,
            ": original {} / re-executed {}",
            show(&self.original),
            show(&self.reexecuted)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReexecReport {
    pub verdict: ReexecVerdict,
    pub first_difference: Option<RecordDiff>,
    pub reexecuted: Episode,
    pub reexecuted_hash: ContentHash,
}

/// Loads the recorded plan and pipeline from the store and re-runs them.
pub fn re_execute(
    e: &Episode,
    store: &Store,
    overrides: &Overrides,
) -> Result<Episode, ReplayError> {
    let plan = match &overrides.plan {
        Some(p) => p.clone(),
        None => load_plan(store, &e.meta.plan_hash)?,
    };
    let pipeline = e
        .meta
        .pipeline_hash
        .map(|h| load_pipeline(store, &h))
        .transpose()?;
    let scene =
        Scene::from_manifest(&e.scene).map_err(|err| ReplayError::Execution(err.to_string()))?;
    let cfg = RunConfig {
        seed: overrides.seed.unwrap_or(e.meta.seed),
        tick_us: e.meta.tick_us,
        faults: e.meta.faults,
        noise: NoiseMode::Seeded,
    };
    simworld::record(&scene, &plan, &cfg, pipeline.as_ref())
        .map_err(|err| ReplayError::Execution(err.to_string()))
}

pub fn load_plan(store: &Store, h: &ContentHash) -> Result<Plan, ReplayError> {
    let bytes = store.get(h).map_err(|source| ReplayError::Unavailable {
        what: "plan",
        hash: *h,
        source,
    })?;
    simworld::decode_canonical_plan(&bytes).map_err(|err| ReplayError::Malformed {
        what: "plan",
        hash: *h,
        reason: err.to_string(),
    })
}

pub fn load_pipeline(
    store: &Store,
    h: &ContentHash,
) -> Result<perception::PipelineNode, ReplayError> {
    let bytes = store.get(h).map_err(|source| ReplayError::Unavailable {
        what: "pipeline",
        hash: *h,
        source,
    })?;
    perception::decode_canonical_pipeline(&bytes).map_err(|err| ReplayError::Malformed {
        what: "pipeline",
        hash: *h,
        reason: err.to_string(),
    })
}

pub fn re_execute_and_diff(
    e: &Episode,
    store: &Store,
    overrides: &Overrides,
) -> Result<ReexecReport, ReplayError> {
    let mut original = e.clone();
    original.meta.created = None;
    let reexecuted = re_execute(&original, store, overrides)?;
    let encode = |x: &Episode| {
        model::canonical_encode(x).map_err(|err| ReplayError::Execution(err.to_string()))
    };
    let original_bytes = encode(&original)?;
    let new_bytes = encode(&reexecuted)?;
    let reexecuted_hash = ContentHash::of(&new_bytes);
    if original_bytes == new_bytes {
        return Ok(ReexecReport {
            verdict: ReexecVerdict::IdenticalBytes,
            first_difference: None,
            reexecuted,
            reexecuted_hash,
        });
    }
    let first_difference = first_difference(&original, &reexecuted);
    let verdict = if semantically_equal(&original, &reexecuted) {
        ReexecVerdict::SemanticMatch
    } else {
        ReexecVerdict::Mismatch
    };
    Ok(ReexecReport {
        verdict,
        first_difference,
        reexecuted,
        reexecuted_hash,
    })
}

fn semantically_equal(a: &Episode, b: &Episode) -> bool {
    let trees = match (model::extract_task_tree(a), model::extract_task_tree(b)) {
        (Ok(x), Ok(y)) => verify::is_isomorphic(&x, &y),
        _ => false,
    };
    trees
        && simworld::compare_outcomes(a, b)
            .map(|r| r.is_match())
            .unwrap_or(false)
}

/// First differing record, walking sections in encoding order.
pub fn first_difference(a: &Episode, b: &Episode) -> Option<RecordDiff> {
    let text = |v: &dyn erased::Canonical| v.canonical();
    if a.meta != b.meta {
        return Some(RecordDiff {
            section: "meta".into(),
            index: None,
            original: Some(text(&a.meta)),
            reexecuted: Some(text(&b.meta)),
        });
    }
    fn walk<T: PartialEq + erased::Canonical>(name: &str, x: &[T], y: &[T]) -> Option<RecordDiff> {
        let n = x.len().max(y.len());
        (0..n).find_map(|i| {
            let (l, r) = (x.get(i), y.get(i));
            (l != r).then(|| RecordDiff {
                section: name.into(),
                index: Some(i),
                original: l.map(|v| v.canonical()),
                reexecuted: r.map(|v| v.canonical()),
            })
        })
    }
    walk("scene", &a.scene, &b.scene)
        .or_else(|| walk("frames", &a.frames, &b.frames))
        .or_else(|| walk("transitions", &a.transitions, &b.transitions))
        .or_else(|| walk("annotations", &a.annotations, &b.annotations))
        .or_else(|| walk("beliefs", &a.beliefs, &b.beliefs))
}

mod erased {
    use serde::Serialize;

    pub trait Canonical {
        fn canonical(&self) -> String;
    }

    impl<T: Serialize> Canonical for T {
        fn canonical(&self) -> String {
            let bytes = super::canon::to_canonical(self).unwrap_or_default();
            String::from_utf8(bytes).unwrap_or_default()
        }
    }
}

/// Gripper pose in a world state.
pub fn gripper_pose(state: &WorldState) -> Option<&StateValue> {
    state.get(GRIPPER_ID, "pose")
}
