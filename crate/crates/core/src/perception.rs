//! Perception pipelines as behavior trees.
//!
//! A pipeline is a tree of `sequence`, `fallback` and `annotator` nodes that
//! runs once per observed object. Annotators add hypotheses to a common
//! analysis structure ([`Cas`]) and report a confidence; an annotator
//! succeeds when its confidence reaches the threshold of the nearest
//! enclosing fallback. Every annotator, executed or not, leaves a
//! [`TraceEntry`] with a justification.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canon::{self, CanonError};
use crate::hash::ContentHash;
use crate::model::{
    Belief, BeliefSnapshot, BeliefSource, EntityKind, Episode, Outcome, Role,
    SemanticAnnotation, Triple,
};
use crate::rng::SplitMix64;
use crate::simworld::Scene;

pub const PIPELINE_TAG: &str = "pipeline";
pub const PERCEIVE_EVENT: &str = "perceive";
/// Per-axis observation noise half-width.
pub const OBSERVATION_NOISE_UM: u64 = 500;

const PERCEPTION_STREAM: u64 = 0x7065_7263_6570_7431;
const MAX_PPM: u32 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    PrimitiveDetector,
    TransparentObjectDetector,
    PoseEstimator,
}

impl AnnotatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AnnotatorKind::PrimitiveDetector => "primitive_detector",
            AnnotatorKind::TransparentObjectDetector => "transparent_object_detector",
            AnnotatorKind::PoseEstimator => "pose_estimator",
        }
    }

    /// Confidence for one observed object.
    pub fn confidence_ppm(self, obj: &ObservedObject) -> u32 {
        match (self, obj.transparent) {
            (AnnotatorKind::PrimitiveDetector, false) => 900_000,
            (AnnotatorKind::PrimitiveDetector, true) => 400_000,
            (AnnotatorKind::TransparentObjectDetector, true) => 850_000,
            (AnnotatorKind::TransparentObjectDetector, false) => 100_000,
            (AnnotatorKind::PoseEstimator, _) => 800_000,
        }
    }
}

impl fmt::Display for AnnotatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case", deny_unknown_fields)]
pub enum PipelineNode {
    Sequence {
        children: Vec<PipelineNode>,
    },
    Fallback {
        threshold_ppm: u32,
        children: Vec<PipelineNode>,
    },
    Annotator {
        annotator: AnnotatorKind,
    },
}

impl PipelineNode {
    pub fn annotator(kind: AnnotatorKind) -> Self {
        PipelineNode::Annotator { annotator: kind }
    }

    fn validate(&self, path: &str) -> Result<(), PerceptionError> {
        match self {
            PipelineNode::Annotator { .. } => Ok(()),
            PipelineNode::Sequence { children } | PipelineNode::Fallback { children, .. } => {
                if children.is_empty() {
                    return Err(PerceptionError::InvalidPipeline(format!(
                        "node {path} has no children"
                    )));
                }
                if let PipelineNode::Fallback { threshold_ppm, .. } = self {
                    if *threshold_ppm > MAX_PPM {
                        return Err(PerceptionError::InvalidPipeline(format!(
                            "node {path}: threshold {threshold_ppm} exceeds {MAX_PPM} ppm"
                        )));
                    }
                }
                children
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, c)| c.validate(&child_path(path, i)))
            }
        }
    }

    /// Annotators below this node with their paths and effective thresholds.
    fn annotators(&self, out: &mut Vec<(String, AnnotatorKind, u32)>, path: &str, threshold: u32) {
        match self {
            PipelineNode::Annotator { annotator } => {
                out.push((path.to_string(), *annotator, threshold))
            }
            PipelineNode::Sequence { children } => {
                for (i, c) in children.iter().enumerate() {
                    c.annotators(out, &child_path(path, i), threshold);
                }
            }
            PipelineNode::Fallback {
                threshold_ppm,
                children,
            } => {
                for (i, c) in children.iter().enumerate() {
                    c.annotators(out, &child_path(path, i), *threshold_ppm);
                }
            }
        }
    }
}

fn child_path(path: &str, i: usize) -> String {
    format!("{path}.{i}")
}

pub fn decode_pipeline(bytes: &[u8]) -> Result<PipelineNode, CanonError> {
    canon::from_text_tagged(PIPELINE_TAG, bytes)
}

/// Decodes a stored pipeline, requiring canonical bytes.
pub fn decode_canonical_pipeline(bytes: &[u8]) -> Result<PipelineNode, CanonError> {
    canon::from_canonical_tagged(PIPELINE_TAG, bytes)
}

pub fn pipeline_bytes(root: &PipelineNode) -> Vec<u8> {
    canon::to_canonical_tagged(PIPELINE_TAG, root).expect("pipelines always encode")
}

pub fn pipeline_hash(root: &PipelineNode) -> ContentHash {
    ContentHash::of(&pipeline_bytes(root))
}

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedObject {
    pub id: String,
    pub kind: EntityKind,
    /// True pose plus observation noise.
    pub pose: Triple,
    pub transparent: bool,
}

/// Source of per-axis observation offsets.
pub trait Noise {
    fn offset_um(&mut self) -> i64;
}

pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn offset_um(&mut self) -> i64 {
        0
    }
}

pub struct SeededNoise(SplitMix64);

impl SeededNoise {
    pub fn new(seed: u64) -> Self {
        SeededNoise(SplitMix64::new(seed))
    }

    /// Noise stream of an episode recorded with `seed`, independent of the
    /// simulator's own stream.
    pub fn for_episode(seed: u64) -> Self {
        Self::new(seed ^ PERCEPTION_STREAM)
    }
}

impl Noise for SeededNoise {
    fn offset_um(&mut self) -> i64 {
        self.0.symmetric(OBSERVATION_NOISE_UM)
    }
}

/// Observes every scene entity, in id order.
pub fn observe(scene: &Scene, noise: &mut impl Noise) -> Vec<ObservedObject> {
    let mut entities: Vec<_> = scene.entities.iter().collect();
    entities.sort_by(|a, b| a.id.cmp(&b.id));
    entities
        .into_iter()
        .map(|e| {
            let mut pose = e.pose;
            pose.x += noise.offset_um();
            pose.y += noise.offset_um();
            pose.z += noise.offset_um();
            ObservedObject {
                id: e.id.clone(),
                kind: e.kind,
                pose,
                transparent: e.transparent,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub annotator: AnnotatorKind,
    pub confidence_ppm: u32,
    pub pose: Triple,
    /// Object class, for detectors.
    pub class: Option<EntityKind>,
}

/// Common analysis structure: hypotheses accepted per object.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cas {
    pub hypotheses: BTreeMap<String, Vec<Hypothesis>>,
    /// Whether the tree succeeded for each object.
    pub perceived: BTreeMap<String, bool>,
}

impl Cas {
    /// Highest-confidence hypothesis of an object; the first wins ties.
    pub fn best(&self, id: &str) -> Option<&Hypothesis> {
        self.hypotheses
            .get(id)?
            .iter()
            .fold(None, |best: Option<&Hypothesis>, h| match best {
                Some(b) if b.confidence_ppm >= h.confidence_ppm => Some(b),
                _ => Some(h),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutcome {
    Success,
    LowConfidence,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub object: String,
    /// Position in the tree, e.g. `0.1.0`.
    pub path: String,
    pub annotator: AnnotatorKind,
    pub outcome: TraceOutcome,
    pub confidence_ppm: Option<u32>,
    pub threshold_ppm: u32,
    pub justification: String,
}

/// Runs the pipeline over each observation.
pub fn execute_pipeline(
    root: &PipelineNode,
    observations: &[ObservedObject],
) -> Result<(Cas, Vec<TraceEntry>), PerceptionError> {
    root.validate("0")?;
    let mut cas = Cas::default();
    let mut trace = Vec::new();
    for obj in observations {
        let mut run = Run {
            obj,
            cas: &mut cas,
            trace: &mut trace,
        };
        let ok = run.node(root, "0", Context::TOP);
        cas.perceived.insert(obj.id.clone(), ok);
    }
    Ok((cas, trace))
}

#[derive(Clone, Copy)]
struct Context {
    threshold: u32,
    /// A later fallback alternative exists if this subtree fails.
    alternative: bool,
}

impl Context {
    const TOP: Context = Context {
        threshold: 0,
        alternative: false,
    };
}

struct Run<'a> {
    obj: &'a ObservedObject,
    cas: &'a mut Cas,
    trace: &'a mut Vec<TraceEntry>,
}

impl Run<'_> {
    fn node(&mut self, node: &PipelineNode, path: &str, ctx: Context) -> bool {
        match node {
            PipelineNode::Annotator { annotator } => self.annotate(*annotator, path, ctx),
            PipelineNode::Sequence { children } => {
                for (i, c) in children.iter().enumerate() {
                    if !self.node(c, &child_path(path, i), ctx) {
                        self.skip_rest(children, path, i + 1, ctx, "earlier step failed");
                        return false;
                    }
                }
                true
            }
            PipelineNode::Fallback {
                threshold_ppm,
                children,
            } => {
                for (i, c) in children.iter().enumerate() {
                    let inner = Context {
                        threshold: *threshold_ppm,
                        alternative: i + 1 < children.len() || ctx.alternative,
                    };
                    if self.node(c, &child_path(path, i), inner) {
                        self.skip_rest(children, path, i + 1, inner, "earlier alternative succeeded");
                        return true;
                    }
                }
                false
            }
        }
    }

    fn skip_rest(
        &mut self,
        children: &[PipelineNode],
        path: &str,
        from: usize,
        ctx: Context,
        why: &str,
    ) {
        for (i, c) in children.iter().enumerate().skip(from) {
            let mut annotators = Vec::new();
            c.annotators(&mut annotators, &child_path(path, i), ctx.threshold);
            for (p, kind, threshold) in annotators {
                self.trace.push(TraceEntry {
                    object: self.obj.id.clone(),
                    path: p,
                    annotator: kind,
                    outcome: TraceOutcome::Skipped,
                    confidence_ppm: None,
                    threshold_ppm: threshold,
                    justification: format!("skipped: {why}"),
                });
            }
        }
    }

    fn annotate(&mut self, kind: AnnotatorKind, path: &str, ctx: Context) -> bool {
        let c = kind.confidence_ppm(self.obj);
        let t = ctx.threshold;
        let ok = c >= t;
        let justification = if ok {
            format!("confidence {c} meets threshold {t}")
        } else if ctx.alternative {
            format!("confidence {c} below threshold {t} → fallback")
        } else {
            format!("confidence {c} below threshold {t} → no alternative left")
        };
        if ok {
            let class = match kind {
                AnnotatorKind::PoseEstimator => None,
                _ => Some(self.obj.kind),
            };
            self.cas
                .hypotheses
                .entry(self.obj.id.clone())
                .or_default()
                .push(Hypothesis {
                    annotator: kind,
                    confidence_ppm: c,
                    pose: self.obj.pose,
                    class,
                });
        }
        self.trace.push(TraceEntry {
            object: self.obj.id.clone(),
            path: path.to_string(),
            annotator: kind,
            outcome: if ok {
                TraceOutcome::Success
            } else {
                TraceOutcome::LowConfidence
            },
            confidence_ppm: Some(c),
            threshold_ppm: t,
            justification,
        });
        ok
    }
}

/// Appends a `perceive` annotation at the end of the episode, one child per
/// executed annotator, and a perception belief snapshot holding the best
/// hypothesis per object.
pub fn attach_to_episode(cas: &Cas, trace: &[TraceEntry], episode: Episode) -> Episode {
    let mut e = episode;
    let t = e.end_time();
    let root_id = e
        .root_annotation()
        .map(|a| a.id.clone())
        .expect("episode has a root annotation");
    let perceived_all = cas.perceived.values().all(|ok| *ok);
    let failed: Vec<&str> = cas
        .perceived
        .iter()
        .filter(|(_, ok)| !**ok)
        .map(|(id, _)| id.as_str())
        .collect();
    e.annotations.push(SemanticAnnotation {
        id: "p0".into(),
        parent: Some(root_id),
        event_type: PERCEIVE_EVENT.into(),
        begin: t,
        end: t,
        participants: BTreeMap::new(),
        outcome: if perceived_all {
            Outcome::Succeeded
        } else {
            Outcome::Failed
        },
        failure_reason: (!perceived_all).then(|| format!("not perceived: {}", failed.join(", "))),
    });
    let executed = trace.iter().filter(|x| x.outcome != TraceOutcome::Skipped);
    for (i, entry) in executed.enumerate() {
        let ok = entry.outcome == TraceOutcome::Success;
        e.annotations.push(SemanticAnnotation {
            id: format!("p{}", i + 1),
            parent: Some("p0".into()),
            event_type: entry.annotator.name().into(),
            begin: t,
            end: t,
            participants: BTreeMap::from([(Role::Patient, entry.object.clone())]),
            outcome: if ok { Outcome::Succeeded } else { Outcome::Failed },
            failure_reason: (!ok).then(|| entry.justification.clone()),
        });
    }
    let beliefs = cas
        .hypotheses
        .keys()
        .filter_map(|id| {
            cas.best(id).map(|h| {
                (
                    id.clone(),
                    Belief {
                        pose: h.pose,
                        confidence_ppm: h.confidence_ppm,
                    },
                )
            })
        })
        .collect();
    e.beliefs.push(BeliefSnapshot {
        t,
        source: BeliefSource::Perception,
        beliefs,
    });
    e
}
