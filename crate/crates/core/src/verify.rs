//! Verifier pipeline and metareasoner.
//!
//! The metareasoner selects verifiers whose competence matches the event
//! types of an episode, runs them concurrently, and synthesizes their
//! quadruplets into a final verdict. The result is an [`AuditTrail`],
//! stored content-addressed like episodes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canon::{self, CanonError};
use crate::hash::ContentHash;
use crate::model::{self, Episode, Outcome, Role, SemanticAnnotation, TaskNode, TaskTree};
use crate::replay::{self, Overrides, ReexecVerdict, ReplayError};
use crate::rules::{self, Rule, RuleError, Severity, Violation};
use crate::simworld::{self, Action, Plan, Scene};
use crate::store::{ObjectKind, ObjectStatus, Store, StoreError};

pub const AUDIT_TRAIL_TAG: &str = "audit_trail";

pub const FULL_CONFIDENCE: u32 = 1_000_000;
pub const RULE_FAIL_CONFIDENCE: u32 = 900_000;
pub const DISCREPANCY_PASS_CONFIDENCE: u32 = 950_000;
pub const DISCREPANCY_FAIL_CONFIDENCE: u32 = 850_000;
/// Confidence of a verdict reached without the recorded plan.
pub const NO_PLAN_CONFIDENCE: u32 = 500_000;

/// Event types produced by simworld actions.
pub const ACTION_EVENTS: [&str; 6] = ["close", "grasp", "move_to", "open", "pour", "release"];

/// Verifier output `(D_s, C_f, E_d, E_r)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadruplet {
    pub decision: bool,
    pub confidence_ppm: u32,
    pub explanation: String,
    /// Present only on failure.
    pub recovery: Option<Vec<Action>>,
}

impl Quadruplet {
    pub fn pass(confidence_ppm: u32, explanation: impl Into<String>) -> Self {
        Quadruplet {
            decision: true,
            confidence_ppm,
            explanation: explanation.into(),
            recovery: None,
        }
    }

    pub fn fail(
        confidence_ppm: u32,
        explanation: impl Into<String>,
        recovery: Option<Vec<Action>>,
    ) -> Self {
        Quadruplet {
            decision: false,
            confidence_ppm,
            explanation: explanation.into(),
            recovery,
        }
    }
}

impl fmt::Display for Quadruplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D_s={} C_f={} E_d={:?}",
            self.decision, self.confidence_ppm, self.explanation
        )?;
        if let Some(r) = &self.recovery {
            let steps: Vec<String> = r.iter().map(|a| a.to_string()).collect();
            write!(f, " E_r=[{}]", steps.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Rule,
    ReplayDeterminism,
    TreeIsomorphism,
    Discrepancy,
    HashIntegrity,
}

impl VerifierKind {
    pub fn always_on(self) -> bool {
        matches!(
            self,
            VerifierKind::HashIntegrity | VerifierKind::ReplayDeterminism
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierSpec {
    pub name: String,
    pub competence: BTreeSet<String>,
    pub kind: VerifierKind,
}

pub const RULE_PREFIX: &str = "rule:";

impl VerifierSpec {
    pub fn new(name: impl Into<String>, kind: VerifierKind, competence: &[&str]) -> Self {
        VerifierSpec {
            name: name.into(),
            competence: competence.iter().map(|s| s.to_string()).collect(),
            kind,
        }
    }

    pub fn hash_integrity() -> Self {
        Self::new("hash_integrity", VerifierKind::HashIntegrity, &[])
    }

    pub fn replay_determinism() -> Self {
        Self::new("replay_determinism", VerifierKind::ReplayDeterminism, &[])
    }

    pub fn discrepancy() -> Self {
        Self::new("discrepancy", VerifierKind::Discrepancy, &ACTION_EVENTS)
    }

    pub fn for_rule(rule: &Rule) -> Self {
        Self::new(
            format!("{RULE_PREFIX}{}", rule.name),
            VerifierKind::Rule,
            &[rule.scope.as_str()],
        )
    }

    pub fn tree_isomorphism(reference: &Episode) -> Self {
        VerifierSpec {
            name: "tree_isomorphism".into(),
            competence: reference.event_types(),
            kind: VerifierKind::TreeIsomorphism,
        }
    }
}

/// Selects the always-on verifiers plus every verifier competent for at
/// least one event type of the episode, sorted by name. Later duplicates
/// of a name are dropped.
pub fn plan_verification(episode: &Episode, available: &[VerifierSpec]) -> Vec<VerifierSpec> {
    let events = episode.event_types();
    let mut names = BTreeSet::new();
    let mut out: Vec<VerifierSpec> = available
        .iter()
        .filter(|s| s.kind.always_on() || !s.competence.is_disjoint(&events))
        .filter(|s| names.insert(s.name.clone()))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// What verifiers may consult besides the episode.
pub struct Context<'a> {
    pub episode: &'a Episode,
    pub episode_hash: ContentHash,
    pub store: &'a Store,
    pub rules: &'a [Rule],
    pub reference: Option<(ContentHash, &'a Episode)>,
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("no quadruplets to synthesize")]
    EmptyInput,
    #[error("tree_isomorphism requires a reference episode")]
    MissingReference,
    #[error("verifier {0} names no known rule")]
    UnknownRule(String),
    #[error("episode {0} not found")]
    NotFound(ContentHash),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Canon(#[from] CanonError),
}

/// Quadruplet plus rule violations, when the verifier is a rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifierResult {
    pub quadruplet: Quadruplet,
    pub violations: Vec<Violation>,
}

impl From<Quadruplet> for VerifierResult {
    fn from(q: Quadruplet) -> Self {
        VerifierResult {
            quadruplet: q,
            violations: Vec::new(),
        }
    }
}

pub fn run_verifier(spec: &VerifierSpec, ctx: &Context) -> Result<VerifierResult, VerifyError> {
    match spec.kind {
        VerifierKind::HashIntegrity => hash_integrity(ctx).map(Into::into),
        VerifierKind::ReplayDeterminism => Ok(replay_determinism(ctx).into()),
        VerifierKind::Discrepancy => Ok(discrepancy(ctx).into()),
        VerifierKind::TreeIsomorphism => tree_isomorphism(ctx).map(Into::into),
        VerifierKind::Rule => {
            let name = spec.name.strip_prefix(RULE_PREFIX).unwrap_or(&spec.name);
            let rule = ctx
                .rules
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| VerifyError::UnknownRule(spec.name.clone()))?;
            rule_verifier(rule, ctx)
        }
    }
}

fn hash_integrity(ctx: &Context) -> Result<Quadruplet, VerifyError> {
    Ok(match ctx.store.verify(&ctx.episode_hash)? {
        ObjectStatus::Ok => Quadruplet::pass(FULL_CONFIDENCE, "hash verified"),
        ObjectStatus::Corrupt => Quadruplet::fail(
            FULL_CONFIDENCE,
            format!("stored bytes of {} do not match their hash", ctx.episode_hash),
            None,
        ),
        ObjectStatus::Missing => Quadruplet::fail(
            FULL_CONFIDENCE,
            format!("episode object {} is missing", ctx.episode_hash),
            None,
        ),
    })
}

fn replay_determinism(ctx: &Context) -> Quadruplet {
    match replay::re_execute_and_diff(ctx.episode, ctx.store, &Overrides::default()) {
        Ok(r) if r.verdict == ReexecVerdict::IdenticalBytes => Quadruplet::pass(
            FULL_CONFIDENCE,
            format!("re-execution reproduced hash {}", r.reexecuted_hash),
        ),
        Ok(r) => {
            let at = r
                .first_difference
                .map(|d| format!(" first difference at {d}"))
                .unwrap_or_default();
            Quadruplet::fail(
                FULL_CONFIDENCE,
                format!("re-execution diverged ({});{at}", r.verdict),
                None,
            )
        }
        Err(ReplayError::Unavailable { what, hash, .. }) => Quadruplet::fail(
            NO_PLAN_CONFIDENCE,
            format!("{what} {hash} not in store; re-execution impossible"),
            None,
        ),
        Err(e) => Quadruplet::fail(FULL_CONFIDENCE, format!("re-execution failed: {e}"), None),
    }
}

fn load_plan(ctx: &Context) -> Option<Plan> {
    replay::load_plan(ctx.store, &ctx.episode.meta.plan_hash).ok()
}

/// The plan step recorded by an action annotation, or one rebuilt from
/// its participants.
fn action_for(a: &SemanticAnnotation, plan: Option<&Plan>) -> Option<Action> {
    if let Some(step) = simworld::action_index(&a.id)
        .and_then(|i| plan.and_then(|p| p.actions.get(i)))
        .filter(|step| step.event_type() == a.event_type)
    {
        return Some(step.clone());
    }
    let patient = a.participants.get(&Role::Patient).cloned();
    match a.event_type.as_str() {
        "grasp" => patient.map(|entity| Action::Grasp { entity }),
        "open" => patient.map(|entity| Action::Open { entity }),
        "close" => patient.map(|entity| Action::Close { entity }),
        "release" => Some(Action::Release),
        _ => None,
    }
}

fn recovery_for<'a>(
    annotations: impl IntoIterator<Item = &'a SemanticAnnotation>,
    plan: Option<&Plan>,
) -> Option<Vec<Action>> {
    let mut steps: Vec<Action> = Vec::new();
    for a in annotations {
        if let Some(s) = action_for(a, plan) {
            if !steps.contains(&s) {
                steps.push(s);
            }
        }
    }
    (!steps.is_empty()).then_some(steps)
}

fn rule_verifier(rule: &Rule, ctx: &Context) -> Result<VerifierResult, VerifyError> {
    let violations = rules::evaluate(rule, ctx.episode)?;
    let errors: Vec<&Violation> = violations
        .iter()
        .filter(|v| v.severity == Severity::Error)
        .collect();
    let scoped = ctx
        .episode
        .annotations
        .iter()
        .filter(|a| a.event_type == rule.scope)
        .count();
    let quadruplet = if errors.is_empty() {
        let mut text = format!(
            "rule {}: {scoped} {} annotation(s) checked",
            rule.name, rule.scope
        );
        if !violations.is_empty() {
            let warnings: Vec<&str> = violations.iter().map(|v| v.message.as_str()).collect();
            text.push_str(&format!(", warnings: {}", warnings.join("; ")));
        }
        Quadruplet::pass(FULL_CONFIDENCE, text)
    } else {
        let plan = load_plan(ctx);
        let failing = errors
            .iter()
            .filter_map(|v| ctx.episode.annotation(&v.annotation));
        let messages: Vec<&str> = errors.iter().map(|v| v.message.as_str()).collect();
        Quadruplet::fail(
            RULE_FAIL_CONFIDENCE,
            messages.join("; "),
            recovery_for(failing, plan.as_ref()),
        )
    };
    Ok(VerifierResult {
        quadruplet,
        violations,
    })
}

fn discrepancy(ctx: &Context) -> Quadruplet {
    let Some(plan) = load_plan(ctx) else {
        return Quadruplet::fail(
            NO_PLAN_CONFIDENCE,
            format!(
                "plan {} not in store; no prediction possible",
                ctx.episode.meta.plan_hash
            ),
            None,
        );
    };
    let report = Scene::from_manifest(&ctx.episode.scene)
        .and_then(|scene| simworld::predict(&scene, &plan))
        .and_then(|predicted| {
            simworld::compare_outcomes(&predicted, ctx.episode).map(|r| (predicted, r))
        });
    let (predicted, report) = match report {
        Ok(x) => x,
        Err(e) => {
            return Quadruplet::fail(FULL_CONFIDENCE, format!("prediction failed: {e}"), None)
        }
    };
    if report.is_match() {
        return Quadruplet::pass(
            DISCREPANCY_PASS_CONFIDENCE,
            "observed outcome matches prediction",
        );
    }
    let lines: Vec<String> = report
        .discrepancies
        .iter()
        .map(|d| {
            format!(
                "{}.{}: predicted {}, observed {} ({})",
                d.entity, d.attribute, d.predicted, d.observed, d.explanation
            )
        })
        .collect();
    let unexpected = ctx.episode.annotations.iter().filter(|a| {
        a.outcome == Outcome::Failed
            && a.parent.is_some()
            && predicted
                .annotation(&a.id)
                .is_some_and(|p| p.outcome == Outcome::Succeeded)
    });
    Quadruplet::fail(
        DISCREPANCY_FAIL_CONFIDENCE,
        lines.join("; "),
        recovery_for(unexpected, Some(&plan)),
    )
}

fn tree_isomorphism(ctx: &Context) -> Result<Quadruplet, VerifyError> {
    let (ref_hash, reference) = ctx.reference.ok_or(VerifyError::MissingReference)?;
    let trees = model::extract_task_tree(ctx.episode)
        .and_then(|a| model::extract_task_tree(reference).map(|b| (a, b)));
    Ok(match trees {
        Err(e) => Quadruplet::fail(FULL_CONFIDENCE, format!("no task tree: {e}"), None),
        Ok((a, b)) if is_isomorphic(&a, &b) => Quadruplet::pass(
            FULL_CONFIDENCE,
            format!("task tree isomorphic to reference {ref_hash}"),
        ),
        Ok((a, b)) => {
            let failed = failed_labels(&a.root);
            let detail = if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            };
            Quadruplet::fail(
                FULL_CONFIDENCE,
                format!(
                    "task tree ({} nodes) not isomorphic to reference {ref_hash} ({} nodes){detail}",
                    a.root.size(),
                    b.root.size()
                ),
                None,
            )
        }
    })
}

fn failed_labels(n: &TaskNode) -> Vec<String> {
    let mut out = Vec::new();
    if n.label.outcome == Outcome::Failed && n.children.is_empty() {
        out.push(n.label.event_type.clone());
    }
    for c in &n.children {
        out.extend(failed_labels(c));
    }
    out
}

/// AHU canonical code: length-prefixed label, then the sorted codes of the
/// children in parentheses.
pub fn canonical_form(node: &TaskNode) -> String {
    let label = node.label.to_string();
    let mut kids: Vec<String> = node.children.iter().map(canonical_form).collect();
    kids.sort_unstable();
    let mut out = format!("{}:{label}(", label.len());
    for k in kids {
        out.push_str(&k);
    }
    out.push(')');
    out
}

/// Isomorphism of rooted, labeled, unordered trees.
pub fn is_isomorphic(a: &TaskTree, b: &TaskTree) -> bool {
    a.root.size() == b.root.size() && canonical_form(&a.root) == canonical_form(&b.root)
}

/// Combines per-verifier quadruplets. Input order does not matter: results
/// are sorted by verifier name first.
pub fn synthesize(results: &[(String, Quadruplet)]) -> Result<Quadruplet, VerifyError> {
    if results.is_empty() {
        return Err(VerifyError::EmptyInput);
    }
    let mut sorted: Vec<&(String, Quadruplet)> = results.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let failing: Vec<&(String, Quadruplet)> =
        sorted.iter().copied().filter(|(_, q)| !q.decision).collect();
    if failing.is_empty() {
        let confidence = sorted.iter().map(|(_, q)| q.confidence_ppm).min().unwrap();
        return Ok(Quadruplet::pass(
            confidence,
            format!("all {} verifiers passed", sorted.len()),
        ));
    }
    // The first maximum in name order wins ties.
    let lead = failing
        .iter()
        .copied()
        .fold(None::<&(String, Quadruplet)>, |best, cur| match best {
            Some(b) if b.1.confidence_ppm >= cur.1.confidence_ppm => Some(b),
            _ => Some(cur),
        })
        .unwrap();
    let explanation: Vec<&str> = failing.iter().map(|(_, q)| q.explanation.as_str()).collect();
    Ok(Quadruplet::fail(
        lead.1.confidence_ppm,
        explanation.join("; "),
        lead.1.recovery.clone(),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierOutcome {
    pub name: String,
    pub result: Quadruplet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditTrail {
    pub episode: ContentHash,
    /// Hash of the normalized rules text.
    pub rules: ContentHash,
    pub reference: Option<ContentHash>,
    pub pipeline: Vec<String>,
    pub results: Vec<VerifierOutcome>,
    #[serde(rename = "final")]
    pub verdict: Quadruplet,
    pub violations: Vec<Violation>,
    /// Wall-clock time of the audit; kept in the store index, not hashed.
    #[serde(skip)]
    pub created: Option<String>,
}

impl AuditTrail {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canon::to_canonical_tagged(AUDIT_TRAIL_TAG, self).expect("audit trails always encode")
    }
}

pub fn decode_canonical_trail(bytes: &[u8]) -> Result<AuditTrail, CanonError> {
    canon::from_canonical_tagged(AUDIT_TRAIL_TAG, bytes)
}

pub fn decode_trail(bytes: &[u8]) -> Result<AuditTrail, CanonError> {
    canon::from_text_tagged(AUDIT_TRAIL_TAG, bytes)
}

/// Verifiers on offer for an audit.
pub fn available_verifiers(rules: &[Rule], reference: Option<&Episode>) -> Vec<VerifierSpec> {
    let mut v = vec![
        VerifierSpec::hash_integrity(),
        VerifierSpec::replay_determinism(),
        VerifierSpec::discrepancy(),
    ];
    v.extend(rules.iter().map(VerifierSpec::for_rule));
    if let Some(r) = reference {
        v.push(VerifierSpec::tree_isomorphism(r));
    }
    v
}

/// Plans, runs and synthesizes the verification of a stored episode, then
/// stores the trail. Returns the trail and its hash.
pub fn audit(
    store: &Store,
    episode_hash: &ContentHash,
    rules: &[Rule],
    reference: Option<&ContentHash>,
    created: Option<String>,
) -> Result<(AuditTrail, ContentHash), VerifyError> {
    let mut trail = build_trail(store, episode_hash, rules, reference)?;
    let h = store.put_with_created(&trail.canonical_bytes(), ObjectKind::AuditTrail, created)?;
    trail.created = store.entry(&h).and_then(|e| e.created);
    Ok((trail, h))
}

fn get_episode(store: &Store, h: &ContentHash) -> Result<Episode, VerifyError> {
    store.get_episode(h).map_err(|e| match e {
        StoreError::NotFound(h) => VerifyError::NotFound(h),
        other => VerifyError::Store(other),
    })
}

/// Everything [`audit`] does except storing the result.
pub fn build_trail(
    store: &Store,
    episode_hash: &ContentHash,
    rules: &[Rule],
    reference: Option<&ContentHash>,
) -> Result<AuditTrail, VerifyError> {
    let episode = get_episode(store, episode_hash)?;
    let reference_episode = reference.map(|h| get_episode(store, h)).transpose()?;
    let ctx = Context {
        episode: &episode,
        episode_hash: *episode_hash,
        store,
        rules,
        reference: reference.copied().zip(reference_episode.as_ref()),
    };
    let pipeline = plan_verification(
        &episode,
        &available_verifiers(rules, reference_episode.as_ref()),
    );
    let outcomes: Vec<Result<VerifierResult, VerifyError>> = std::thread::scope(|s| {
        let handles: Vec<_> = pipeline
            .iter()
            .map(|spec| {
                let ctx = &ctx;
                s.spawn(move || run_verifier(spec, ctx))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("verifier thread panicked"))
            .collect()
    });
    let mut results = Vec::with_capacity(pipeline.len());
    let mut violations = Vec::new();
    for (spec, outcome) in pipeline.iter().zip(outcomes) {
        let r = outcome?;
        violations.extend(r.violations);
        results.push(VerifierOutcome {
            name: spec.name.clone(),
            result: r.quadruplet,
        });
    }
    let pairs: Vec<(String, Quadruplet)> = results
        .iter()
        .map(|o| (o.name.clone(), o.result.clone()))
        .collect();
    let verdict = synthesize(&pairs)?;
    Ok(AuditTrail {
        episode: *episode_hash,
        rules: ContentHash::of(rules::format_rules_file(rules).as_bytes()),
        reference: reference.copied(),
        pipeline: pipeline.into_iter().map(|s| s.name).collect(),
        results,
        verdict,
        violations,
        created: None,
    })
}
