#![allow(dead_code)]

use std::collections::BTreeSet;

use neemtrace_core::expr::SyntaxError;
use neemtrace_core::model::{self, Episode, FaultSpec, Quantity, StateValue, Unit};
use neemtrace_core::expr::CmpOp;
use neemtrace_core::rules::{Aggregate, Comparison, FieldRef};
use proptest::prelude::*;
use neemtrace_core::scenario::{self, PlanStyle};
use neemtrace_core::simworld::{self, Plan, Scene};
use neemtrace_core::{ContentHash, ObjectKind, Store};

pub const TICK_US: u64 = 10_000;

/// Scene, plan and episode for one generator seed.
pub fn generated(seed: u64, style: PlanStyle) -> (Scene, Plan, Episode) {
    let scene = scenario::random_scene(seed);
    let plan = scenario::random_plan(&scene, seed, style);
    let e = simworld::run_plan(&scene, &plan, seed, TICK_US, FaultSpec::NONE).unwrap();
    (scene, plan, e)
}

pub fn style(seed: u64) -> PlanStyle {
    if seed % 2 == 0 {
        PlanStyle::Feasible
    } else {
        PlanStyle::Arbitrary
    }
}

/// Stores the episode together with its plan.
pub fn put_episode(store: &Store, plan: &Plan, e: &Episode) -> ContentHash {
    store.put(&plan.canonical_bytes(), ObjectKind::Plan).unwrap();
    store
        .put(&model::canonical_encode(e).unwrap(), ObjectKind::Episode)
        .unwrap()
}

pub fn temp_store() -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    (dir, store)
}

/// Errors must point inside the text (or one past its end).
pub fn assert_positioned(text: &str, e: &SyntaxError) {
    let lines: Vec<&str> = text.split('\n').collect();
    let line = e.pos.line as usize;
    assert!(line >= 1 && line <= lines.len(), "line {line} outside {text:?}");
    let width = lines[line - 1].chars().count() + 1;
    assert!(
        e.pos.col >= 1 && (e.pos.col as usize) <= width,
        "column {} outside line {line} of {text:?}",
        e.pos.col
    );
    assert!(!e.message.is_empty());
}

/// Every value of `field` visible to annotation `a`, gathered by walking
/// all (annotation, record) pairs.
pub fn brute_values(e: &Episode, a_id: &str, field: &FieldRef) -> Vec<i64> {
    let mut out = Vec::new();
    for a in e.annotations.iter().filter(|a| a.id == a_id) {
        match field {
            FieldRef::Frame { stream, field } => {
                for f in &e.frames {
                    if &f.stream == stream && a.begin <= f.t && f.t <= a.end {
                        if let Some(q) = f.payload.get(field) {
                            out.push(q.value);
                        }
                    }
                }
            }
            FieldRef::State { attribute } => {
                let who: BTreeSet<&String> = a.participants.values().collect();
                for t in &e.transitions {
                    let visible = who.is_empty() || who.contains(&t.entity);
                    if &t.attribute == attribute && a.begin <= t.t && t.t <= a.end && visible {
                        if let StateValue::Quantity(q) = &t.new_value {
                            out.push(q.value);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn brute_aggregate(agg: Aggregate, v: &[i64]) -> Option<i64> {
    if v.is_empty() {
        return None;
    }
    Some(match agg {
        Aggregate::Max => *v.iter().max().unwrap(),
        Aggregate::Min => *v.iter().min().unwrap(),
        Aggregate::Last => v[v.len() - 1],
        Aggregate::Avg => {
            let sum: i128 = v.iter().map(|&x| x as i128).sum();
            sum.div_euclid(v.len() as i128) as i64
        }
    })
}

/// Comparisons over fields every simworld episode knows, with thresholds in
/// the range those fields take.
pub fn episode_comparison() -> impl Strategy<Value = Comparison> {
    (
        arb_aggregate(),
        prop::sample::select(vec![
            ("force_torque.fz", Unit::Micronewton, 4_000_000i64),
            ("joints.x", Unit::Micrometre, 800_000),
            ("joints.z", Unit::Micrometre, 200_000),
            ("state.fill_level", Unit::Microlitre, 800_000),
            ("proximity.nearest", Unit::Micrometre, 600_000),
        ]),
        arb_op(),
        any::<prop::sample::Index>(),
    )
        .prop_map(|(aggregate, (field, unit, top), op, i)| Comparison {
            aggregate,
            field: FieldRef::parse(field).unwrap(),
            op,
            threshold: Quantity::new(i.index(top as usize + 1) as i64, unit),
        })
}

pub fn arb_op() -> impl Strategy<Value = CmpOp> {
    prop::sample::select(vec![CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq, CmpOp::Ne])
}

pub fn arb_aggregate() -> impl Strategy<Value = Aggregate> {
    prop::sample::select(vec![Aggregate::Max, Aggregate::Min, Aggregate::Avg, Aggregate::Last])
}
