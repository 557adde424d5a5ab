//! Recording, encoding and replay properties of generated episodes.

mod common;

use std::collections::BTreeMap;

use common::{generated, style, TICK_US};
use neemtrace_core::model::{
    self, BeliefSource, FaultSpec, Quantity, StateValue, Timestamp, GRIPPER_ID, WORKSPACE_ID,
};
use neemtrace_core::replay::{self, WorldState};
use neemtrace_core::rng::SplitMix64;
use neemtrace_core::scenario::{self, PlanStyle};
use neemtrace_core::simworld::{self, NoiseMode, RunConfig};
use neemtrace_core::verify;
use proptest::prelude::*;

fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for i in (1..items.len()).rev() {
        items.swap(i, rng.below(i as u64 + 1) as usize);
    }
}

fn total_liquid(state: &WorldState) -> i64 {
    state
        .entities
        .iter()
        .flat_map(|(id, attrs)| {
            attrs.iter().filter_map(move |(attr, v)| match (attr.as_str(), v) {
                ("fill_level", StateValue::Quantity(q)) => Some(q.value),
                ("spilled", StateValue::Quantity(q)) if id == WORKSPACE_ID => Some(q.value),
                _ => None,
            })
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn canonical_round_trip(seed in any::<u64>()) {
        let (_, _, e) = generated(seed, style(seed));
        let bytes = model::canonical_encode(&e).unwrap();
        let back = model::decode_canonical_episode(&bytes).unwrap();
        prop_assert_eq!(&back, &e);
        prop_assert_eq!(model::canonical_encode(&back).unwrap(), bytes);
    }

    #[test]
    fn encoding_ignores_unordered_construction(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let (_, _, e) = generated(seed, style(seed));
        let mut shuffled = e.clone();
        shuffle(&mut shuffled.frames, shuffle_seed);
        shuffle(&mut shuffled.scene, shuffle_seed.wrapping_add(1));
        prop_assert_eq!(
            model::canonical_encode(&shuffled).unwrap(),
            model::canonical_encode(&e).unwrap()
        );
    }

    #[test]
    fn task_tree_ignores_frames_beliefs_and_quantities(seed in any::<u64>()) {
        let (_, _, e) = generated(seed, style(seed));
        let tree = model::extract_task_tree(&e).unwrap();
        let mut changed = e.clone();
        changed.frames.truncate(changed.frames.len() / 2);
        changed.beliefs.clear();
        for t in &mut changed.transitions {
            if let StateValue::Quantity(q) = &mut t.new_value {
                q.value += 7;
            }
        }
        for d in &mut changed.scene {
            d.mass.value *= 2;
        }
        prop_assert_eq!(model::extract_task_tree(&changed).unwrap(), tree);
    }

    #[test]
    fn recording_is_deterministic(seed in any::<u64>()) {
        let (scene, plan, e) = generated(seed, style(seed));
        let again = simworld::run_plan(&scene, &plan, seed, TICK_US, FaultSpec::NONE).unwrap();
        prop_assert_eq!(
            model::episode_hash(&again).unwrap(),
            model::episode_hash(&e).unwrap()
        );
    }

    #[test]
    fn liquid_is_conserved(seed in any::<u64>(), spill in 0u32..=1_000_000) {
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, style(seed));
        let faults = FaultSpec { grasp_slip_ppm: 0, pour_spill_ppm: spill };
        let e = simworld::run_plan(&scene, &plan, seed, TICK_US, faults).unwrap();
        let initial = scene.total_liquid_ul();
        let mut times: Vec<Timestamp> = e.transitions.iter().map(|t| t.t).collect();
        times.dedup();
        for t in times {
            prop_assert_eq!(total_liquid(&replay::state_at(&e, t).unwrap()), initial);
        }
        prop_assert_eq!(total_liquid(&replay::replay(&e).unwrap().final_state), initial);
    }

    #[test]
    fn time_is_monotone(seed in any::<u64>()) {
        let (_, _, e) = generated(seed, style(seed));
        prop_assert!(e.transitions.windows(2).all(|w| w[0].t <= w[1].t));
        prop_assert!(e.beliefs.windows(2).all(|w| w[0].t <= w[1].t));
        let actions = &e.annotations[1..];
        prop_assert!(actions.windows(2).all(|w| w[0].end <= w[1].begin));
        let mut last: BTreeMap<&str, Timestamp> = BTreeMap::new();
        for f in &e.frames {
            if let Some(prev) = last.insert(&f.stream, f.t) {
                prop_assert!(prev < f.t);
            }
        }
    }

    #[test]
    fn nominal_run_matches_prediction(seed in any::<u64>()) {
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, style(seed));
        let cfg = RunConfig { seed, tick_us: 5_000, faults: FaultSpec::NONE, noise: NoiseMode::Nominal };
        let observed = simworld::simulate(&scene, &plan, &cfg).unwrap().episode;
        let predicted = simworld::predict(&scene, &plan).unwrap();
        let report = simworld::compare_outcomes(&predicted, &observed).unwrap();
        prop_assert!(report.is_match(), "{:?}", report.discrepancies);
    }

    #[test]
    fn replay_matches_recording(seed in any::<u64>()) {
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, style(seed));
        let sim = simworld::simulate(&scene, &plan, &RunConfig::seeded(seed, TICK_US, FaultSpec::NONE)).unwrap();
        let e = sim.episode;
        let result = replay::replay(&e).unwrap();
        prop_assert_eq!(&result.belief_timeline, &e.beliefs);
        prop_assert_eq!(result.steps, e.transitions.len());
        prop_assert_eq!(
            &result.final_state,
            &WorldState::from_manifest(&sim.final_scene.to_manifest())
        );
        for snap in e.beliefs.iter().filter(|s| s.source == BeliefSource::Kinematic) {
            let state = replay::state_at(&e, snap.t).unwrap();
            for (id, belief) in &snap.beliefs {
                prop_assert_eq!(state.get(id, "pose"), Some(&StateValue::Triple(belief.pose)));
            }
        }
    }

    #[test]
    fn fault_free_semantics_are_seed_invariant(seed in any::<u64>()) {
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, PlanStyle::Feasible);
        let tree = |s: u64| {
            let e = simworld::run_plan(&scene, &plan, s, TICK_US, FaultSpec::NONE).unwrap();
            model::extract_task_tree(&e).unwrap()
        };
        prop_assert!(verify::is_isomorphic(&tree(seed), &tree(seed.wrapping_add(1))));
    }
}

#[test]
fn same_stream_ties_are_rejected() {
    let (_, _, e) = generated(4, PlanStyle::Feasible);
    let mut tied = e.clone();
    let i = tied.frames.iter().position(|f| f.stream == "joints").unwrap();
    let mut dup = tied.frames[i].clone();
    dup.payload.insert("x".into(), Quantity::um(-1));
    tied.frames.insert(i + 1, dup);
    assert!(!model::validate_episode(&tied).is_empty());
    assert!(model::canonical_encode(&tied).is_err());
}

#[test]
fn cross_stream_ties_are_order_free() {
    let scene = scenario::pour_ready_scene();
    let plan = scenario::six_action_plan();
    let e = simworld::run_plan(&scene, &plan, 3, TICK_US, FaultSpec::NONE).unwrap();
    let mut swapped = e.clone();
    let pair = swapped
        .frames
        .windows(2)
        .position(|w| w[0].t == w[1].t && w[0].stream != w[1].stream)
        .expect("force frame shares a tick with a joints frame");
    swapped.frames.swap(pair, pair + 1);
    assert_ne!(swapped, e);
    assert_eq!(
        model::canonical_encode(&swapped).unwrap(),
        model::canonical_encode(&e).unwrap()
    );
}

#[test]
fn inconsistent_transition_is_reported() {
    let (_, _, e) = generated(2, PlanStyle::Feasible);
    let mut broken = e.clone();
    let i = broken
        .transitions
        .iter()
        .position(|t| t.entity == GRIPPER_ID && t.attribute == "pose")
        .unwrap();
    broken.transitions[i].old_value = StateValue::Nothing;
    match replay::replay(&broken) {
        Err(replay::ReplayError::InconsistentTransition { index, .. }) => assert_eq!(index, i),
        other => panic!("expected an inconsistent transition, got {other:?}"),
    }
}
