//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use neemtrace_core::expr::{CmpOp, Expr};
use neemtrace_core::model::{self, FaultSpec, Outcome, Quantity, Role, TaskLabel, TaskNode, TaskTree, Unit};
use neemtrace_core::query::{self, Column, EpisodeAtom, EventAtom, MetaField, Query, Target, TextField, TimeField};
use neemtrace_core::rng::SplitMix64;
use neemtrace_core::rules::{self, Aggregate, Comparison, FieldRef, Rule, Severity};
use neemtrace_core::scenario::{self, PlanStyle};
use neemtrace_core::simworld::{self, Action, NoiseMode, RunConfig};
use neemtrace_core::verify::{self, Context, Quadruplet, VerifierSpec};
use neemtrace_core::store::ObjectStatus;
use neemtrace_core::{ContentHash, ObjectKind, Store};

const TICK_US: u64 = 10_000;
const GRASP_FORCE: &str = "rule grasp_force on grasp: require max(force_torque.fz) >= 2.0 N";

type Outcome_ = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn temp_store() -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("store")).unwrap();
    (dir, store)
}

fn put_episode(store: &Store, plan: &simworld::Plan, e: &model::Episode) -> ContentHash {
    store.put(&plan.canonical_bytes(), ObjectKind::Plan).unwrap();
    store.put(&model::canonical_encode(e).unwrap(), ObjectKind::Episode).unwrap()
}

// 1 -------------------------------------------------------------------------

fn determinism() -> Outcome_ {
    let scene = scenario::pour_ready_scene();
    let plan = scenario::six_action_plan();
    let kinds: Vec<&str> = plan.actions.iter().map(Action::event_type).collect();
    check(kinds == ["grasp", "move_to", "pour", "release", "open", "close"], || format!("plan is {kinds:?}"))?;
    let start = Instant::now();
    let mut hashes = std::collections::BTreeSet::new();
    for _ in 0..100 {
        let e = simworld::run_plan(&scene, &plan, 7, TICK_US, FaultSpec::NONE).unwrap();
        check(e.annotations.iter().all(|a| a.outcome == Outcome::Succeeded), || "an action failed".into())?;
        hashes.insert(ContentHash::of(&model::canonical_encode(&e).unwrap()));
    }
    let took = start.elapsed();
    check(hashes.len() == 1, || format!("{} distinct hashes", hashes.len()))?;
    check(took < Duration::from_secs(5), || format!("took {}", secs(took)))?;
    Ok(format!("100/100 identical hashes in {}", secs(took)))
}

// 2 -------------------------------------------------------------------------

fn tamper_evidence() -> Outcome_ {
    let (_dir, store) = temp_store();
    let plan = scenario::pour_plan();
    let e = simworld::run_plan(&scenario::lab_scene(300), &plan, 3, TICK_US, FaultSpec::NONE).unwrap();
    let h = put_episode(&store, &plan, &e);
    let path = store.object_path(&h);
    let original = fs::read(&path).unwrap();
    let mut rng = SplitMix64::new(0x7a3e);
    let start = Instant::now();
    let mut detected = 0;
    for _ in 0..1000 {
        let mut bytes = original.clone();
        let i = rng.below(bytes.len() as u64) as usize;
        bytes[i] ^= 1 + rng.below(255) as u8;
        fs::write(&path, &bytes).unwrap();
        let by_get = store.get(&h).is_err();
        let by_scan = store
            .verify_all()
            .unwrap()
            .iter()
            .any(|(x, s)| *x == h && *s != ObjectStatus::Ok);
        if by_get && by_scan {
            detected += 1;
        }
    }
    fs::write(&path, &original).unwrap();
    let took = start.elapsed();
    check(detected == 1000, || format!("{detected}/1000 detected"))?;
    check(took < Duration::from_secs(10), || format!("took {}", secs(took)))?;
    check(store.get(&h).is_ok(), || "restored object unreadable".into())?;
    Ok(format!("1000/1000 flips detected in {}", secs(took)))
}

// 3 -------------------------------------------------------------------------

fn replay_fidelity() -> Outcome_ {
    for seed in 0..50u64 {
        let style = if seed % 2 == 0 { PlanStyle::Feasible } else { PlanStyle::Arbitrary };
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, style);
        let sim = simworld::simulate(&scene, &plan, &RunConfig::seeded(seed, TICK_US, FaultSpec::NONE)).unwrap();
        let r = neemtrace_core::replay::replay(&sim.episode).map_err(|e| format!("seed {seed}: {e}"))?;
        check(r.belief_timeline == sim.episode.beliefs, || format!("seed {seed}: belief timeline differs"))?;
        let recorded = neemtrace_core::replay::WorldState::from_manifest(&sim.final_scene.to_manifest());
        check(r.final_state == recorded, || format!("seed {seed}: final scene differs"))?;
    }
    Ok("50/50 plans replay exactly".into())
}

// 4 -------------------------------------------------------------------------

fn semantic_validation() -> Outcome_ {
    let slip = FaultSpec { grasp_slip_ppm: 1_000_000, pour_spill_ppm: 0 };
    let (_dir, store) = temp_store();
    let mut seed = 0u64;
    let mut checked = 0;
    while checked < 25 {
        seed += 1;
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, PlanStyle::Feasible);
        if !plan.actions.iter().any(|a| matches!(a, Action::Grasp { .. })) {
            continue;
        }
        let run = |s: u64, faults| simworld::run_plan(&scene, &plan, s, TICK_US, faults).unwrap();
        let a = run(seed, FaultSpec::NONE);
        let b = run(seed + 1, FaultSpec::NONE);
        let ta = model::extract_task_tree(&a).unwrap();
        let tb = model::extract_task_tree(&b).unwrap();
        check(verify::is_isomorphic(&ta, &tb), || format!("seed {seed}: nominal runs differ in shape"))?;

        let faulty = run(seed + 1, slip);
        let h = put_episode(&store, &plan, &faulty);
        let ctx = Context { episode: &faulty, episode_hash: h, store: &store, rules: &[], reference: Some((ContentHash::of(b"ref"), &a)) };
        let result = verify::run_verifier(&VerifierSpec::tree_isomorphism(&a), &ctx).map_err(|e| e.to_string())?;
        check(!result.quadruplet.decision, || format!("seed {seed}: slip not detected"))?;
        checked += 1;
    }
    Ok("25/25 isomorphic across seeds, 25/25 slips detected".into())
}

// 5 -------------------------------------------------------------------------

fn label(i: u8) -> TaskLabel {
    match i {
        0 => TaskLabel::new("grasp", vec![Role::Agent], Outcome::Succeeded),
        1 => TaskLabel::new("grasp", vec![Role::Agent], Outcome::Failed),
        _ => TaskLabel::new("pour", vec![Role::Source], Outcome::Succeeded),
    }
}

/// Ordered forests with exactly `n` nodes, as nested child lists.
#[derive(Clone)]
struct Shape(Vec<Shape>);

fn forests(n: usize, memo: &mut HashMap<usize, Vec<Vec<Shape>>>) -> Vec<Vec<Shape>> {
    if let Some(v) = memo.get(&n) {
        return v.clone();
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
    }
    for first in 1..=n {
        for kids in forests(first - 1, memo) {
            for rest in forests(n - first, memo) {
                let mut f = vec![Shape(kids.clone())];
                f.extend(rest);
                out.push(f);
            }
        }
    }
    memo.insert(n, out.clone());
    out
}

fn shape_size(s: &Shape) -> usize {
    1 + s.0.iter().map(shape_size).sum::<usize>()
}

fn labelled(s: &Shape, labels: &mut impl Iterator<Item = u8>) -> TaskNode {
    let l = label(labels.next().unwrap());
    TaskNode { label: l, children: s.0.iter().map(|c| labelled(c, labels)).collect() }
}

fn ordered(n: &TaskNode, code: &HashMap<TaskLabel, char>) -> String {
    let kids: String = n.children.iter().map(|c| ordered(c, code)).collect();
    format!("{}({kids})", code[&n.label])
}

/// Every serialization of `n` over all orderings of all child lists.
fn all_serializations(
    n: &TaskNode,
    code: &HashMap<TaskLabel, char>,
    memo: &mut HashMap<String, Rc<Vec<String>>>,
) -> Rc<Vec<String>> {
    let key = ordered(n, code);
    if let Some(v) = memo.get(&key) {
        return v.clone();
    }
    let kids: Vec<Rc<Vec<String>>> = n.children.iter().map(|c| all_serializations(c, code, memo)).collect();
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..kids.len()).collect();
    permutations(&mut order, 0, &mut |perm| {
        let mut partial = vec![String::new()];
        for &i in perm {
            partial = partial.iter().flat_map(|p| kids[i].iter().map(move |k| format!("{p}{k}"))).collect();
        }
        for p in partial {
            out.push(format!("{}({p})", code[&n.label]));
        }
    });
    let out = Rc::new(out);
    memo.insert(key, out.clone());
    out
}

fn permutations(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, f);
        v.swap(k, i);
    }
}

fn brute_iso(a: &TaskNode, b: &TaskNode) -> bool {
    if a.label != b.label || a.children.len() != b.children.len() {
        return false;
    }
    let mut found = false;
    let mut order: Vec<usize> = (0..b.children.len()).collect();
    permutations(&mut order, 0, &mut |perm| {
        if !found {
            found = a.children.iter().zip(perm).all(|(x, &j)| brute_iso(x, &b.children[j]));
        }
    });
    found
}

fn isomorphism_oracle() -> Outcome_ {
    let code: HashMap<TaskLabel, char> = (0..3).map(|i| (label(i), (b'a' + i) as char)).collect();
    let mut memo = HashMap::new();
    let mut forms = HashMap::new();
    let mut trees = 0usize;
    // brute normal form -> (canonical form, representative)
    let mut classes: BTreeMap<String, (String, TaskNode)> = BTreeMap::new();
    let mut by_canonical: HashMap<String, String> = HashMap::new();
    let mut reps_by_size: BTreeMap<usize, Vec<TaskNode>> = BTreeMap::new();
    for n in 1..=7usize {
        for kids in forests(n - 1, &mut memo) {
            let shape = Shape(kids);
            debug_assert_eq!(shape_size(&shape), n);
            for mut l in 0..3usize.pow(n as u32) {
                let mut digits = (0..n).map(|_| {
                    let d = (l % 3) as u8;
                    l /= 3;
                    d
                });
                let t = labelled(&shape, &mut digits);
                trees += 1;
                let normal = all_serializations(&t, &code, &mut forms).iter().min().unwrap().clone();
                let canonical = verify::canonical_form(&t);
                if let Some(prev) = by_canonical.insert(canonical.clone(), normal.clone()) {
                    check(prev == normal, || format!("canonical form merges {prev} and {normal}"))?;
                }
                match classes.get(&normal) {
                    Some((c, rep)) => {
                        check(*c == canonical, || format!("class {normal} has two canonical forms"))?;
                        let a = TaskTree { root: rep.clone() };
                        let b = TaskTree { root: t.clone() };
                        check(verify::is_isomorphic(&a, &b) && brute_iso(&a.root, &b.root), || format!("{normal} members disagree"))?;
                    }
                    None => {
                        if n <= 5 {
                            reps_by_size.entry(n).or_default().push(t.clone());
                        }
                        classes.insert(normal, (canonical, t));
                    }
                }
            }
        }
    }
    let mut pairs = 0usize;
    let reps: Vec<TaskTree> = reps_by_size.into_values().flatten().map(|root| TaskTree { root }).collect();
    for a in &reps {
        for b in &reps {
            let want = brute_iso(&a.root, &b.root);
            check(verify::is_isomorphic(a, b) == want, || "class pair disagrees".into())?;
            pairs += 1;
        }
    }
    Ok(format!(
        "{trees} ordered trees in {} classes; partitions agree; {pairs} class pairs up to 5 nodes agree",
        classes.len()
    ))
}

// 6 -------------------------------------------------------------------------

fn synthesis_oracle(results: &[(String, Quadruplet)]) -> Quadruplet {
    let failing: Vec<&(String, Quadruplet)> = {
        let mut f: Vec<_> = results.iter().filter(|(_, q)| !q.decision).collect();
        f.sort_by(|a, b| a.0.cmp(&b.0));
        f
    };
    if failing.is_empty() {
        let c = results.iter().map(|(_, q)| q.confidence_ppm).min().unwrap();
        return Quadruplet::pass(c, format!("all {} verifiers passed", results.len()));
    }
    let top = failing.iter().map(|(_, q)| q.confidence_ppm).max().unwrap();
    let lead = failing.iter().find(|(_, q)| q.confidence_ppm == top).unwrap();
    let text: Vec<&str> = failing.iter().map(|(_, q)| q.explanation.as_str()).collect();
    Quadruplet::fail(top, text.join("; "), lead.1.recovery.clone())
}

fn metareasoner() -> Outcome_ {
    let mut rng = SplitMix64::new(0x5e7);
    let mut vectors = 0;
    for case in 0..1000 {
        let n = 1 + case % 6;
        let names: Vec<String> = (0..n).map(|i| format!("v{}", (i * 7 + case) % 10)).collect();
        let conf: Vec<u32> = (0..n).map(|_| (rng.below(5) * 250_000) as u32).collect();
        for bits in 0u32..(1 << n) {
            let results: Vec<(String, Quadruplet)> = (0..n)
                .map(|i| {
                    let q = if bits >> i & 1 == 1 {
                        Quadruplet::pass(conf[i], format!("ok{i}"))
                    } else {
                        let entity = format!("e{i}");
                        Quadruplet::fail(conf[i], format!("bad{i}"), Some(vec![Action::Grasp { entity }]))
                    };
                    (names[i].clone(), q)
                })
                .collect();
            let got = verify::synthesize(&results).map_err(|e| e.to_string())?;
            check(got == synthesis_oracle(&results), || format!("case {case} bits {bits:b}: {got}"))?;
            vectors += 1;
        }
    }
    Ok(format!("1000 cases, {vectors} decision vectors agree"))
}

// 7 -------------------------------------------------------------------------

fn rule_engine() -> Outcome_ {
    let rule = rules::parse_rule(GRASP_FORCE).map_err(|e| e.to_string())?;
    let mut flagged = Vec::new();
    for i in 0..20i64 {
        let mass = 50 + i * 350 / 19;
        let e = simworld::run_plan(&scenario::lab_scene(mass), &scenario::pour_plan(), i as u64, TICK_US, FaultSpec::NONE).unwrap();
        let hit = !rules::evaluate(&rule, &e).map_err(|e| e.to_string())?.is_empty();
        check(hit == (mass < 200), || format!("mass {mass} g flagged={hit}"))?;
        if hit {
            flagged.push(mass);
        }
    }
    Ok(format!("flagged exactly the {} episodes under 200 g", flagged.len()))
}

// 8 -------------------------------------------------------------------------

fn positioned(text: &str, e: &neemtrace_core::expr::SyntaxError) -> bool {
    let lines: Vec<&str> = text.split('\n').collect();
    let line = e.pos.line as usize;
    line >= 1
        && line <= lines.len()
        && e.pos.col >= 1
        && e.pos.col as usize <= lines[line - 1].chars().count() + 1
        && !e.message.is_empty()
}

const SOUP: &[&str] = &[
    "rule", "on", "require", "severity", "warning", ":", "max", "(", ")", "force_torque.fz", ">=",
    "2.0", "N", "mL", "and", "or", "not", "episodes", "events", "in", "all", "where", "select",
    "event_type", "==", "\"grasp\"", "meta.seed", ",", "\"", "\\", "\n", "µ", "-", "9e9", "#",
];

fn random_text(rng: &mut SplitMix64) -> String {
    if rng.below(2) == 0 {
        let len = rng.below(40) as usize;
        let bytes: Vec<u8> = (0..len).map(|_| rng.below(256) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    } else {
        (0..rng.below(16)).map(|_| format!("{} ", SOUP[rng.below(SOUP.len() as u64) as usize])).collect()
    }
}

fn pick<T: Clone>(rng: &mut SplitMix64, items: &[T]) -> T {
    items[rng.below(items.len() as u64) as usize].clone()
}

const OPS: [CmpOp; 6] = [CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq, CmpOp::Ne];

fn random_expr<A>(rng: &mut SplitMix64, depth: u32, atom: &mut dyn FnMut(&mut SplitMix64) -> A) -> Expr<A> {
    match if depth == 0 { 0 } else { rng.below(4) } {
        0 => Expr::Atom(atom(rng)),
        1 => Expr::Not(Box::new(random_expr(rng, depth - 1, atom))),
        2 => Expr::And(Box::new(random_expr(rng, depth - 1, atom)), Box::new(random_expr(rng, depth - 1, atom))),
        _ => Expr::Or(Box::new(random_expr(rng, depth - 1, atom)), Box::new(random_expr(rng, depth - 1, atom))),
    }
}

fn random_rule(rng: &mut SplitMix64, i: usize) -> Rule {
    let fields = [
        ("force_torque.fz", Unit::Micronewton),
        ("joints.x", Unit::Micrometre),
        ("state.fill_level", Unit::Microlitre),
        ("proximity.nearest", Unit::Micrometre),
    ];
    let aggs = [Aggregate::Max, Aggregate::Min, Aggregate::Avg, Aggregate::Last];
    Rule {
        name: format!("r{i}"),
        scope: pick(rng, &["grasp", "pour", "move_to"]).to_string(),
        severity: pick(rng, &[Severity::Error, Severity::Warning]),
        condition: random_expr(rng, 3, &mut |rng| {
            let (field, unit) = pick(rng, &fields);
            Comparison {
                aggregate: pick(rng, &aggs),
                field: FieldRef::parse(field).unwrap(),
                op: pick(rng, &OPS),
                threshold: Quantity::new(rng.range(-5_000_000, 5_000_000), unit),
            }
        }),
    }
}

fn random_query(rng: &mut SplitMix64) -> Query {
    let text_fields = [
        TextField::EventType,
        TextField::Outcome,
        TextField::FailureReason,
        TextField::Participant(Role::Patient),
        TextField::Parent,
    ];
    let time_fields = [TimeField::Begin, TimeField::End, TimeField::Duration];
    if rng.below(3) == 0 {
        let filter = (rng.below(4) != 0).then(|| {
            random_expr(rng, 3, &mut |rng| {
                if rng.below(3) == 0 {
                    EpisodeAtom::Hash { field: MetaField::PlanHash, op: pick(rng, &[CmpOp::Eq, CmpOp::Ne]), value: ContentHash::of(&rng.next_u64().to_le_bytes()) }
                } else {
                    EpisodeAtom::Int { field: pick(rng, &[MetaField::Seed, MetaField::TickUs]), op: pick(rng, &OPS), value: rng.next_u64() }
                }
            })
        });
        return Query::Episodes { filter };
    }
    let target = if rng.below(2) == 0 { Target::All } else { Target::Episode(ContentHash::of(&rng.next_u64().to_le_bytes())) };
    let filter = (rng.below(4) != 0).then(|| {
        random_expr(rng, 3, &mut |rng| match rng.below(3) {
            0 => EventAtom::Text {
                field: pick(rng, &text_fields),
                op: pick(rng, &[CmpOp::Eq, CmpOp::Ne]),
                value: pick(rng, &["grasp", "failed", "a \"quoted\" \\ value", "", "µ"]).to_string(),
            },
            1 => EventAtom::Time { field: pick(rng, &time_fields), op: pick(rng, &OPS), value: Quantity::new(rng.range(0, 20_000_000), Unit::Microsecond) },
            _ => EventAtom::Aggregate(Comparison {
                aggregate: Aggregate::Max,
                field: FieldRef::parse("force_torque.fz").unwrap(),
                op: pick(rng, &OPS),
                threshold: Quantity::new(rng.range(0, 4_000_000), Unit::Micronewton),
            }),
        })
    });
    let select = (0..rng.below(3))
        .map(|_| if rng.below(2) == 0 { Column::Text(pick(rng, &text_fields)) } else { Column::Time(pick(rng, &time_fields)) })
        .collect();
    Query::Events { target, filter, select }
}

fn parser_robustness() -> Outcome_ {
    let mut rng = SplitMix64::new(0xf00d);
    for i in 0..10_000 {
        let text = random_text(&mut rng);
        let outcome = panic::catch_unwind(|| (rules::parse_rule(&text).err(), query::parse_query(&text).err()))
            .map_err(|_| format!("input {i} panicked: {text:?}"))?;
        for e in [outcome.0, outcome.1].into_iter().flatten() {
            check(positioned(&text, &e), || format!("unpositioned error {e} for {text:?}"))?;
        }
    }
    for i in 0..500 {
        let rule = random_rule(&mut rng, i);
        let text = rules::format_rule(&rule);
        check(rules::parse_rule(&text).ok().as_ref() == Some(&rule), || format!("rule round trip failed: {text}"))?;
        let q = random_query(&mut rng);
        let text = query::format_query(&q);
        check(query::parse_query(&text).ok().as_ref() == Some(&q), || format!("query round trip failed: {text}"))?;
    }
    Ok("10000 random inputs gave only positioned errors; 500 rules and 500 queries round-trip".into())
}

// 9 -------------------------------------------------------------------------

fn imagination_cycle() -> Outcome_ {
    for seed in 0..25u64 {
        let style = if seed % 2 == 0 { PlanStyle::Feasible } else { PlanStyle::Arbitrary };
        let scene = scenario::random_scene(seed);
        let plan = scenario::random_plan(&scene, seed, style);
        let cfg = RunConfig { seed, tick_us: TICK_US, faults: FaultSpec::NONE, noise: NoiseMode::Nominal };
        let observed = simworld::simulate(&scene, &plan, &cfg).unwrap().episode;
        let report = simworld::compare_outcomes(&simworld::predict(&scene, &plan).unwrap(), &observed).map_err(|e| e.to_string())?;
        check(report.is_match(), || format!("seed {seed}: {:?}", report.discrepancies))?;
    }
    let mut closed = scenario::lab_scene(300);
    let cup = closed.entities.iter_mut().find(|e| e.id == "cup1").unwrap();
    cup.is_open = false;
    let plan = scenario::pour_plan();
    let observed = simworld::run_plan(&closed, &plan, 2, TICK_US, FaultSpec::NONE).unwrap();
    let report = simworld::compare_outcomes(&simworld::predict(&scenario::lab_scene(300), &plan).unwrap(), &observed).map_err(|e| e.to_string())?;
    let d = report
        .discrepancies
        .iter()
        .find(|d| d.entity == "cup1")
        .ok_or("no discrepancy on cup1")?;
    check(d.explanation.contains("container closed"), || format!("explanation {:?}", d.explanation))?;
    let pour = observed.annotations.iter().find(|a| a.event_type == "pour").ok_or("no pour annotation")?;
    let reason = pour.failure_reason.clone().unwrap_or_default();
    check(pour.outcome == Outcome::Failed && reason.contains("open before pouring: destination"), || format!("pour annotation {reason:?}"))?;
    Ok(format!("25/25 predictions match; closed cup explained as {:?}", d.explanation))
}

// 10 ------------------------------------------------------------------------

fn cli(store: &Path, args: &[&str]) -> (i32, String) {
    let mut argv = vec!["neemtrace".to_string(), "--store".into(), store.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = neemtrace_cli::dispatch(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err))
}

fn audit_gate() -> Outcome_ {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata");
    let file = |n: &str| data.join(n).display().to_string();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let run = |scene: &str| -> Result<String, String> {
        let (code, out) = cli(&store, &["run", "--scene", &file(scene), "--plan", &file("pour.plan"), "--seed", "1"]);
        check(code == 0, || format!("run {scene} exited {code}: {out}"))?;
        Ok(out.trim().to_string())
    };
    let clean = run("lab.scene")?;
    let weak = run("weak.scene")?;
    let rules = file("grasp.rules");
    let (code, out) = cli(&store, &["verify", &clean, "--rules", &rules]);
    check(code == 0, || format!("clean verify exited {code}: {out}"))?;
    let (code, out) = cli(&store, &["verify", &weak, "--rules", &rules]);
    check(code == 1, || format!("weak verify exited {code}: {out}"))?;
    check(out.contains("recovery\n  1. grasp(bottle1)"), || format!("no recovery plan in: {out}"))?;
    let (code, out) = cli(&store, &["store", "verify"]);
    check(code == 0, || format!("store verify exited {code}: {out}"))?;
    Ok(format!("clean exit 0, weak exit 1 with recovery, store verify: {}", out.lines().last().unwrap_or("")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome_); 10] = [
        ("determinism", determinism),
        ("tamper evidence", tamper_evidence),
        ("replay fidelity", replay_fidelity),
        ("semantic validation", semantic_validation),
        ("isomorphism oracle", isomorphism_oracle),
        ("metareasoner oracle", metareasoner),
        ("rule engine", rule_engine),
        ("parser robustness", parser_robustness),
        ("imagination cycle", imagination_cycle),
        ("audit gate", audit_gate),
    ];
    panic::set_hook(Box::new(|_| {}));
    let suite = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (status, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {:>2} {name}: {detail} [{}]", i + 1, secs(start.elapsed()));
    }
    println!("acceptance: {}/10 passed in {}", 10 - failed, secs(suite.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
