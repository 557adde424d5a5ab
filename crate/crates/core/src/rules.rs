//! Validity-condition rules.
//!
//! ```text
//! rule grasp_force on grasp: require max(force_torque.fz) >= 2.0 N
//! rule clearance on move_to severity warning: require min(proximity.nearest) >= 50 mm
//! ```
//!
//! A rule is checked once per annotation of its scope event type, against
//! frames and transitions whose timestamps fall inside the annotation's
//! closed interval. The full grammar is in `docs/rules.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::expr::{self, CmpOp, Expr, Parser, SyntaxError, Tok};
use crate::model::{Episode, Quantity, SemanticAnnotation, StateValue, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

impl Severity {
    pub fn name(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Max,
    Min,
    Avg,
    Last,
}

impl Aggregate {
    pub fn name(self) -> &'static str {
        match self {
            Aggregate::Max => "max",
            Aggregate::Min => "min",
            Aggregate::Avg => "avg",
            Aggregate::Last => "last",
        }
    }

    pub fn from_name(s: &str) -> Option<Aggregate> {
        Some(match s {
            "max" => Aggregate::Max,
            "min" => Aggregate::Min,
            "avg" => Aggregate::Avg,
            "last" => Aggregate::Last,
            _ => return None,
        })
    }

    /// `None` on empty input; `avg` rounds toward negative infinity.
    pub fn apply(self, values: &[i64]) -> Option<i64> {
        let last = *values.last()?;
        Some(match self {
            Aggregate::Max => *values.iter().max()?,
            Aggregate::Min => *values.iter().min()?,
            Aggregate::Avg => {
                let sum: i128 = values.iter().map(|v| *v as i128).sum();
                sum.div_euclid(values.len() as i128) as i64
            }
            Aggregate::Last => last,
        })
    }
}

/// A raw-frame field (`stream.field`) or a symbolic attribute
/// (`state.attribute`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FieldRef {
    Frame { stream: String, field: String },
    State { attribute: String },
}

impl FieldRef {
    pub fn parse(s: &str) -> Option<FieldRef> {
        let (head, tail) = s.split_once('.')?;
        if head.is_empty() || tail.is_empty() || tail.contains('.') {
            return None;
        }
        Some(if head == "state" {
            FieldRef::State {
                attribute: tail.into(),
            }
        } else {
            FieldRef::Frame {
                stream: head.into(),
                field: tail.into(),
            }
        })
    }
}

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldRef::Frame { stream, field } => write!(f, "{stream}.{field}"),
            FieldRef::State { attribute } => write!(f, "state.{attribute}"),
        }
    }
}

/// Fields every simworld episode may carry, with their units.
pub const KNOWN_FIELDS: &[(&str, Unit)] = &[
    ("force_torque.fx", Unit::Micronewton),
    ("force_torque.fy", Unit::Micronewton),
    ("force_torque.fz", Unit::Micronewton),
    ("joints.x", Unit::Micrometre),
    ("joints.y", Unit::Micrometre),
    ("joints.z", Unit::Micrometre),
    ("proximity.nearest", Unit::Micrometre),
    ("state.fill_level", Unit::Microlitre),
    ("state.spilled", Unit::Microlitre),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Comparison {
    pub aggregate: Aggregate,
    pub field: FieldRef,
    pub op: CmpOp,
    pub threshold: Quantity,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}) {} {}",
            self.aggregate.name(),
            self.field,
            self.op,
            expr::format_quantity(&self.threshold)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub name: String,
    pub scope: String,
    pub severity: Severity,
    pub condition: Expr<Comparison>,
}

/// `aggregate(field) op number unit`.
pub fn parse_comparison(p: &mut Parser) -> Result<Comparison, SyntaxError> {
    let pos = p.pos();
    let name = p.ident("an aggregate (max, min, avg, last)")?;
    let aggregate = Aggregate::from_name(&name).ok_or_else(|| SyntaxError {
        pos,
        message: format!("unknown aggregate `{name}`; expected max, min, avg or last"),
    })?;
    p.expect(Tok::LParen)?;
    let field_pos = p.pos();
    let raw = p.ident("a field name")?;
    let field = FieldRef::parse(&raw).ok_or_else(|| SyntaxError {
        pos: field_pos,
        message: format!("field `{raw}` must have the form stream.field or state.attribute"),
    })?;
    p.expect(Tok::RParen)?;
    let op = p.op()?;
    let threshold = p.quantity()?;
    Ok(Comparison {
        aggregate,
        field,
        op,
        threshold,
    })
}

pub fn parse_rule(text: &str) -> Result<Rule, SyntaxError> {
    let mut p = Parser::new(text)?;
    let rule = parse_rule_tokens(&mut p)?;
    p.expect_end()?;
    Ok(rule)
}

fn parse_rule_tokens(p: &mut Parser) -> Result<Rule, SyntaxError> {
    p.expect_keyword("rule")?;
    let name = p.ident("a rule name")?;
    p.expect_keyword("on")?;
    let scope = p.ident("an event type")?;
    let severity = if p.eat_keyword("severity") {
        if p.eat_keyword("error") {
            Severity::Error
        } else if p.eat_keyword("warning") {
            Severity::Warning
        } else {
            return Err(p.unexpected("`error` or `warning`"));
        }
    } else {
        Severity::Error
    };
    p.expect(Tok::Colon)?;
    p.expect_keyword("require")?;
    let condition = expr::parse_expr(p, &mut parse_comparison)?;
    Ok(Rule {
        name,
        scope,
        severity,
        condition,
    })
}

/// One rule per line; blank lines and `#` comments are ignored. Rule names
/// must be unique.
pub fn parse_rules_file(text: &str) -> Result<Vec<Rule>, SyntaxError> {
    let mut rules: Vec<Rule> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i as u32 + 1;
        let relocate = |mut e: SyntaxError| {
            e.pos.line = lineno;
            e
        };
        let mut p = Parser::new(line).map_err(relocate)?;
        if *p.peek() == Tok::Eof {
            continue;
        }
        let rule = parse_rule_tokens(&mut p).map_err(relocate)?;
        p.expect_end().map_err(relocate)?;
        if rules.iter().any(|r| r.name == rule.name) {
            return Err(SyntaxError {
                pos: expr::Pos {
                    line: lineno,
                    col: 1,
                },
                message: format!("duplicate rule name `{}`", rule.name),
            });
        }
        rules.push(rule);
    }
    Ok(rules)
}

pub fn format_condition(e: &Expr<Comparison>) -> String {
    expr::format_expr(e, &|c: &Comparison| c.to_string())
}

/// Whitespace-normalized text; the default severity is omitted.
pub fn format_rule(rule: &Rule) -> String {
    let severity = match rule.severity {
        Severity::Error => String::new(),
        s => format!(" severity {}", s.name()),
    };
    format!(
        "rule {} on {}{severity}: require {}",
        rule.name,
        rule.scope,
        format_condition(&rule.condition)
    )
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_rule(self))
    }
}

pub fn format_rules_file(rules: &[Rule]) -> String {
    rules.iter().map(|r| format_rule(r) + "\n").collect()
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub rule: String,
    pub severity: Severity,
    pub annotation: String,
    pub observed: Option<Quantity>,
    pub threshold: Quantity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("rule {rule}: unknown field {field}; known fields: {}", .known.join(", "))]
    UnknownField {
        rule: String,
        field: String,
        known: Vec<String>,
    },
    #[error("rule {rule}: field {field} is measured in {found}, threshold is in {expected}")]
    UnitMismatch {
        rule: String,
        field: String,
        expected: &'static str,
        found: &'static str,
    },
}

/// Field name → unit, from the known table and the episode's own data.
pub fn vocabulary(e: &Episode) -> BTreeMap<String, Option<Unit>> {
    let mut v: BTreeMap<String, Option<Unit>> = KNOWN_FIELDS
        .iter()
        .map(|(f, u)| (f.to_string(), Some(*u)))
        .collect();
    for f in &e.frames {
        for (k, q) in &f.payload {
            v.entry(format!("{}.{k}", f.stream)).or_insert(Some(q.unit));
        }
    }
    for t in &e.transitions {
        let unit = match (&t.new_value, &t.old_value) {
            (StateValue::Quantity(q), _) | (_, StateValue::Quantity(q)) => Some(q.unit),
            _ => None,
        };
        let entry = v.entry(format!("state.{}", t.attribute)).or_insert(unit);
        if entry.is_none() {
            *entry = unit;
        }
    }
    v
}

/// Checks that every field is known and numeric in the threshold's unit.
pub fn check_fields(rule: &Rule, e: &Episode) -> Result<(), RuleError> {
    let vocab = vocabulary(e);
    for c in rule.condition.atoms() {
        let name = c.field.to_string();
        match vocab.get(&name) {
            None => {
                return Err(RuleError::UnknownField {
                    rule: rule.name.clone(),
                    field: name,
                    known: vocab.keys().cloned().collect(),
                })
            }
            Some(unit) => {
                let found = unit.map_or("a non-numeric value", |u| u.symbol());
                if *unit != Some(c.threshold.unit) {
                    return Err(RuleError::UnitMismatch {
                        rule: rule.name.clone(),
                        field: name,
                        expected: c.threshold.unit.symbol(),
                        found,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Values of a field within an annotation's interval, in record order.
/// State fields are restricted to the annotation's participants.
pub fn field_values(e: &Episode, a: &SemanticAnnotation, field: &FieldRef) -> Vec<i64> {
    let inside = |t| a.begin <= t && t <= a.end;
    match field {
        FieldRef::Frame { stream, field } => e
            .frames
            .iter()
            .filter(|f| &f.stream == stream && inside(f.t))
            .filter_map(|f| f.payload.get(field).map(|q| q.value))
            .collect(),
        FieldRef::State { attribute } => {
            let involved: BTreeSet<&str> = a.participants.values().map(String::as_str).collect();
            e.transitions
                .iter()
                .filter(|t| &t.attribute == attribute && inside(t.t))
                .filter(|t| involved.is_empty() || involved.contains(t.entity.as_str()))
                .filter_map(|t| match &t.new_value {
                    StateValue::Quantity(q) => Some(q.value),
                    _ => None,
                })
                .collect()
        }
    }
}

/// Aggregated value of a comparison's field, if any data exists.
pub fn observe(e: &Episode, a: &SemanticAnnotation, c: &Comparison) -> Option<Quantity> {
    c.aggregate
        .apply(&field_values(e, a, &c.field))
        .map(|v| Quantity::new(v, c.threshold.unit))
}

/// Result of checking one comparison.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AtomResult {
    Holds(Option<Quantity>),
    Fails(Quantity),
    NoData,
}

pub fn check_atom(e: &Episode, a: &SemanticAnnotation, c: &Comparison) -> AtomResult {
    match observe(e, a, c) {
        None => AtomResult::NoData,
        Some(q) if c.op.holds(&q.value, &c.threshold.value) => AtomResult::Holds(Some(q)),
        Some(q) => AtomResult::Fails(q),
    }
}

/// Violations of `rule` in `e`, in annotation order.
pub fn evaluate(rule: &Rule, e: &Episode) -> Result<Vec<Violation>, RuleError> {
    check_fields(rule, e)?;
    let mut out = Vec::new();
    for a in e.annotations.iter().filter(|a| a.event_type == rule.scope) {
        let atoms = rule.condition.atoms();
        if let Some(missing) = atoms
            .iter()
            .find(|c| matches!(check_atom(e, a, c), AtomResult::NoData))
        {
            out.push(Violation {
                rule: rule.name.clone(),
                severity: rule.severity,
                annotation: a.id.clone(),
                observed: None,
                threshold: missing.threshold,
                message: format!(
                    "{} violated by {} {}: no data for field {}",
                    rule.name, a.event_type, a.id, missing.field
                ),
            });
            continue;
        }
        let (ok, witness) = rule.condition.eval_with(&mut |c: &Comparison| {
            let r = check_atom(e, a, c);
            (matches!(r, AtomResult::Holds(_)), (c, r))
        });
        if ok {
            continue;
        }
        let (c, r) = witness;
        let observed = match r {
            AtomResult::Holds(q) => q,
            AtomResult::Fails(q) => Some(q),
            AtomResult::NoData => None,
        };
        let shown = observed.map_or("no data".to_string(), |q| expr::format_quantity(&q));
        out.push(Violation {
            rule: rule.name.clone(),
            severity: rule.severity,
            annotation: a.id.clone(),
            observed,
            threshold: c.threshold,
            message: format!(
                "{} violated by {} {}: {}({}) = {shown}, required {} {}",
                rule.name,
                a.event_type,
                a.id,
                c.aggregate.name(),
                c.field,
                c.op,
                expr::format_quantity(&c.threshold)
            ),
        });
    }
    Ok(out)
}
