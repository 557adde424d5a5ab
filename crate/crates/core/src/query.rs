//! Query language over the episode store.
//!
//! ```text
//! episodes where meta.seed == 42
//! events in all where event_type == "grasp" and outcome == "failed" select event_type, failure_reason
//! events in <hash> where max(force_torque.fz) < 2 N
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canon;
use crate::expr::{self, CmpOp, Expr, Parser, SyntaxError, Tok};
use crate::hash::ContentHash;
use crate::model::{Episode, Quantity, Role, SemanticAnnotation, Unit};
use crate::rules::{self, Comparison};
use crate::store::{ObjectKind, Store, StoreError};

pub const RESULT_TAG: &str = "query_result";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Query {
    Episodes {
        filter: Option<Expr<EpisodeAtom>>,
    },
    Events {
        target: Target,
        filter: Option<Expr<EventAtom>>,
        /// Empty means the default columns.
        select: Vec<Column>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    All,
    Episode(ContentHash),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaField {
    Seed,
    TickUs,
    SchemaVersion,
    GraspSlipPpm,
    PourSpillPpm,
    PlanHash,
    PipelineHash,
}

impl MetaField {
    const ALL: [MetaField; 7] = [
        MetaField::Seed,
        MetaField::TickUs,
        MetaField::SchemaVersion,
        MetaField::GraspSlipPpm,
        MetaField::PourSpillPpm,
        MetaField::PlanHash,
        MetaField::PipelineHash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaField::Seed => "meta.seed",
            MetaField::TickUs => "meta.tick_us",
            MetaField::SchemaVersion => "meta.schema_version",
            MetaField::GraspSlipPpm => "meta.faults.grasp_slip_ppm",
            MetaField::PourSpillPpm => "meta.faults.pour_spill_ppm",
            MetaField::PlanHash => "meta.plan_hash",
            MetaField::PipelineHash => "meta.pipeline_hash",
        }
    }

    fn is_hash(self) -> bool {
        matches!(self, MetaField::PlanHash | MetaField::PipelineHash)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EpisodeAtom {
    Int {
        field: MetaField,
        op: CmpOp,
        value: u64,
    },
    Hash {
        field: MetaField,
        op: CmpOp,
        value: ContentHash,
    },
}

/// String-valued annotation fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TextField {
    EventType,
    Outcome,
    Id,
    Parent,
    FailureReason,
    Participant(Role),
}

impl TextField {
    pub fn parse(s: &str) -> Option<TextField> {
        Some(match s {
            "event_type" => TextField::EventType,
            "outcome" => TextField::Outcome,
            "id" => TextField::Id,
            "parent" => TextField::Parent,
            "failure_reason" => TextField::FailureReason,
            _ => TextField::Participant(Role::from_name(s.strip_prefix("participants.")?)?),
        })
    }

    pub fn value<'a>(self, a: &'a SemanticAnnotation) -> Option<&'a str> {
        match self {
            TextField::EventType => Some(&a.event_type),
            TextField::Outcome => Some(a.outcome.name()),
            TextField::Id => Some(&a.id),
            TextField::Parent => a.parent.as_deref(),
            TextField::FailureReason => a.failure_reason.as_deref(),
            TextField::Participant(r) => a.participants.get(&r).map(String::as_str),
        }
    }
}

impl fmt::Display for TextField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextField::EventType => f.write_str("event_type"),
            TextField::Outcome => f.write_str("outcome"),
            TextField::Id => f.write_str("id"),
            TextField::Parent => f.write_str("parent"),
            TextField::FailureReason => f.write_str("failure_reason"),
            TextField::Participant(r) => write!(f, "participants.{}", r.name()),
        }
    }
}

/// Time-valued annotation fields, in µs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeField {
    Begin,
    End,
    Duration,
}

impl TimeField {
    pub fn parse(s: &str) -> Option<TimeField> {
        Some(match s {
            "begin" => TimeField::Begin,
            "end" => TimeField::End,
            "duration" => TimeField::Duration,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeField::Begin => "begin",
            TimeField::End => "end",
            TimeField::Duration => "duration",
        }
    }

    pub fn value(self, a: &SemanticAnnotation) -> i64 {
        let v = match self {
            TimeField::Begin => a.begin.0,
            TimeField::End => a.end.0,
            TimeField::Duration => a.end.0 - a.begin.0,
        };
        v as i64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventAtom {
    Text {
        field: TextField,
        op: CmpOp,
        value: String,
    },
    Time {
        field: TimeField,
        op: CmpOp,
        value: Quantity,
    },
    Aggregate(Comparison),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Text(TextField),
    Time(TimeField),
}

impl Column {
    pub const DEFAULT: [Column; 2] = [
        Column::Text(TextField::EventType),
        Column::Text(TextField::Outcome),
    ];

    fn parse(s: &str) -> Option<Column> {
        TextField::parse(s)
            .map(Column::Text)
            .or_else(|| TimeField::parse(s).map(Column::Time))
    }

    fn value(self, a: &SemanticAnnotation) -> String {
        match self {
            Column::Text(f) => f.value(a).unwrap_or_default().to_string(),
            Column::Time(f) => f.value(a).to_string(),
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Text(t) => write!(f, "{t}"),
            Column::Time(t) => f.write_str(t.name()),
        }
    }
}

pub fn parse_query(text: &str) -> Result<Query, SyntaxError> {
    let mut p = Parser::new(text)?;
    let q = if p.eat_keyword("episodes") {
        let filter = if p.eat_keyword("where") {
            Some(expr::parse_expr(&mut p, &mut parse_episode_atom)?)
        } else {
            None
        };
        Query::Episodes { filter }
    } else if p.eat_keyword("events") {
        p.expect_keyword("in")?;
        let target = match p.peek().clone() {
            Tok::Ident(s) if s == "all" => Target::All,
            Tok::Hash(h) => Target::Episode(h.parse().expect("lexer yields valid hex")),
            _ => return Err(p.unexpected("`all` or an episode hash")),
        };
        p.next();
        let filter = if p.eat_keyword("where") {
            Some(expr::parse_expr(&mut p, &mut parse_event_atom)?)
        } else {
            None
        };
        let mut select = Vec::new();
        if p.eat_keyword("select") {
            loop {
                let pos = p.pos();
                let name = p.ident("a column name")?;
                let col = Column::parse(&name).ok_or_else(|| SyntaxError {
                    pos,
                    message: format!("unknown column `{name}`"),
                })?;
                select.push(col);
                if *p.peek() != Tok::Comma {
                    break;
                }
                p.next();
            }
        }
        Query::Events {
            target,
            filter,
            select,
        }
    } else {
        return Err(p.unexpected("`episodes` or `events`"));
    };
    p.expect_end()?;
    Ok(q)
}

fn parse_episode_atom(p: &mut Parser) -> Result<EpisodeAtom, SyntaxError> {
    let pos = p.pos();
    let name = p.ident("a meta field")?;
    if *p.peek() == Tok::LParen {
        return Err(SyntaxError {
            pos,
            message: "aggregates are not allowed at episode scope".into(),
        });
    }
    let field = MetaField::ALL
        .into_iter()
        .find(|f| f.name() == name)
        .ok_or_else(|| SyntaxError {
            pos,
            message: format!("unknown episode field `{name}`"),
        })?;
    let op_pos = p.pos();
    let op = p.op()?;
    if field.is_hash() {
        if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
            return Err(SyntaxError {
                pos: op_pos,
                message: format!("{} supports only == and !=", field.name()),
            });
        }
        let value = match p.peek() {
            Tok::Hash(h) => h.parse().expect("lexer yields valid hex"),
            _ => return Err(p.unexpected("a hash")),
        };
        p.next();
        Ok(EpisodeAtom::Hash { field, op, value })
    } else {
        Ok(EpisodeAtom::Int {
            field,
            op,
            value: p.integer()?,
        })
    }
}

fn parse_event_atom(p: &mut Parser) -> Result<EventAtom, SyntaxError> {
    if matches!(p.peek(), Tok::Ident(_)) && *p.peek_at(1) == Tok::LParen {
        return rules::parse_comparison(p).map(EventAtom::Aggregate);
    }
    let pos = p.pos();
    let name = p.ident("a field name")?;
    if let Some(field) = TextField::parse(&name) {
        let op_pos = p.pos();
        let op = p.op()?;
        if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
            return Err(SyntaxError {
                pos: op_pos,
                message: format!("{name} supports only == and !="),
            });
        }
        let value = match p.peek() {
            Tok::Str(s) => s.clone(),
            _ => return Err(p.unexpected("a string literal")),
        };
        p.next();
        return Ok(EventAtom::Text { field, op, value });
    }
    if let Some(field) = TimeField::parse(&name) {
        let op = p.op()?;
        let q_pos = p.pos();
        let value = p.quantity()?;
        if value.unit != Unit::Microsecond {
            return Err(SyntaxError {
                pos: q_pos,
                message: format!("{name} is a time; expected a unit of s, ms or µs"),
            });
        }
        return Ok(EventAtom::Time { field, op, value });
    }
    Err(SyntaxError {
        pos,
        message: format!("unknown event field `{name}`"),
    })
}

fn format_episode_atom(a: &EpisodeAtom) -> String {
    match a {
        EpisodeAtom::Int { field, op, value } => format!("{} {op} {value}", field.name()),
        EpisodeAtom::Hash { field, op, value } => format!("{} {op} {value}", field.name()),
    }
}

fn format_event_atom(a: &EventAtom) -> String {
    match a {
        EventAtom::Text { field, op, value } => format!("{field} {op} {}", expr::quote(value)),
        EventAtom::Time { field, op, value } => {
            format!("{} {op} {}", field.name(), expr::format_quantity(value))
        }
        EventAtom::Aggregate(c) => c.to_string(),
    }
}

pub fn format_query(q: &Query) -> String {
    match q {
        Query::Episodes { filter } => match filter {
            None => "episodes".into(),
            Some(e) => format!("episodes where {}", expr::format_expr(e, &format_episode_atom)),
        },
        Query::Events {
            target,
            filter,
            select,
        } => {
            let mut s = match target {
                Target::All => "events in all".to_string(),
                Target::Episode(h) => format!("events in {h}"),
            };
            if let Some(e) = filter {
                s.push_str(" where ");
                s.push_str(&expr::format_expr(e, &format_event_atom));
            }
            if !select.is_empty() {
                let cols: Vec<String> = select.iter().map(|c| c.to_string()).collect();
                s.push_str(" select ");
                s.push_str(&cols.join(", "));
            }
            s
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_query(self))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|c| c.replace(['\t', '\n'], " ")).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_canonical(&self) -> Vec<u8> {
        canon::to_canonical_tagged(RESULT_TAG, self).expect("tables always encode")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("episode {0} not found")]
    NotFound(ContentHash),
    #[error("object {0} is not an episode")]
    NotAnEpisode(ContentHash),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn episode_matches(filter: &Expr<EpisodeAtom>, e: &Episode) -> bool {
    filter.eval(&mut |a: &EpisodeAtom| match a {
        EpisodeAtom::Int { field, op, value } => {
            let v = match field {
                MetaField::Seed => e.meta.seed,
                MetaField::TickUs => e.meta.tick_us,
                MetaField::SchemaVersion => e.meta.schema_version as u64,
                MetaField::GraspSlipPpm => e.meta.faults.grasp_slip_ppm as u64,
                MetaField::PourSpillPpm => e.meta.faults.pour_spill_ppm as u64,
                MetaField::PlanHash | MetaField::PipelineHash => return false,
            };
            op.holds(&v, value)
        }
        EpisodeAtom::Hash { field, op, value } => {
            let v = match field {
                MetaField::PlanHash => Some(e.meta.plan_hash),
                MetaField::PipelineHash => e.meta.pipeline_hash,
                _ => None,
            };
            match op {
                CmpOp::Eq => v == Some(*value),
                _ => v != Some(*value),
            }
        }
    })
}

/// Missing text or aggregate data makes an atom false.
pub fn event_matches(filter: &Expr<EventAtom>, e: &Episode, a: &SemanticAnnotation) -> bool {
    filter.eval(&mut |atom: &EventAtom| match atom {
        EventAtom::Text { field, op, value } => match (field.value(a), op) {
            (Some(v), CmpOp::Eq) => v == value,
            (Some(v), _) => v != value,
            (None, CmpOp::Eq) => false,
            (None, _) => true,
        },
        EventAtom::Time { field, op, value } => op.holds(&field.value(a), &value.value),
        EventAtom::Aggregate(c) => matches!(rules::check_atom(e, a, c), rules::AtomResult::Holds(_)),
    })
}

fn load(store: &Store, h: &ContentHash) -> Result<Episode, QueryError> {
    match store.entry(h) {
        None => Err(QueryError::NotFound(*h)),
        Some(entry) if entry.kind != ObjectKind::Episode => Err(QueryError::NotAnEpisode(*h)),
        Some(_) => Ok(store.get_episode(h)?),
    }
}

/// Rows are ordered by episode hash, then annotation begin, then id.
pub fn run_query(q: &Query, store: &Store) -> Result<Table, QueryError> {
    match q {
        Query::Episodes { filter } => {
            let mut rows = Vec::new();
            for h in store.list(ObjectKind::Episode) {
                let e = load(store, &h)?;
                if filter.as_ref().is_none_or(|f| episode_matches(f, &e)) {
                    rows.push(vec![
                        h.to_string(),
                        e.meta.seed.to_string(),
                        e.meta.tick_us.to_string(),
                        e.meta.plan_hash.to_string(),
                    ]);
                }
            }
            Ok(Table {
                columns: ["episode", "seed", "tick_us", "plan_hash"]
                    .map(String::from)
                    .to_vec(),
                rows,
            })
        }
        Query::Events {
            target,
            filter,
            select,
        } => {
            let hashes = match target {
                Target::All => store.list(ObjectKind::Episode),
                Target::Episode(h) => vec![*h],
            };
            let cols: &[Column] = if select.is_empty() {
                &Column::DEFAULT
            } else {
                select
            };
            let mut columns = vec!["episode".to_string(), "annotation".to_string()];
            columns.extend(cols.iter().map(|c| c.to_string()));
            let mut rows = Vec::new();
            for h in hashes {
                let e = load(store, &h)?;
                let mut hits: Vec<&SemanticAnnotation> = e
                    .annotations
                    .iter()
                    .filter(|a| filter.as_ref().is_none_or(|f| event_matches(f, &e, a)))
                    .collect();
                hits.sort_by(|x, y| (x.begin, &x.id).cmp(&(y.begin, &y.id)));
                for a in hits {
                    let mut row = vec![h.to_string(), a.id.clone()];
                    row.extend(cols.iter().map(|c| c.value(a)));
                    rows.push(row);
                }
            }
            Ok(Table { columns, rows })
        }
    }
}
