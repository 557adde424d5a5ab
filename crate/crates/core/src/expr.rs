//! Lexer, boolean expression parser and formatter shared by the rule and
//! query languages.

use std::fmt;

use crate::model::{Quantity, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}", self.line, self.col)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at {pos}: {message}")]
pub struct SyntaxError {
    pub pos: Pos,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    /// Unsigned decimal literal as written.
    Number(String),
    Str(String),
    /// 64 lowercase hex digits.
    Hash(String),
    LParen,
    RParen,
    Comma,
    Colon,
    Minus,
    Op(CmpOp),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Number(n) => write!(f, "number {n}"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::Hash(_) => f.write_str("hash"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::Minus => f.write_str("`-`"),
            Tok::Op(op) => write!(f, "`{op}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    pub fn holds<T: Ord + ?Sized>(self, left: &T, right: &T) -> bool {
        match self {
            CmpOp::Lt => left < right,
            CmpOp::Le => left <= right,
            CmpOp::Gt => left > right,
            CmpOp::Ge => left >= right,
            CmpOp::Eq => left == right,
            CmpOp::Ne => left != right,
        }
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

fn is_micro(c: char) -> bool {
    c == 'µ' || c == 'μ'
}

fn ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || is_micro(c)
}

fn ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

/// Splits `src` into tokens. `#` starts a comment running to end of line.
pub fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, SyntaxError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let err = |pos: Pos, m: String| SyntaxError { pos, message: m };
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        let start = i;
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
                col += 1;
            }
            continue;
        }
        let hex_run = chars[i..]
            .iter()
            .take_while(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase())
            .count();
        let tok = if hex_run == 64
            && !chars.get(i + 64).is_some_and(|c| ident_continue(*c))
        {
            i += 64;
            Tok::Hash(chars[start..i].iter().collect())
        } else if c.is_ascii_digit() {
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            Tok::Number(chars[start..i].iter().collect())
        } else if ident_start(c) {
            i += 1;
            while i < chars.len() && ident_continue(chars[i]) {
                i += 1;
            }
            // A trailing dot belongs to no identifier.
            while chars[i - 1] == '.' {
                i -= 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else if c == '"' {
            i += 1;
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None | Some('\n') => {
                        return Err(err(pos, "unterminated string literal".into()));
                    }
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => match chars.get(i + 1) {
                        Some(e @ ('"' | '\\')) => {
                            s.push(*e);
                            i += 2;
                        }
                        _ => {
                            let p = Pos {
                                line,
                                col: col + (i - start) as u32,
                            };
                            return Err(err(p, "invalid escape in string literal".into()));
                        }
                    },
                    Some(ch) => {
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            Tok::Str(s)
        } else {
            let next = chars.get(i + 1).copied();
            let (tok, len) = match (c, next) {
                ('(', _) => (Tok::LParen, 1),
                (')', _) => (Tok::RParen, 1),
                (',', _) => (Tok::Comma, 1),
                (':', _) => (Tok::Colon, 1),
                ('-', _) => (Tok::Minus, 1),
                ('<', Some('=')) => (Tok::Op(CmpOp::Le), 2),
                ('>', Some('=')) => (Tok::Op(CmpOp::Ge), 2),
                ('=', Some('=')) => (Tok::Op(CmpOp::Eq), 2),
                ('!', Some('=')) => (Tok::Op(CmpOp::Ne), 2),
                ('<', _) => (Tok::Op(CmpOp::Lt), 1),
                ('>', _) => (Tok::Op(CmpOp::Gt), 1),
                _ => return Err(err(pos, format!("unexpected character {c:?}"))),
            };
            i += len;
            tok
        };
        col += (i - start) as u32;
        out.push((tok, pos));
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

/// Cursor over a token stream.
pub struct Parser {
    toks: Vec<(Tok, Pos)>,
    i: usize,
}

impl Parser {
    pub fn new(src: &str) -> Result<Parser, SyntaxError> {
        Ok(Parser { toks: lex(src)?, i: 0 })
    }

    pub fn peek(&self) -> &Tok {
        &self.toks[self.i].0
    }

    pub fn peek_at(&self, ahead: usize) -> &Tok {
        &self.toks[(self.i + ahead).min(self.toks.len() - 1)].0
    }

    pub fn pos(&self) -> Pos {
        self.toks[self.i].1
    }

    pub fn next(&mut self) -> Tok {
        let t = self.toks[self.i].0.clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    pub fn error(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            pos: self.pos(),
            message: message.into(),
        }
    }

    pub fn unexpected(&self, wanted: &str) -> SyntaxError {
        self.error(format!("expected {wanted}, found {}", self.peek()))
    }

    pub fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    pub fn eat_keyword(&mut self, kw: &str) -> bool {
        let hit = self.at_keyword(kw);
        if hit {
            self.next();
        }
        hit
    }

    pub fn expect_keyword(&mut self, kw: &str) -> Result<(), SyntaxError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    pub fn expect(&mut self, tok: Tok) -> Result<(), SyntaxError> {
        if *self.peek() == tok {
            self.next();
            Ok(())
        } else {
            Err(self.unexpected(&tok.to_string()))
        }
    }

    /// An identifier that is not a reserved word.
    pub fn ident(&mut self, what: &str) -> Result<String, SyntaxError> {
        match self.peek() {
            Tok::Ident(s) if !RESERVED.contains(&s.as_str()) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    pub fn op(&mut self) -> Result<CmpOp, SyntaxError> {
        match self.peek() {
            Tok::Op(op) => {
                let op = *op;
                self.next();
                Ok(op)
            }
            _ => Err(self.unexpected("a comparison operator")),
        }
    }

    pub fn expect_end(&mut self) -> Result<(), SyntaxError> {
        if *self.peek() == Tok::Eof {
            Ok(())
        } else {
            Err(self.unexpected("end of input"))
        }
    }

    /// A signed decimal literal with a unit, scaled exactly to micro-units.
    pub fn quantity(&mut self) -> Result<Quantity, SyntaxError> {
        let start = self.pos();
        let negative = *self.peek() == Tok::Minus;
        if negative {
            self.next();
        }
        let digits = match self.peek() {
            Tok::Number(n) => n.clone(),
            _ => return Err(self.unexpected("a number")),
        };
        self.next();
        let unit_pos = self.pos();
        let symbol = match self.peek() {
            Tok::Ident(u) => u.clone(),
            _ => return Err(self.unexpected("a unit")),
        };
        let Some((unit, pow10)) = unit_scale(&symbol) else {
            return Err(SyntaxError {
                pos: unit_pos,
                message: format!("unknown unit `{symbol}`"),
            });
        };
        self.next();
        let value = scale_decimal(&digits, pow10, negative).ok_or_else(|| SyntaxError {
            pos: start,
            message: format!("{digits} {symbol} is not representable in whole micro-units"),
        })?;
        Ok(Quantity::new(value, unit))
    }

    /// Unsigned integer literal.
    pub fn integer(&mut self) -> Result<u64, SyntaxError> {
        match self.peek() {
            Tok::Number(n) if !n.contains('.') => {
                let v = n.parse().map_err(|_| self.error("integer out of range"))?;
                self.next();
                Ok(v)
            }
            _ => Err(self.unexpected("an integer")),
        }
    }
}

pub const RESERVED: &[&str] = &["and", "or", "not"];

/// Unit symbol → (micro unit, power of ten to scale by).
pub fn unit_scale(symbol: &str) -> Option<(Unit, u32)> {
    let normalized = symbol.replace('μ', "µ");
    Some(match normalized.as_str() {
        "N" => (Unit::Micronewton, 6),
        "mN" => (Unit::Micronewton, 3),
        "µN" | "uN" => (Unit::Micronewton, 0),
        "mm" => (Unit::Micrometre, 3),
        "µm" | "um" => (Unit::Micrometre, 0),
        "mL" => (Unit::Microlitre, 3),
        "µL" | "uL" => (Unit::Microlitre, 0),
        "s" => (Unit::Microsecond, 6),
        "ms" => (Unit::Microsecond, 3),
        "µs" | "us" => (Unit::Microsecond, 0),
        _ => return None,
    })
}

/// `digits × 10^pow10`, exactly; `None` on overflow or leftover fraction.
pub fn scale_decimal(digits: &str, pow10: u32, negative: bool) -> Option<i64> {
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let frac = frac.trim_end_matches('0');
    if frac.len() > pow10 as usize {
        return None;
    }
    let mut s = String::with_capacity(int.len() + pow10 as usize);
    s.push_str(int);
    s.push_str(frac);
    for _ in frac.len()..pow10 as usize {
        s.push('0');
    }
    let v: i64 = s.parse().ok()?;
    Some(if negative { -v } else { v })
}

/// Boolean expression over atoms `A`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr<A> {
    Atom(A),
    Not(Box<Expr<A>>),
    And(Box<Expr<A>>, Box<Expr<A>>),
    Or(Box<Expr<A>>, Box<Expr<A>>),
}

impl<A> Expr<A> {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 1,
            Expr::And(..) => 2,
            Expr::Not(_) => 3,
            Expr::Atom(_) => 4,
        }
    }

    pub fn atoms(&self) -> Vec<&A> {
        let mut out = Vec::new();
        fn walk<'a, A>(e: &'a Expr<A>, out: &mut Vec<&'a A>) {
            match e {
                Expr::Atom(a) => out.push(a),
                Expr::Not(x) => walk(x, out),
                Expr::And(a, b) | Expr::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    /// Evaluates with short-circuiting, returning the value together with
    /// the atom that decided it.
    pub fn eval_with<'a, W>(&'a self, f: &mut impl FnMut(&'a A) -> (bool, W)) -> (bool, W) {
        match self {
            Expr::Atom(a) => f(a),
            Expr::Not(x) => {
                let (v, w) = x.eval_with(f);
                (!v, w)
            }
            Expr::And(a, b) => {
                let (v, w) = a.eval_with(f);
                if v {
                    b.eval_with(f)
                } else {
                    (false, w)
                }
            }
            Expr::Or(a, b) => {
                let (v, w) = a.eval_with(f);
                if v {
                    (true, w)
                } else {
                    b.eval_with(f)
                }
            }
        }
    }

    pub fn eval(&self, f: &mut impl FnMut(&A) -> bool) -> bool {
        self.eval_with(&mut |a| (f(a), ())).0
    }
}

/// `or` binds loosest, then `and`, then `not`; binary operators associate
/// to the left.
pub fn parse_expr<A>(
    p: &mut Parser,
    atom: &mut impl FnMut(&mut Parser) -> Result<A, SyntaxError>,
) -> Result<Expr<A>, SyntaxError> {
    let mut left = parse_and(p, atom)?;
    while p.eat_keyword("or") {
        let right = parse_and(p, atom)?;
        left = Expr::Or(Box::new(left), Box::new(right));
    }
    Ok(left)
}

fn parse_and<A>(
    p: &mut Parser,
    atom: &mut impl FnMut(&mut Parser) -> Result<A, SyntaxError>,
) -> Result<Expr<A>, SyntaxError> {
    let mut left = parse_unary(p, atom)?;
    while p.eat_keyword("and") {
        let right = parse_unary(p, atom)?;
        left = Expr::And(Box::new(left), Box::new(right));
    }
    Ok(left)
}

fn parse_unary<A>(
    p: &mut Parser,
    atom: &mut impl FnMut(&mut Parser) -> Result<A, SyntaxError>,
) -> Result<Expr<A>, SyntaxError> {
    if p.eat_keyword("not") {
        return Ok(Expr::Not(Box::new(parse_unary(p, atom)?)));
    }
    if *p.peek() == Tok::LParen {
        p.next();
        let inner = parse_expr(p, atom)?;
        p.expect(Tok::RParen)?;
        return Ok(inner);
    }
    Ok(Expr::Atom(atom(p)?))
}

/// Formats with the minimum parentheses that preserve the tree.
pub fn format_expr<A>(e: &Expr<A>, atom: &impl Fn(&A) -> String) -> String {
    let wrap = |child: &Expr<A>, parens: bool| {
        let s = format_expr(child, atom);
        if parens {
            format!("({s})")
        } else {
            s
        }
    };
    match e {
        Expr::Atom(a) => atom(a),
        Expr::Not(x) => format!("not {}", wrap(x, x.precedence() < 3)),
        Expr::And(a, b) | Expr::Or(a, b) => {
            let prec = e.precedence();
            let kw = if prec == 1 { "or" } else { "and" };
            format!(
                "{} {kw} {}",
                wrap(a, a.precedence() < prec),
                wrap(b, b.precedence() <= prec)
            )
        }
    }
}

/// Quoted string literal.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Quantity as written in formatted rules and queries.
pub fn format_quantity(q: &Quantity) -> String {
    format!("{} {}", q.value, q.unit.symbol())
}
