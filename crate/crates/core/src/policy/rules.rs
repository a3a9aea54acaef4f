//! A small threshold-rule language for auditable policies.
//!
//! ```text
//! # comments run to end of line
//! if soc < 0.2 then max_charge_kw
//! if discharge_price >= 0.35 and soc > 0.2 then -max_discharge_kw
//! if fc_max(72) >= 2 * charge_price and soc < 1.0 then min(max_charge_kw, 5)
//! else 0
//! ```
//!
//! Rules are tried in order and the first true condition picks the action.
//! When nothing matches the output is 0 kW. A trailing `else` is allowed as
//! the last rule. Expressions support `+ - * /`, comparisons, `and or not`,
//! `min(..)`, `max(..)` and the forecast aggregates `fc_max(h)`, `fc_min(h)`,
//! `fc_mean(h)` over the next `h` steps (`h` an integer literal). Scripts are
//! stateless between steps.

use std::fmt;

use thiserror::Error;

use super::{FaultKind, Policy, PolicyFault};
use crate::sim::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    ChargePrice,
    DischargePrice,
    Soc,
    Ttd,
    LoadKw,
    PvKw,
    MaxChargeKw,
    MaxDischargeKw,
}

impl Field {
    pub const ALL: [Field; 8] = [
        Field::ChargePrice,
        Field::DischargePrice,
        Field::Soc,
        Field::Ttd,
        Field::LoadKw,
        Field::PvKw,
        Field::MaxChargeKw,
        Field::MaxDischargeKw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::ChargePrice => "charge_price",
            Field::DischargePrice => "discharge_price",
            Field::Soc => "soc",
            Field::Ttd => "ttd",
            Field::LoadKw => "load_kw",
            Field::PvKw => "pv_kw",
            Field::MaxChargeKw => "max_charge_kw",
            Field::MaxDischargeKw => "max_discharge_kw",
        }
    }

    fn lookup(name: &str) -> Option<Field> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn read(self, obs: &Observation) -> f64 {
        match self {
            Field::ChargePrice => obs.charge_price,
            Field::DischargePrice => obs.discharge_price,
            Field::Soc => obs.soc,
            Field::Ttd => obs.ttd_minutes,
            Field::LoadKw => obs.load_kw,
            Field::PvKw => obs.pv_kw,
            Field::MaxChargeKw => obs.max_charge_kw,
            Field::MaxDischargeKw => obs.max_discharge_kw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogicOp {
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    Max,
    Min,
    Mean,
}

impl Aggregate {
    fn name(self) -> &'static str {
        match self {
            Aggregate::Max => "fc_max",
            Aggregate::Min => "fc_min",
            Aggregate::Mean => "fc_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Bool(bool),
    Field(Field),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Arith(ArithOp, Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    Logic(LogicOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    Forecast(Aggregate, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    /// `None` for a trailing `else`.
    pub condition: Option<Expr>,
    pub action: Expr,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleScript {
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Type {
    Number,
    Boolean,
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Type::Number => "number",
            Type::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character")]
    UnexpectedChar,
    #[error("unexpected token, expected {0}")]
    Unexpected(&'static str),
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("type mismatch: expected {expected}, found {found}")]
    TypeMismatch { expected: Type, found: Type },
    #[error("forecast horizon must be a positive integer literal")]
    BadHorizon,
    #[error("`{0}` needs at least two arguments")]
    Arity(&'static str),
    #[error("`else` must be the last rule")]
    ElseNotLast,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {kind} (at `{token}`)")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub token: String,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    If,
    Then,
    Else,
    And,
    Or,
    Not,
    True,
    False,
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Cmp(CmpOp),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    text: String,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let mut push = |tok: Tok, text: String| tokens.push(Token { tok, text, line: start_line, column: start_col });
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
            }
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            let value = text.parse::<f64>().map_err(|_| ParseError {
                line: start_line,
                column: start_col,
                token: text.clone(),
                kind: ParseErrorKind::UnexpectedChar,
            })?;
            push(Tok::Num(value), text);
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            let tok = match text.as_str() {
                "if" => Tok::If,
                "then" => Tok::Then,
                "else" => Tok::Else,
                "and" => Tok::And,
                "or" => Tok::Or,
                "not" => Tok::Not,
                "true" => Tok::True,
                "false" => Tok::False,
                _ => Tok::Ident(text.clone()),
            };
            push(tok, text);
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let (tok, len) = match two.as_str() {
            "<=" => (Tok::Cmp(CmpOp::Le), 2),
            ">=" => (Tok::Cmp(CmpOp::Ge), 2),
            "==" => (Tok::Cmp(CmpOp::Eq), 2),
            "!=" => (Tok::Cmp(CmpOp::Ne), 2),
            _ => match c {
                '<' => (Tok::Cmp(CmpOp::Lt), 1),
                '>' => (Tok::Cmp(CmpOp::Gt), 1),
                '(' => (Tok::LParen, 1),
                ')' => (Tok::RParen, 1),
                ',' => (Tok::Comma, 1),
                '+' => (Tok::Plus, 1),
                '-' => (Tok::Minus, 1),
                '*' => (Tok::Star, 1),
                '/' => (Tok::Slash, 1),
                _ => {
                    return Err(ParseError {
                        line: start_line,
                        column: start_col,
                        token: c.to_string(),
                        kind: ParseErrorKind::UnexpectedChar,
                    })
                }
            },
        };
        push(tok, chars[i..i + len].iter().collect());
        i += len;
        col += len;
    }
    tokens.push(Token { tok: Tok::Eof, text: "<end of input>".into(), line, column: col });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

type Typed = (Expr, Type, usize);
type SubParser = fn(&mut Parser) -> Result<Typed, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn advance(&mut self) -> usize {
        let at = self.pos;
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        at
    }

    fn error_at(&self, at: usize, kind: ParseErrorKind) -> ParseError {
        let t = &self.tokens[at];
        ParseError { line: t.line, column: t.column, token: t.text.clone(), kind }
    }

    fn expect(&mut self, tok: Tok, what: &'static str) -> Result<usize, ParseError> {
        if *self.peek() == tok {
            Ok(self.advance())
        } else {
            Err(self.error_at(self.pos, ParseErrorKind::Unexpected(what)))
        }
    }

    fn require(&self, (expr, ty, at): Typed, expected: Type) -> Result<Expr, ParseError> {
        if ty == expected {
            Ok(expr)
        } else {
            Err(self.error_at(at, ParseErrorKind::TypeMismatch { expected, found: ty }))
        }
    }

    fn script(&mut self) -> Result<RuleScript, ParseError> {
        let mut rules = Vec::new();
        loop {
            match self.peek() {
                Tok::Eof => return Ok(RuleScript { rules }),
                Tok::If => {
                    self.advance();
                    let cond = self.expr()?;
                    let condition = self.require(cond, Type::Boolean)?;
                    self.expect(Tok::Then, "`then`")?;
                    let act = self.expr()?;
                    rules.push(Rule { condition: Some(condition), action: self.require(act, Type::Number)? });
                }
                Tok::Else => {
                    self.advance();
                    let act = self.expr()?;
                    rules.push(Rule { condition: None, action: self.require(act, Type::Number)? });
                    if *self.peek() != Tok::Eof {
                        return Err(self.error_at(self.pos, ParseErrorKind::ElseNotLast));
                    }
                }
                _ => return Err(self.error_at(self.pos, ParseErrorKind::Unexpected("`if` or `else`"))),
            }
        }
    }

    fn expr(&mut self) -> Result<Typed, ParseError> {
        self.logic(LogicOp::Or)
    }

    fn logic(&mut self, op: LogicOp) -> Result<Typed, ParseError> {
        let (tok, next): (Tok, SubParser) = match op {
            LogicOp::Or => (Tok::Or, |p| p.logic(LogicOp::And)),
            LogicOp::And => (Tok::And, Self::negation),
        };
        let mut lhs = next(self)?;
        while *self.peek() == tok {
            self.advance();
            let at = lhs.2;
            let left = self.require(lhs, Type::Boolean)?;
            let rhs = next(self)?;
            let right = self.require(rhs, Type::Boolean)?;
            lhs = (Expr::Logic(op, Box::new(left), Box::new(right)), Type::Boolean, at);
        }
        Ok(lhs)
    }

    fn negation(&mut self) -> Result<Typed, ParseError> {
        if *self.peek() == Tok::Not {
            let at = self.advance();
            let inner = self.negation()?;
            let inner = self.require(inner, Type::Boolean)?;
            return Ok((Expr::Not(Box::new(inner)), Type::Boolean, at));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Typed, ParseError> {
        let lhs = self.additive()?;
        if let Tok::Cmp(op) = *self.peek() {
            self.advance();
            let at = lhs.2;
            let left = self.require(lhs, Type::Number)?;
            let rhs = self.additive()?;
            let right = self.require(rhs, Type::Number)?;
            return Ok((Expr::Compare(op, Box::new(left), Box::new(right)), Type::Boolean, at));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Typed, ParseError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => ArithOp::Add,
                Tok::Minus => ArithOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let at = lhs.2;
            let left = self.require(lhs, Type::Number)?;
            let rhs = self.multiplicative()?;
            let right = self.require(rhs, Type::Number)?;
            lhs = (Expr::Arith(op, Box::new(left), Box::new(right)), Type::Number, at);
        }
    }

    fn multiplicative(&mut self) -> Result<Typed, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => ArithOp::Mul,
                Tok::Slash => ArithOp::Div,
                _ => return Ok(lhs),
            };
            self.advance();
            let at = lhs.2;
            let left = self.require(lhs, Type::Number)?;
            let rhs = self.unary()?;
            let right = self.require(rhs, Type::Number)?;
            lhs = (Expr::Arith(op, Box::new(left), Box::new(right)), Type::Number, at);
        }
    }

    fn unary(&mut self) -> Result<Typed, ParseError> {
        if *self.peek() == Tok::Minus {
            let at = self.advance();
            let inner = self.unary()?;
            let inner = self.require(inner, Type::Number)?;
            return Ok((Expr::Neg(Box::new(inner)), Type::Number, at));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Typed, ParseError> {
        let at = self.pos;
        match self.peek().clone() {
            Tok::Num(v) => {
                self.advance();
                Ok((Expr::Num(v), Type::Number, at))
            }
            Tok::True | Tok::False => {
                let value = *self.peek() == Tok::True;
                self.advance();
                Ok((Expr::Bool(value), Type::Boolean, at))
            }
            Tok::LParen => {
                self.advance();
                let (expr, ty, _) = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok((expr, ty, at))
            }
            Tok::Ident(name) => {
                self.advance();
                if *self.peek() == Tok::LParen {
                    return self.call(&name, at);
                }
                let field = Field::lookup(&name).ok_or_else(|| self.error_at(at, ParseErrorKind::UnknownIdentifier(name)))?;
                Ok((Expr::Field(field), Type::Number, at))
            }
            _ => Err(self.error_at(at, ParseErrorKind::Unexpected("an expression"))),
        }
    }

    fn call(&mut self, name: &str, at: usize) -> Result<Typed, ParseError> {
        let aggregate = match name {
            "fc_max" => Some(Aggregate::Max),
            "fc_min" => Some(Aggregate::Min),
            "fc_mean" => Some(Aggregate::Mean),
            _ => None,
        };
        self.expect(Tok::LParen, "`(`")?;
        if let Some(agg) = aggregate {
            let horizon = match self.peek() {
                Tok::Num(v) if *v >= 1.0 && v.fract() == 0.0 && *v <= 1e9 => *v as usize,
                _ => return Err(self.error_at(self.pos, ParseErrorKind::BadHorizon)),
            };
            self.advance();
            self.expect(Tok::RParen, "`)`")?;
            return Ok((Expr::Forecast(agg, horizon), Type::Number, at));
        }
        let func = match name {
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return Err(self.error_at(at, ParseErrorKind::UnknownIdentifier(name.to_string()))),
        };
        let mut args = Vec::new();
        loop {
            let arg = self.expr()?;
            args.push(self.require(arg, Type::Number)?);
            match self.peek() {
                Tok::Comma => {
                    self.advance();
                }
                Tok::RParen => {
                    self.advance();
                    break;
                }
                _ => return Err(self.error_at(self.pos, ParseErrorKind::Unexpected("`,` or `)`"))),
            }
        }
        if args.len() < 2 {
            return Err(self.error_at(at, ParseErrorKind::Arity(if func == Func::Min { "min" } else { "max" })));
        }
        Ok((Expr::Call(func, args), Type::Number, at))
    }
}

pub fn parse_rule_script(source: &str) -> Result<RuleScript, ParseError> {
    let tokens = lex(source)?;
    Parser { tokens, pos: 0 }.script()
}

fn fault(message: impl Into<String>) -> PolicyFault {
    PolicyFault::new(FaultKind::Runtime, message)
}

fn eval_num(expr: &Expr, obs: &Observation) -> Result<f64, PolicyFault> {
    let v = match expr {
        Expr::Num(v) => *v,
        Expr::Field(f) => f.read(obs),
        Expr::Neg(e) => -eval_num(e, obs)?,
        Expr::Arith(op, l, r) => {
            let (a, b) = (eval_num(l, obs)?, eval_num(r, obs)?);
            match op {
                ArithOp::Add => a + b,
                ArithOp::Sub => a - b,
                ArithOp::Mul => a * b,
                ArithOp::Div if b == 0.0 => return Err(fault("division by zero")),
                ArithOp::Div => a / b,
            }
        }
        Expr::Call(func, args) => {
            let values = args.iter().map(|a| eval_num(a, obs)).collect::<Result<Vec<_>, _>>()?;
            let pick = match func {
                Func::Min => f64::min,
                Func::Max => f64::max,
            };
            values.into_iter().reduce(pick).unwrap_or(0.0)
        }
        Expr::Forecast(agg, h) => {
            let value = match agg {
                Aggregate::Max => obs.forecast.max(*h),
                Aggregate::Min => obs.forecast.min(*h),
                Aggregate::Mean => obs.forecast.mean(*h),
            };
            value.ok_or_else(|| fault(format!("{}({h}) on an empty forecast", agg.name())))?
        }
        Expr::Bool(_) | Expr::Not(_) | Expr::Compare(..) | Expr::Logic(..) => {
            return Err(fault("boolean used as number"));
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(fault("non-finite intermediate value"))
    }
}

fn eval_bool(expr: &Expr, obs: &Observation) -> Result<bool, PolicyFault> {
    Ok(match expr {
        Expr::Bool(b) => *b,
        Expr::Not(e) => !eval_bool(e, obs)?,
        Expr::Logic(LogicOp::And, l, r) => eval_bool(l, obs)? && eval_bool(r, obs)?,
        Expr::Logic(LogicOp::Or, l, r) => eval_bool(l, obs)? || eval_bool(r, obs)?,
        Expr::Compare(op, l, r) => {
            let (a, b) = (eval_num(l, obs)?, eval_num(r, obs)?);
            match op {
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
            }
        }
        _ => return Err(fault("number used as condition")),
    })
}

/// Index of the rule that fired (if any) and its output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub rule: Option<usize>,
    pub power_kw: f64,
}

impl RuleScript {
    pub fn evaluate(&self, obs: &Observation) -> Result<Evaluation, PolicyFault> {
        for (i, rule) in self.rules.iter().enumerate() {
            let fires = match &rule.condition {
                Some(cond) => eval_bool(cond, obs)?,
                None => true,
            };
            if fires {
                return Ok(Evaluation { rule: Some(i), power_kw: eval_num(&rule.action, obs)? });
            }
        }
        Ok(Evaluation { rule: None, power_kw: 0.0 })
    }
}

/// Requested kW for `obs`; runtime faults surface as `Err` so a
/// [`PolicyHandle`](super::PolicyHandle) can log them and idle.
pub fn evaluate_rules(script: &RuleScript, obs: &Observation) -> Result<f64, PolicyFault> {
    script.evaluate(obs).map(|e| e.power_kw)
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Field(field) => f.write_str(field.name()),
            Expr::Neg(e) => write!(f, "-{e}"),
            Expr::Not(e) => write!(f, "(not {e})"),
            Expr::Arith(op, l, r) => {
                let sym = match op {
                    ArithOp::Add => "+",
                    ArithOp::Sub => "-",
                    ArithOp::Mul => "*",
                    ArithOp::Div => "/",
                };
                write!(f, "({l} {sym} {r})")
            }
            Expr::Compare(op, l, r) => {
                let sym = match op {
                    CmpOp::Lt => "<",
                    CmpOp::Le => "<=",
                    CmpOp::Gt => ">",
                    CmpOp::Ge => ">=",
                    CmpOp::Eq => "==",
                    CmpOp::Ne => "!=",
                };
                write!(f, "({l} {sym} {r})")
            }
            Expr::Logic(op, l, r) => {
                let word = if *op == LogicOp::And { "and" } else { "or" };
                write!(f, "({l} {word} {r})")
            }
            Expr::Call(func, args) => {
                let name = if *func == Func::Min { "min" } else { "max" };
                let args: Vec<String> = args.iter().map(ToString::to_string).collect();
                write!(f, "{name}({})", args.join(", "))
            }
            Expr::Forecast(agg, h) => write!(f, "{}({h})", agg.name()),
        }
    }
}

impl fmt::Display for RuleScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rule in &self.rules {
            match &rule.condition {
                Some(cond) => writeln!(f, "if {cond} then {}", rule.action)?,
                None => writeln!(f, "else {}", rule.action)?,
            }
        }
        Ok(())
    }
}

pub struct RulePolicy {
    name: String,
    script: RuleScript,
}

impl RulePolicy {
    pub fn new(name: impl Into<String>, script: RuleScript) -> Self {
        Self { name: name.into(), script }
    }

    pub fn script(&self) -> &RuleScript {
        &self.script
    }
}

impl Policy for RulePolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, obs: &Observation) -> Result<f64, PolicyFault> {
        evaluate_rules(&self.script, obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::PriceForecast;
    use crate::sim::test_support::observation;
    use proptest::prelude::*;

    const PEAK_RULE: &str = "if discharge_price >= 0.35 and soc > 0.20 then -max_discharge_kw";

    #[test]
    fn parses_single_rule() {
        let script = parse_rule_script(PEAK_RULE).unwrap();
        assert_eq!(script.rules.len(), 1);
        assert_eq!(evaluate_rules(&script, &observation(0.8, 0.40)).unwrap(), -7.0);
        assert_eq!(evaluate_rules(&script, &observation(0.8, 0.30)).unwrap(), 0.0);
        assert_eq!(evaluate_rules(&script, &observation(0.2, 0.40)).unwrap(), 0.0);
    }

    #[test]
    fn empty_script_idles() {
        let script = parse_rule_script("  # nothing here\n").unwrap();
        assert!(script.rules.is_empty());
        assert_eq!(script.evaluate(&observation(0.5, 0.2)).unwrap(), Evaluation { rule: None, power_kw: 0.0 });
    }

    #[test]
    fn unknown_identifier_is_named() {
        let err = parse_rule_script("if soc > foo then 1").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownIdentifier("foo".into()));
        assert_eq!((err.line, err.column, err.token.as_str()), (1, 10, "foo"));
        let err = parse_rule_script("if soc > 0.2 then 1\nif bar(1) > 2 then 3").unwrap_err();
        assert_eq!((err.line, err.column), (2, 4));
    }

    #[test]
    fn type_errors_are_reported() {
        let err = parse_rule_script("if soc then 1").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::TypeMismatch { expected: Type::Boolean, found: Type::Number });
        let err = parse_rule_script("if soc > 0.2 then soc < 1").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::TypeMismatch { expected: Type::Number, found: Type::Boolean });
        let err = parse_rule_script("if (soc > 0.2) + 1 > 0 then 1").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::TypeMismatch { .. }));
        assert!(matches!(parse_rule_script("if fc_max(0) > 1 then 1").unwrap_err().kind, ParseErrorKind::BadHorizon));
        assert!(matches!(parse_rule_script("if fc_max(2.5) > 1 then 1").unwrap_err().kind, ParseErrorKind::BadHorizon));
        assert!(matches!(parse_rule_script("else 1 if soc > 1 then 2").unwrap_err().kind, ParseErrorKind::ElseNotLast));
        assert!(matches!(parse_rule_script("if soc > 1 then min(1)").unwrap_err().kind, ParseErrorKind::Arity("min")));
        assert!(matches!(parse_rule_script("if soc $ 1 then 1").unwrap_err().kind, ParseErrorKind::UnexpectedChar));
    }

    #[test]
    fn division_by_zero_is_a_runtime_fault() {
        let script = parse_rule_script("if soc > 0 then 1 / (soc - soc)").unwrap();
        let err = evaluate_rules(&script, &observation(0.5, 0.2)).unwrap_err();
        assert_eq!(err.kind, FaultKind::Runtime);
        assert!(err.message.contains("division by zero"));
    }

    #[test]
    fn forecast_aggregates() {
        let script = parse_rule_script("if fc_max(288) > 2 * charge_price then 7\nelse -1").unwrap();
        let flat = observation(0.5, 0.2);
        assert_eq!(evaluate_rules(&script, &flat).unwrap(), -1.0);
        let mut spiky = flat.clone();
        spiky.forecast = PriceForecast { horizon_steps: 4, values: vec![0.1, 0.5, 0.2, 0.1] };
        assert_eq!(evaluate_rules(&script, &spiky).unwrap(), 7.0);
        let mean = parse_rule_script("if true then fc_mean(2) + fc_min(4)").unwrap();
        assert!((evaluate_rules(&mean, &spiky).unwrap() - 0.4).abs() < 1e-12);
        let mut blind = flat;
        blind.forecast = PriceForecast::default();
        assert!(evaluate_rules(&script, &blind).is_err());
    }

    #[test]
    fn precedence_and_functions() {
        let script = parse_rule_script("if not soc > 0.9 and (ttd < 60 or pv_kw > load_kw) then max(1, 2 + 3 * 2) - -1").unwrap();
        let mut obs = observation(0.5, 0.2);
        obs.ttd_minutes = 30.0;
        assert_eq!(evaluate_rules(&script, &obs).unwrap(), 9.0);
    }

    fn num_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..100_000).prop_map(|v| Expr::Num(f64::from(v) / 1000.0)),
            proptest::sample::select(Field::ALL.to_vec()).prop_map(Expr::Field),
            (proptest::sample::select(vec![Aggregate::Max, Aggregate::Min, Aggregate::Mean]), 1usize..300)
                .prop_map(|(a, h)| Expr::Forecast(a, h)),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (proptest::sample::select(vec![ArithOp::Add, ArithOp::Sub, ArithOp::Mul, ArithOp::Div]), inner.clone(), inner.clone())
                    .prop_map(|(op, l, r)| Expr::Arith(op, Box::new(l), Box::new(r))),
                (any::<bool>(), proptest::collection::vec(inner, 2..4))
                    .prop_map(|(is_min, args)| Expr::Call(if is_min { Func::Min } else { Func::Max }, args)),
            ]
        })
    }

    fn bool_expr() -> impl Strategy<Value = Expr> {
        let cmp = (
            proptest::sample::select(vec![CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq, CmpOp::Ne]),
            num_expr(),
            num_expr(),
        )
            .prop_map(|(op, l, r)| Expr::Compare(op, Box::new(l), Box::new(r)));
        let leaf = prop_oneof![cmp, any::<bool>().prop_map(Expr::Bool)];
        leaf.prop_recursive(3, 12, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Not(Box::new(e))),
                (any::<bool>(), inner.clone(), inner).prop_map(|(and, l, r)| {
                    Expr::Logic(if and { LogicOp::And } else { LogicOp::Or }, Box::new(l), Box::new(r))
                }),
            ]
        })
    }

    fn script_strategy() -> impl Strategy<Value = RuleScript> {
        (proptest::collection::vec((bool_expr(), num_expr()), 0..4), proptest::option::of(num_expr())).prop_map(|(rules, tail)| {
            let mut rules: Vec<Rule> = rules.into_iter().map(|(c, a)| Rule { condition: Some(c), action: a }).collect();
            if let Some(action) = tail {
                rules.push(Rule { condition: None, action });
            }
            RuleScript { rules }
        })
    }

    proptest! {
        #[test]
        fn pretty_print_round_trips(script in script_strategy()) {
            let text = script.to_string();
            let reparsed = parse_rule_script(&text).unwrap();
            prop_assert_eq!(reparsed, script);
        }

        #[test]
        fn evaluation_is_pure(script in script_strategy(), soc in 0.2f64..1.0, price in 0.0f64..1.0) {
            let obs = observation(soc, price);
            let a = evaluate_rules(&script, &obs);
            let b = evaluate_rules(&script, &obs);
            prop_assert_eq!(a, b);
        }
    }
}
