//! Text front end for rule programs (`.lars` files).
//!
//! ```text
//! # comment
//! @edb procedure/2.
//! resIRI(Obs,Sen) :- procedure(Obs,Sen), type(Obs,"rainObs") [window 10s slide 2s].
//! ```
//!
//! Predicates that are not declared are classified from their use: rule
//! heads are intensional, body-only predicates extensional. Durations take
//! an `ms`, `s` or `m` suffix and are stored in milliseconds; an omitted
//! `slide` makes the window tumbling.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::model::{validate, write_constant, Atom, Program, Rule, Term, Value, WindowSpec};

/// Location of a token or construct in the source text (1-based, in chars).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSpan {
    pub line: usize,
    pub column: usize,
    pub length: usize,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    pub message: String,
    pub span: SourceSpan,
}

/// Every syntax or validation error found in one input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub issues: Vec<ParseIssue>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{}: {}", issue.span, issue.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Quoted(String),
    Implies,
    LParen,
    RParen,
    Comma,
    Dot,
    LBracket,
    RBracket,
    At,
    Slash,
    Unexpected(char),
    UnterminatedString,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "`{w}`"),
            Tok::Quoted(q) => write!(f, "string {q:?}"),
            Tok::Implies => f.write_str("`:-`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Dot => f.write_str("`.`"),
            Tok::LBracket => f.write_str("`[`"),
            Tok::RBracket => f.write_str("`]`"),
            Tok::At => f.write_str("`@`"),
            Tok::Slash => f.write_str("`/`"),
            Tok::Unexpected(c) => write!(f, "character {c:?}"),
            Tok::UnterminatedString => f.write_str("unterminated string"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

struct Token {
    tok: Tok,
    span: SourceSpan,
}

fn lex(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1usize, 1usize);
    while let Some(&c) = chars.peek() {
        let start = SourceSpan {
            line,
            column: col,
            length: 1,
        };
        let mut advance = |chars: &mut std::iter::Peekable<std::str::Chars<'_>>| {
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        match c {
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    advance(&mut chars);
                }
            }
            c if c.is_whitespace() => {
                advance(&mut chars);
            }
            c if c.is_ascii_alphanumeric() || c == '_' => {
                let mut word = String::new();
                while let Some(&c) = chars.peek() {
                    if !(c.is_ascii_alphanumeric() || c == '_') {
                        break;
                    }
                    word.push(c);
                    advance(&mut chars);
                }
                let length = word.chars().count();
                out.push(Token {
                    tok: Tok::Word(word),
                    span: SourceSpan { length, ..start },
                });
            }
            '"' => {
                advance(&mut chars);
                let mut value = String::new();
                let mut length = 1;
                let mut closed = false;
                while let Some(c) = advance(&mut chars) {
                    length += 1;
                    match c {
                        '"' => {
                            closed = true;
                            break;
                        }
                        '\\' => {
                            let Some(e) = advance(&mut chars) else { break };
                            length += 1;
                            value.push(match e {
                                'n' => '\n',
                                't' => '\t',
                                other => other,
                            });
                        }
                        '\n' => break,
                        c => value.push(c),
                    }
                }
                let tok = if closed {
                    Tok::Quoted(value)
                } else {
                    Tok::UnterminatedString
                };
                out.push(Token {
                    tok,
                    span: SourceSpan { length, ..start },
                });
            }
            ':' => {
                advance(&mut chars);
                if chars.peek() == Some(&'-') {
                    advance(&mut chars);
                    out.push(Token {
                        tok: Tok::Implies,
                        span: SourceSpan { length: 2, ..start },
                    });
                } else {
                    out.push(Token {
                        tok: Tok::Unexpected(':'),
                        span: start,
                    });
                }
            }
            _ => {
                advance(&mut chars);
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    '.' => Tok::Dot,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    '@' => Tok::At,
                    '/' => Tok::Slash,
                    other => Tok::Unexpected(other),
                };
                out.push(Token { tok, span: start });
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        span: SourceSpan {
            line,
            column: col,
            length: 0,
        },
    });
    out
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    issues: Vec<ParseIssue>,
}

type Step<T> = Result<T, ParseIssue>;

#[derive(Clone, Copy, PartialEq, Eq)]
enum DeclKind {
    Edb,
    Idb,
}

struct Decl {
    kind: DeclKind,
    predicate: String,
    arity: usize,
    span: SourceSpan,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> &Token {
        let i = self.pos;
        if self.tokens[i].tok != Tok::Eof {
            self.pos += 1;
        }
        &self.tokens[i]
    }

    fn error_here(&self, expected: &str) -> ParseIssue {
        let t = self.peek();
        ParseIssue {
            message: format!("expected {expected}, found {}", t.tok),
            span: t.span,
        }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Step<SourceSpan> {
        if self.peek().tok == tok {
            Ok(self.bump().span)
        } else {
            Err(self.error_here(expected))
        }
    }

    /// Skips to just past the next `.`, the rule boundary.
    fn recover(&mut self) {
        loop {
            match self.bump().tok {
                Tok::Dot | Tok::Eof => return,
                _ => {}
            }
        }
    }

    fn predicate_name(&mut self) -> Step<(String, SourceSpan)> {
        match &self.peek().tok {
            Tok::Word(w) if !w.starts_with(|c: char| c.is_ascii_uppercase()) => {
                let w = w.clone();
                Ok((w, self.bump().span))
            }
            Tok::Word(w) => Err(ParseIssue {
                message: format!("predicate `{w}` must not start with an uppercase letter"),
                span: self.peek().span,
            }),
            _ => Err(self.error_here("predicate name")),
        }
    }

    fn term(&mut self) -> Step<Term> {
        let span = self.peek().span;
        match self.peek().tok.clone() {
            Tok::Word(w) if w.starts_with(|c: char| c.is_ascii_uppercase()) => {
                self.bump();
                Ok(Term::var(&w))
            }
            Tok::Word(w) => {
                self.bump();
                Ok(Term::constant(&w))
            }
            Tok::Quoted(q) if q.is_empty() => Err(ParseIssue {
                message: "constants must not be empty".into(),
                span,
            }),
            Tok::Quoted(q) => {
                self.bump();
                Ok(Term::constant(&q))
            }
            _ => Err(self.error_here("term")),
        }
    }

    fn atom(&mut self) -> Step<Atom> {
        let (pred, _) = self.predicate_name()?;
        let mut terms = Vec::new();
        if self.peek().tok == Tok::LParen {
            self.bump();
            loop {
                terms.push(self.term()?);
                match self.peek().tok {
                    Tok::Comma => {
                        self.bump();
                    }
                    Tok::RParen => {
                        self.bump();
                        break;
                    }
                    _ => return Err(self.error_here("`,` or `)`")),
                }
            }
        }
        Ok(Atom::new(&pred, terms))
    }

    fn duration(&mut self) -> Step<u64> {
        let span = self.peek().span;
        let Tok::Word(w) = self.peek().tok.clone() else {
            return Err(self.error_here("duration such as `10s`"));
        };
        let digits_end = w.find(|c: char| !c.is_ascii_digit()).unwrap_or(w.len());
        let (digits, unit) = w.split_at(digits_end);
        let factor = match unit {
            "ms" => 1,
            "s" => 1_000,
            "m" => 60_000,
            _ => 0,
        };
        let bad = || ParseIssue {
            message: format!("invalid duration `{w}` (use <integer>ms, <integer>s or <integer>m)"),
            span,
        };
        if digits.is_empty() || factor == 0 {
            return Err(bad());
        }
        let value = digits
            .parse::<u64>()
            .ok()
            .and_then(|v| v.checked_mul(factor))
            .ok_or_else(bad)?;
        self.bump();
        Ok(value)
    }

    fn keyword(&mut self, kw: &str) -> Step<()> {
        match &self.peek().tok {
            Tok::Word(w) if w == kw => {
                self.bump();
                Ok(())
            }
            _ => Err(self.error_here(&format!("`{kw}`"))),
        }
    }

    fn window(&mut self) -> Step<WindowSpec> {
        self.expect(Tok::LBracket, "`[`")?;
        self.keyword("window")?;
        let length = self.duration()?;
        let mut slide = length;
        if matches!(&self.peek().tok, Tok::Word(w) if w == "slide") {
            self.bump();
            let span = self.peek().span;
            slide = self.duration()?;
            if slide == 0 {
                return Err(ParseIssue {
                    message: "window slide must be at least 1ms".into(),
                    span,
                });
            }
        } else if slide == 0 {
            return Err(ParseIssue {
                message: "a zero-length window needs an explicit non-zero slide".into(),
                span: self.tokens[self.pos - 1].span,
            });
        }
        self.expect(Tok::RBracket, "`]`")?;
        Ok(WindowSpec::new(length, slide))
    }

    fn rule(&mut self) -> Step<(Rule, SourceSpan)> {
        let start = self.peek().span;
        let head = self.atom()?;
        self.expect(Tok::Implies, "`:-`")?;
        let mut body = vec![self.atom()?];
        while self.peek().tok == Tok::Comma {
            self.bump();
            body.push(self.atom()?);
        }
        let window = if self.peek().tok == Tok::LBracket {
            Some(self.window()?)
        } else {
            None
        };
        let end = self.expect(Tok::Dot, "`,`, `[` or `.`")?;
        Ok((Rule::new(head, body, window), span_between(start, end)))
    }

    fn decl(&mut self) -> Step<Decl> {
        let start = self.expect(Tok::At, "`@`")?;
        let kind = match &self.peek().tok {
            Tok::Word(w) if w == "edb" => DeclKind::Edb,
            Tok::Word(w) if w == "idb" => DeclKind::Idb,
            _ => return Err(self.error_here("`edb` or `idb`")),
        };
        self.bump();
        let (predicate, _) = self.predicate_name()?;
        self.expect(Tok::Slash, "`/`")?;
        let arity = match &self.peek().tok {
            Tok::Word(w) => w.parse::<usize>().ok(),
            _ => None,
        }
        .ok_or_else(|| self.error_here("arity"))?;
        self.bump();
        let end = self.expect(Tok::Dot, "`.`")?;
        Ok(Decl {
            kind,
            predicate,
            arity,
            span: span_between(start, end),
        })
    }
}

fn span_between(start: SourceSpan, end: SourceSpan) -> SourceSpan {
    if start.line == end.line {
        SourceSpan {
            length: end.column + end.length - start.column,
            ..start
        }
    } else {
        start
    }
}

/// Parses and validates a program. Never panics; all syntax errors are
/// collected, recovering at each `.`.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser {
        tokens: lex(text),
        pos: 0,
        issues: Vec::new(),
    };
    let mut rules = Vec::new();
    let mut rule_spans = Vec::new();
    let mut decls: Vec<Decl> = Vec::new();
    loop {
        let res = match &p.peek().tok {
            Tok::Eof => break,
            Tok::At => p.decl().map(|d| decls.push(d)),
            Tok::Word(_) => p.rule().map(|(r, s)| {
                rules.push(r);
                rule_spans.push(s);
            }),
            _ => Err(p.error_here("rule or declaration")),
        };
        if let Err(issue) = res {
            p.issues.push(issue);
            let at_dot = p.peek().tok == Tok::Dot;
            if at_dot {
                p.bump();
            } else {
                p.recover();
            }
        }
    }
    let mut issues = p.issues;

    let mut edb = Vec::new();
    let mut idb = Vec::new();
    let mut seen = std::collections::BTreeMap::<String, (DeclKind, usize)>::new();
    for d in &decls {
        match seen.get(&d.predicate) {
            Some(&(kind, arity)) if kind != d.kind || arity != d.arity => {
                issues.push(ParseIssue {
                    message: format!("conflicting declarations for `{}`", d.predicate),
                    span: d.span,
                });
                continue;
            }
            Some(_) => continue,
            None => {}
        }
        seen.insert(d.predicate.clone(), (d.kind, d.arity));
        match d.kind {
            DeclKind::Edb => edb.push((d.predicate.clone(), d.arity)),
            DeclKind::Idb => idb.push((d.predicate.clone(), d.arity)),
        }
    }
    if !issues.is_empty() {
        return Err(ParseError { issues });
    }

    let program = Program::new(rules, edb, idb);
    let whole = SourceSpan {
        line: 1,
        column: 1,
        length: 0,
    };
    for d in validate(&program) {
        let span = match d.rule {
            Some(i) => rule_spans[i],
            None => decls.first().map_or(whole, |d| d.span),
        };
        issues.push(ParseIssue {
            message: d.to_string(),
            span,
        });
    }
    if issues.is_empty() {
        Ok(program)
    } else {
        Err(ParseError { issues })
    }
}

fn write_duration(out: &mut String, ms: u64) {
    if ms != 0 && ms.is_multiple_of(60_000) {
        let _ = write!(out, "{}m", ms / 60_000);
    } else if ms != 0 && ms.is_multiple_of(1_000) {
        let _ = write!(out, "{}s", ms / 1_000);
    } else {
        let _ = write!(out, "{ms}ms");
    }
}

fn write_atom(out: &mut String, atom: &Atom) {
    out.push_str(&atom.predicate);
    if !atom.terms.is_empty() {
        out.push('(');
        for (i, t) in atom.terms.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            match t {
                Term::Variable(v) => out.push_str(v),
                Term::Constant(c) => {
                    let _ = write_constant(out, c);
                }
            }
        }
        out.push(')');
    }
}

/// Canonical text for a valid program. Declarations are emitted only for
/// predicates whose classification or arity cannot be inferred from the rules.
pub fn format_program(program: &Program) -> String {
    let heads: BTreeSet<&Value> = program.rules.iter().map(|r| &r.head.predicate).collect();
    let bodies: BTreeSet<&Value> = program
        .rules
        .iter()
        .flat_map(|r| r.body.iter().map(|a| &a.predicate))
        .collect();
    let mut out = String::new();
    for p in &program.edb_predicates {
        if !bodies.contains(p) {
            let arity = program.arities.get(p).copied().unwrap_or(0);
            let _ = writeln!(out, "@edb {p}/{arity}.");
        }
    }
    for p in &program.idb_predicates {
        if !heads.contains(p) {
            let arity = program.arities.get(p).copied().unwrap_or(0);
            let _ = writeln!(out, "@idb {p}/{arity}.");
        }
    }
    for rule in &program.rules {
        write_atom(&mut out, &rule.head);
        out.push_str(" :- ");
        for (i, a) in rule.body.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write_atom(&mut out, a);
        }
        if let Some(w) = rule.window {
            out.push_str(" [window ");
            write_duration(&mut out, w.length_ms);
            if w.slide_ms != w.length_ms {
                out.push_str(" slide ");
                write_duration(&mut out, w.slide_ms);
            }
            out.push(']');
        }
        out.push_str(".\n");
    }
    out
}
