//! Strict parser for the action grammar.
//!
//! ```text
//! action  := name "(" args ")"
//! tap     := "tap(" ID ")"             ID      := [A-Za-z0-9_.-]+
//! tap_xy  := "tap_xy(" INT "," INT ")" INT     := "-"? [0-9]+
//! type    := "type(" STRING ")"        STRING  := '"' ( [^"\\] | '\"' | '\\' )+ '"'
//! open_app, switch_device := name "(" STRING ")"
//! back    := "back()"      done := "done()"
//! ```
//!
//! Whitespace is allowed around arguments. Replies may wrap the action in
//! prose; the first candidate that parses wins.

use std::fmt;
use std::ops::Range;

use crate::env::Action;

const NAMES: &[&str] = &["switch_device", "open_app", "tap_xy", "type", "back", "done", "tap"];

fn is_ident_char(ch: char) -> bool {
    ch.is_ascii_alphanumeric() || matches!(ch, '_' | '.' | '-')
}

/// Whether `s` is usable as a bare element id in `tap(...)`.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_ident_char)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAction {
    pub action: Action,
    /// Byte range of the action expression inside the reply.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    /// Byte offset into the reply.
    pub position: usize,
    pub expected: Vec<&'static str>,
    pub found: Option<char>,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: expected {}, found ", self.position, self.expected.join(" or "))?;
        match self.found {
            Some(ch) => write!(f, "{ch:?}"),
            None => write!(f, "end of input"),
        }
    }
}

impl std::error::Error for ParseFailure {}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let ch = self.peek()?;
        self.pos += ch.len_utf8();
        Some(ch)
    }

    fn fail(&self, expected: &[&'static str]) -> ParseFailure {
        ParseFailure {
            position: self.pos,
            expected: expected.to_vec(),
            found: self.peek(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn expect(&mut self, ch: char, label: &'static str) -> Result<(), ParseFailure> {
        self.skip_ws();
        if self.peek() == Some(ch) {
            self.bump();
            Ok(())
        } else {
            Err(self.fail(&[label]))
        }
    }

    fn ident(&mut self) -> Result<String, ParseFailure> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(is_ident_char) {
            self.bump();
        }
        if self.pos == start {
            return Err(self.fail(&["element id"]));
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn int(&mut self) -> Result<i64, ParseFailure> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some('-') {
            self.bump();
        }
        let digits = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
        }
        if self.pos == digits {
            self.pos = start;
            return Err(self.fail(&["integer"]));
        }
        self.src[start..self.pos].parse().map_err(|_| {
            let failure = ParseFailure {
                position: start,
                expected: vec!["integer within 64-bit range"],
                found: self.src[start..].chars().next(),
            };
            self.pos = start;
            failure
        })
    }

    fn string(&mut self) -> Result<String, ParseFailure> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() != Some('"') {
            return Err(self.fail(&["string literal"]));
        }
        self.bump();
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return Err(self.fail(&["closing quote"])),
                Some('"') => {
                    self.bump();
                    break;
                }
                Some('\\') => {
                    self.bump();
                    match self.peek() {
                        Some(c @ ('"' | '\\')) => {
                            self.bump();
                            out.push(c);
                        }
                        _ => return Err(self.fail(&["`\"`", "`\\`"])),
                    }
                }
                Some(c) => {
                    self.bump();
                    out.push(c);
                }
            }
        }
        if out.is_empty() {
            return Err(ParseFailure {
                position: start,
                expected: vec!["non-empty string literal"],
                found: Some('"'),
            });
        }
        Ok(out)
    }
}

fn parse_at(src: &str, start: usize, name: &str) -> Result<ParsedAction, ParseFailure> {
    let mut cur = Cursor {
        src,
        pos: start + name.len() + 1,
    };
    let action = match name {
        "tap" => Action::Tap(cur.ident()?),
        "tap_xy" => {
            let x = cur.int()?;
            cur.expect(',', "`,`")?;
            Action::TapXy(x, cur.int()?)
        }
        "type" => Action::TypeText(cur.string()?),
        "open_app" => Action::OpenApp(cur.string()?),
        "switch_device" => Action::SwitchDevice(cur.string()?),
        "back" => Action::Back,
        "done" => Action::Done,
        _ => unreachable!("name comes from NAMES"),
    };
    cur.expect(')', "`)`")?;
    Ok(ParsedAction {
        action,
        span: start..cur.pos,
    })
}

fn candidates(src: &str) -> Vec<(usize, &'static str)> {
    let mut out = Vec::new();
    for (i, _) in src.char_indices() {
        if src[..i].chars().next_back().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            continue;
        }
        if let Some(name) = NAMES
            .iter()
            .find(|n| src[i..].starts_with(*n) && src[i + n.len()..].starts_with('('))
        {
            out.push((i, *name));
        }
    }
    out
}

/// Extracts the first well-formed action from a model reply.
///
/// When no candidate parses, the failure of the first candidate is reported;
/// when there is no candidate at all, the failure points at byte 0.
pub fn parse_action(reply: &str) -> Result<ParsedAction, ParseFailure> {
    let mut first_failure = None;
    for (start, name) in candidates(reply) {
        match parse_at(reply, start, name) {
            Ok(parsed) => return Ok(parsed),
            Err(e) => {
                first_failure.get_or_insert(e);
            }
        }
    }
    Err(first_failure.unwrap_or_else(|| ParseFailure {
        position: 0,
        expected: vec!["an action such as tap(ID), tap_xy(X, Y), type(\"TEXT\"), back() or done()"],
        found: reply.chars().next(),
    }))
}
