//! Lenient reader for JSON / Python-literal payloads embedded in free text.
//!
//! Accepts single- and double-quoted strings, `None`/`null`, `True`/`true`,
//! tuples (read as arrays), and trailing commas. Output is a
//! `serde_json::Value`.

use serde_json::{Map, Number, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiteralError {
    pub offset: usize,
    pub message: &'static str,
}

struct Reader<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, pos: usize) -> Self {
        Self { src: text.as_bytes(), text, pos }
    }

    fn err<T>(&self, message: &'static str) -> Result<T, LiteralError> {
        Err(LiteralError { offset: self.pos, message })
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_ascii_whitespace() {
                self.pos += 1;
            } else if c == b'#' {
                // python comment
                while let Some(c) = self.peek() {
                    if c == b'\n' {
                        break;
                    }
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn value(&mut self, depth: usize) -> Result<Value, LiteralError> {
        if depth > 64 {
            return self.err("nesting too deep");
        }
        self.skip_ws();
        match self.peek() {
            Some(b'{') => self.dict(depth),
            Some(b'[') => self.seq(b']', depth),
            Some(b'(') => self.seq(b')', depth),
            Some(b'\'') | Some(b'"') => self.string().map(Value::String),
            Some(c) if c == b'-' || c == b'+' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.keyword(),
            Some(_) => self.err("unexpected character"),
            None => self.err("unexpected end of input"),
        }
    }

    fn dict(&mut self, depth: usize) -> Result<Value, LiteralError> {
        self.pos += 1;
        let mut map = Map::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(b'}') {
                self.pos += 1;
                return Ok(Value::Object(map));
            }
            let key = match self.value(depth + 1)? {
                Value::String(s) => s,
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                _ => return self.err("unsupported dict key"),
            };
            self.skip_ws();
            if self.peek() != Some(b':') {
                return self.err("expected ':'");
            }
            self.pos += 1;
            let v = self.value(depth + 1)?;
            map.insert(key, v);
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return self.err("expected ',' or '}'"),
            }
        }
    }

    fn seq(&mut self, close: u8, depth: usize) -> Result<Value, LiteralError> {
        self.pos += 1;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(close) {
                self.pos += 1;
                return Ok(Value::Array(items));
            }
            items.push(self.value(depth + 1)?);
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(c) if c == close => {}
                _ => return self.err("expected ',' or closing bracket"),
            }
        }
    }

    fn string(&mut self) -> Result<String, LiteralError> {
        let quote = self.src[self.pos];
        let triple = self.src[self.pos..].starts_with(&[quote, quote, quote]);
        self.pos += if triple { 3 } else { 1 };
        let mut out = String::new();
        loop {
            let Some(c) = self.peek() else {
                return self.err("unterminated string");
            };
            if c == quote {
                if !triple {
                    self.pos += 1;
                    return Ok(out);
                }
                if self.src[self.pos..].starts_with(&[quote, quote, quote]) {
                    self.pos += 3;
                    return Ok(out);
                }
                out.push(quote as char);
                self.pos += 1;
                continue;
            }
            if c == b'\n' && !triple {
                return self.err("newline in string");
            }
            if c == b'\\' {
                self.pos += 1;
                let Some(e) = self.peek() else {
                    return self.err("dangling escape");
                };
                self.pos += 1;
                match e {
                    b'n' => out.push('\n'),
                    b't' => out.push('\t'),
                    b'r' => out.push('\r'),
                    b'0' => out.push('\0'),
                    b'\\' => out.push('\\'),
                    b'\'' => out.push('\''),
                    b'"' => out.push('"'),
                    b'/' => out.push('/'),
                    b'\n' => {}
                    b'u' => {
                        let hex = self.text.get(self.pos..self.pos + 4);
                        let code = hex.and_then(|h| u32::from_str_radix(h, 16).ok());
                        match code.and_then(char::from_u32) {
                            Some(ch) => {
                                out.push(ch);
                                self.pos += 4;
                            }
                            None => return self.err("bad unicode escape"),
                        }
                    }
                    other => {
                        out.push('\\');
                        out.push(other as char);
                    }
                }
                continue;
            }
            // copy one full UTF-8 character
            let ch = self.text[self.pos..].chars().next().expect("in bounds");
            out.push(ch);
            self.pos += ch.len_utf8();
        }
    }

    fn number(&mut self) -> Result<Value, LiteralError> {
        let start = self.pos;
        if matches!(self.peek(), Some(b'-') | Some(b'+')) {
            self.pos += 1;
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || matches!(c, b'.' | b'e' | b'E' | b'_') {
                self.pos += 1;
            } else if matches!(c, b'-' | b'+') && matches!(self.src[self.pos - 1], b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let raw: String = self.text[start..self.pos].chars().filter(|c| *c != '_').collect();
        let raw = raw.strip_prefix('+').unwrap_or(&raw);
        if let Ok(i) = raw.parse::<i64>() {
            return Ok(Value::Number(i.into()));
        }
        match raw.parse::<f64>().ok().and_then(Number::from_f64) {
            Some(n) => Ok(Value::Number(n)),
            None => {
                self.pos = start;
                self.err("bad number")
            }
        }
    }

    fn keyword(&mut self) -> Result<Value, LiteralError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        match &self.text[start..self.pos] {
            "None" | "null" | "none" | "Null" | "NULL" => Ok(Value::Null),
            "True" | "true" | "TRUE" => Ok(Value::Bool(true)),
            "False" | "false" | "FALSE" => Ok(Value::Bool(false)),
            _ => {
                self.pos = start;
                self.err("bare identifier")
            }
        }
    }
}

/// Parses a single literal starting at byte offset `start`. Returns the value
/// and the offset one past its end.
pub fn parse_at(text: &str, start: usize) -> Result<(Value, usize), LiteralError> {
    let mut r = Reader::new(text, start);
    let v = r.value(0)?;
    Ok((v, r.pos))
}

/// Parses a complete literal; trailing non-whitespace is an error.
pub fn parse_literal(text: &str) -> Result<Value, LiteralError> {
    let mut r = Reader::new(text, 0);
    let v = r.value(0)?;
    r.skip_ws();
    if r.pos != text.len() {
        return r.err("trailing characters");
    }
    Ok(v)
}

/// Bodies of fenced code blocks (```lang ... ```), in order. An unterminated
/// final fence runs to the end of the text.
pub fn code_fences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        // a fence tag is a single word; anything else means the payload
        // starts on the same line
        let tag = &after[..body_start.min(after.len())];
        let body_start = if tag.trim().chars().all(|c| c.is_ascii_alphanumeric()) { body_start } else { 0 };
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                out.push(body);
                break;
            }
        }
    }
    out
}

/// Every top-level list/dict literal found scanning left to right. Fenced
/// blocks are scanned first. Literals nested inside an earlier candidate are
/// not reported separately.
pub fn candidate_literals(text: &str) -> Vec<Value> {
    let mut regions: Vec<&str> = code_fences(text);
    regions.push(text);
    let mut out = Vec::new();
    for region in regions {
        let bytes = region.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'[' || bytes[i] == b'{' {
                if let Ok((v, end)) = parse_at(region, i) {
                    if !out.contains(&v) {
                        out.push(v);
                    }
                    i = end;
                    continue;
                }
            }
            i += 1;
        }
    }
    out
}

/// Python-literal rendering, used for simulated backend output.
pub fn to_python_literal(v: &Value) -> String {
    let mut out = String::new();
    write_python(v, &mut out);
    out
}

fn write_python(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("None"),
        Value::Bool(true) => out.push_str("True"),
        Value::Bool(false) => out.push_str("False"),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => {
            out.push('\'');
            for c in s.chars() {
                match c {
                    '\'' => out.push_str("\\'"),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    c => out.push(c),
                }
            }
            out.push('\'');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_python(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_python(&Value::String(k.clone()), out);
                out.push_str(": ");
                write_python(item, out);
            }
            out.push('}');
        }
    }
}
