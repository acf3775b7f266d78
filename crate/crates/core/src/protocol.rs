//! The JSON-in-XML agent dialect.
//!
//! ```text
//! <tool>{"name": "websearch", "args": {"query": "..."}}</tool>
//! <result>...</result>
//! <answer>...</answer>
//! ```
//!
//! The grammar is flat. Anything that does not form a clean
//! open-body-close triple becomes plain text plus a [`ParseError`], so the
//! parser is total over arbitrary input. Result and answer bodies escape `&`
//! and `<` as `&amp;` and `&lt;`.

use std::ops::Range;

use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Tool,
    Result,
    Answer,
}

impl Tag {
    const ALL: [Tag; 3] = [Tag::Tool, Tag::Result, Tag::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Tool => "tool",
            Tag::Result => "result",
            Tag::Answer => "answer",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            Tag::Tool => "<tool>",
            Tag::Result => "<result>",
            Tag::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Tag::Tool => "</tool>",
            Tag::Result => "</result>",
            Tag::Answer => "</answer>",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub name: String,
    pub args: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, args: Map<String, Value>) -> Self {
        Self { name: name.into(), args }
    }

    pub fn str_arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentKind {
    PlainText(String),
    ToolCall(ToolCall),
    ToolResult(String),
    Answer(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSegment {
    /// Byte range of the source this segment came from.
    pub span: Range<usize>,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParseErrorKind {
    UnclosedTag,
    NestedTag,
    BadJson,
    NonObjectArgs,
    EmptyName,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub span: Range<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub segments: Vec<TaggedSegment>,
    pub errors: Vec<ParseError>,
}

impl Parsed {
    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.segments.iter().filter_map(|s| match &s.kind {
            SegmentKind::ToolCall(c) => Some(c),
            _ => None,
        })
    }

    pub fn answer(&self) -> Option<&str> {
        extract_answer(&self.segments)
    }

    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Token {
    start: usize,
    end: usize,
    tag: Tag,
    closing: bool,
}

fn tokenize(text: &str) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while let Some(off) = bytes[i..].iter().position(|&b| b == b'<') {
        let at = i + off;
        let rest = &text[at..];
        let found = Tag::ALL.iter().find_map(|&tag| {
            if rest.starts_with(tag.open()) {
                Some((tag, false, tag.open().len()))
            } else if rest.starts_with(tag.close()) {
                Some((tag, true, tag.close().len()))
            } else {
                None
            }
        });
        match found {
            Some((tag, closing, len)) => {
                tokens.push(Token {
                    start: at,
                    end: at + len,
                    tag,
                    closing,
                });
                i = at + len;
            }
            None => i = at + 1,
        }
    }
    tokens
}

struct Builder<'a> {
    text: &'a str,
    cursor: usize,
    out: Parsed,
}

impl<'a> Builder<'a> {
    fn push_plain(&mut self, range: Range<usize>) {
        if range.is_empty() {
            return;
        }
        if let Some(TaggedSegment {
            span,
            kind: SegmentKind::PlainText(s),
        }) = self.out.segments.last_mut()
        {
            if span.end == range.start {
                s.push_str(&self.text[range.clone()]);
                span.end = range.end;
                return;
            }
        }
        self.out.segments.push(TaggedSegment {
            kind: SegmentKind::PlainText(self.text[range.clone()].to_string()),
            span: range,
        });
    }

    /// Flushes pending plain text up to `at`.
    fn catch_up(&mut self, at: usize) {
        self.push_plain(self.cursor..at);
        self.cursor = at;
    }

    fn malformed(&mut self, span: Range<usize>, kind: ParseErrorKind, detail: String) {
        self.catch_up(span.start);
        self.push_plain(span.clone());
        self.cursor = span.end;
        self.out.errors.push(ParseError { kind, span, detail });
    }

    fn element(&mut self, span: Range<usize>, kind: SegmentKind) {
        self.catch_up(span.start);
        self.cursor = span.end;
        self.out.segments.push(TaggedSegment { span, kind });
    }
}

/// Splits an assistant message into tagged segments. Never fails: malformed
/// regions come back as plain text with an accompanying error.
pub fn parse_assistant_message(text: &str) -> Parsed {
    let tokens = tokenize(text);

    // next_close[j][t]: index of the first closing token of tag t after j
    let mut next_close = vec![[usize::MAX; 3]; tokens.len()];
    let mut seen = [usize::MAX; 3];
    for j in (0..tokens.len()).rev() {
        next_close[j] = seen;
        if tokens[j].closing {
            seen[tokens[j].tag.index()] = j;
        }
    }

    let mut b = Builder {
        text,
        cursor: 0,
        out: Parsed::default(),
    };
    let mut j = 0;
    while j < tokens.len() {
        let t = tokens[j];
        if t.closing {
            b.malformed(
                t.start..t.end,
                ParseErrorKind::Unknown,
                format!("stray {}", t.tag.close()),
            );
            j += 1;
            continue;
        }
        let c = next_close[j][t.tag.index()];
        if c == usize::MAX {
            b.malformed(
                t.start..t.end,
                ParseErrorKind::UnclosedTag,
                format!("{} is never closed", t.tag.open()),
            );
            j += 1;
            continue;
        }
        let close = tokens[c];
        let span = t.start..close.end;
        if c != j + 1 {
            b.malformed(
                span,
                ParseErrorKind::NestedTag,
                format!("tags inside {}", t.tag.open()),
            );
            j = c + 1;
            continue;
        }
        let body = &text[t.end..close.start];
        match t.tag {
            Tag::Tool => match parse_tool_body(body) {
                Ok(call) => b.element(span, SegmentKind::ToolCall(call)),
                Err((kind, detail)) => b.malformed(span, kind, detail),
            },
            Tag::Result => b.element(span, SegmentKind::ToolResult(unescape(body))),
            Tag::Answer => b.element(span, SegmentKind::Answer(unescape(body))),
        }
        j = c + 1;
    }
    b.catch_up(text.len());
    b.out
}

fn parse_tool_body(body: &str) -> Result<ToolCall, (ParseErrorKind, String)> {
    let value: Value = serde_json::from_str(body).map_err(|e| (ParseErrorKind::BadJson, e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err((ParseErrorKind::BadJson, "tool body is not a JSON object".into()));
    };
    if let Some(extra) = obj.keys().find(|k| *k != "name" && *k != "args") {
        return Err((ParseErrorKind::BadJson, format!("unexpected key {extra:?}")));
    }
    let name = match obj.remove("name") {
        None => return Err((ParseErrorKind::EmptyName, "missing \"name\"".into())),
        Some(Value::String(s)) if s.is_empty() => return Err((ParseErrorKind::EmptyName, "\"name\" is empty".into())),
        Some(Value::String(s)) => s,
        Some(_) => return Err((ParseErrorKind::BadJson, "\"name\" is not a string".into())),
    };
    match obj.remove("args") {
        Some(Value::Object(args)) => Ok(ToolCall { name, args }),
        Some(_) => Err((ParseErrorKind::NonObjectArgs, "\"args\" is not an object".into())),
        None => Err((ParseErrorKind::NonObjectArgs, "missing \"args\"".into())),
    }
}

/// Escapes `&` and `<` for embedding in a result or answer body.
pub fn escape_body(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            _ => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        rest = &rest[i..];
        if let Some(r) = rest.strip_prefix("&lt;") {
            out.push('<');
            rest = r;
        } else if let Some(r) = rest.strip_prefix("&amp;") {
            out.push('&');
            rest = r;
        } else {
            out.push('&');
            rest = &rest[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Canonical form: compact JSON, `name` before `args`, args keys sorted.
/// `<` inside strings is written as `\u003c` so a body can never contain a
/// closing tag.
pub fn render_tool_call(call: &ToolCall) -> String {
    let name = serde_json::to_string(&call.name).expect("string serializes");
    let args = serde_json::to_string(&call.args).expect("map serializes");
    let json = format!("{{\"name\":{name},\"args\":{args}}}").replace('<', "\\u003c");
    format!("<tool>{json}</tool>")
}

pub fn render_result(content: &str) -> String {
    format!("<result>{}</result>", escape_body(content))
}

pub fn render_answer(content: &str) -> String {
    format!("<answer>{}</answer>", escape_body(content))
}

pub fn extract_answer(segments: &[TaggedSegment]) -> Option<&str> {
    segments.iter().find_map(|s| match &s.kind {
        SegmentKind::Answer(a) => Some(a.as_str()),
        _ => None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XmlReport {
    pub well_formed: bool,
    pub open_tags_balanced: bool,
    pub answer_count: usize,
}

pub fn xml_report(text: &str) -> XmlReport {
    let parsed = parse_assistant_message(text);
    let mut balance = [0i64; 3];
    for t in tokenize(text) {
        balance[t.tag.index()] += if t.closing { -1 } else { 1 };
    }
    XmlReport {
        well_formed: parsed.errors.is_empty(),
        open_tags_balanced: balance.iter().all(|b| *b == 0),
        answer_count: parsed
            .segments
            .iter()
            .filter(|s| matches!(s.kind, SegmentKind::Answer(_)))
            .count(),
    }
}
