//! Gap-preserving lexer for Python-like snippets. Every token remembers the
//! whitespace that preceded it, so `render` reproduces the input string
//! byte for byte — the property the normalizer's lossless round trip rests on.

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LexError {
    #[error("unterminated string starting at byte {pos}")]
    UnterminatedString { pos: usize },
    #[error("unexpected character {ch:?} at byte {pos}")]
    UnexpectedChar { ch: char, pos: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokKind {
    Ident,
    Number,
    /// Quote character and any prefix letters (r, b, f, …) that were glued
    /// to the opening quote.
    Str { quote: char, prefix: String },
    Op,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokKind,
    /// Exact source text of the token, quotes and prefixes included.
    pub surface: String,
    /// Whitespace between the previous token and this one.
    pub gap: String,
}

impl Token {
    pub fn ident(surface: &str) -> Token {
        Token {
            kind: TokKind::Ident,
            surface: surface.to_string(),
            gap: String::new(),
        }
    }

    pub fn is_ident(&self) -> bool {
        self.kind == TokKind::Ident
    }

    /// For a plain (unprefixed) string token: the quote character and the
    /// content between the quotes.
    pub fn string_parts(&self) -> Option<(char, &str)> {
        match &self.kind {
            TokKind::Str { quote, prefix } if prefix.is_empty() => {
                let inner = &self.surface[1..self.surface.len() - 1];
                Some((*quote, inner))
            }
            _ => None,
        }
    }
}

/// A lexed snippet. Trailing whitespace is kept separately since gaps attach
/// to the token that follows them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexed {
    pub tokens: Vec<Token>,
    pub trailing: String,
}

impl Lexed {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&t.gap);
            out.push_str(&t.surface);
        }
        out.push_str(&self.trailing);
        out
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }
}

const MULTI_OPS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "!=", "==", "<=", ">=", "->", ":=", "**", "//", "<<",
    ">>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
];
const SINGLE_OPS: &str = "+-*/%=<>()[]{},:.;@&|^~!";

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_string_prefix(s: &str) -> bool {
    (1..=2).contains(&s.len()) && s.chars().all(|c| matches!(c, 'r' | 'b' | 'u' | 'f' | 'R' | 'B' | 'U' | 'F'))
}

pub fn lex_code(src: &str) -> Result<Lexed, LexError> {
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let n = chars.len();
    let mut i = 0;
    let mut tokens: Vec<Token> = Vec::new();

    loop {
        let gap_start = i;
        while i < n && chars[i].1.is_whitespace() {
            i += 1;
        }
        let gap: String = chars[gap_start..i].iter().map(|&(_, c)| c).collect();
        if i >= n {
            return Ok(Lexed { tokens, trailing: gap });
        }

        let (pos, c) = chars[i];
        let start = i;
        let kind;
        if is_ident_start(c) {
            while i < n && is_ident_continue(chars[i].1) {
                i += 1;
            }
            let word: String = chars[start..i].iter().map(|&(_, c)| c).collect();
            // string prefixes like r'…' glue onto the string token
            if i < n && (chars[i].1 == '\'' || chars[i].1 == '"') && is_string_prefix(&word) {
                let quote = chars[i].1;
                i = scan_string_body(&chars, i, quote)?;
                kind = TokKind::Str {
                    quote,
                    prefix: word,
                };
            } else {
                kind = TokKind::Ident;
            }
        } else if c.is_ascii_digit() {
            i = scan_number(&chars, i);
            kind = TokKind::Number;
        } else if c == '\'' || c == '"' {
            i = scan_string_body(&chars, i, c)?;
            kind = TokKind::Str {
                quote: c,
                prefix: String::new(),
            };
        } else if c == '#' {
            while i < n && chars[i].1 != '\n' {
                i += 1;
            }
            kind = TokKind::Comment;
        } else if let Some(op) = match_multi_op(&chars, i) {
            i += op.chars().count();
            kind = TokKind::Op;
        } else if SINGLE_OPS.contains(c) {
            i += 1;
            kind = TokKind::Op;
        } else {
            return Err(LexError::UnexpectedChar { ch: c, pos });
        }

        let surface: String = chars[start..i].iter().map(|&(_, c)| c).collect();
        tokens.push(Token { kind, surface, gap });
    }
}

fn match_multi_op(chars: &[(usize, char)], i: usize) -> Option<&'static str> {
    'outer: for op in MULTI_OPS {
        for (k, oc) in op.chars().enumerate() {
            if chars.get(i + k).map(|&(_, c)| c) != Some(oc) {
                continue 'outer;
            }
        }
        return Some(op);
    }
    None
}

/// Scans from the opening quote past the closing quote; backslash escapes the
/// next character. Newlines terminate unterminated-string detection early
/// since these snippets are single-quoted one-liners.
fn scan_string_body(chars: &[(usize, char)], open: usize, quote: char) -> Result<usize, LexError> {
    let n = chars.len();
    let mut i = open + 1;
    while i < n {
        match chars[i].1 {
            '\\' => i += 2,
            c if c == quote => return Ok(i + 1),
            '\n' => break,
            _ => i += 1,
        }
    }
    Err(LexError::UnterminatedString {
        pos: chars[open].0,
    })
}

fn scan_number(chars: &[(usize, char)], start: usize) -> usize {
    let n = chars.len();
    let mut i = start;
    // hex/octal/binary literals
    if chars[i].1 == '0' && i + 1 < n && matches!(chars[i + 1].1, 'x' | 'X' | 'o' | 'O' | 'b' | 'B') {
        i += 2;
        while i < n && (chars[i].1.is_ascii_hexdigit() || chars[i].1 == '_') {
            i += 1;
        }
        return i;
    }
    while i < n && (chars[i].1.is_ascii_digit() || chars[i].1 == '_') {
        i += 1;
    }
    if i < n && chars[i].1 == '.' && chars.get(i + 1).is_some_and(|&(_, c)| c.is_ascii_digit()) {
        i += 1;
        while i < n && chars[i].1.is_ascii_digit() {
            i += 1;
        }
    }
    if i < n && matches!(chars[i].1, 'e' | 'E') {
        let mut j = i + 1;
        if j < n && matches!(chars[j].1, '+' | '-') {
            j += 1;
        }
        if j < n && chars[j].1.is_ascii_digit() {
            i = j;
            while i < n && chars[i].1.is_ascii_digit() {
                i += 1;
            }
        }
    }
    if i < n && matches!(chars[i].1, 'j' | 'J') {
        i += 1;
    }
    i
}

/// Renders bare surfaces (no gap information, e.g. model output) into
/// readable code: single spaces except around tight punctuation.
pub fn render_surfaces<S: AsRef<str>>(surfaces: &[S]) -> String {
    let mut out = String::new();
    let no_space_before = [")", "]", "}", ",", ":", ";", ".", "("];
    let no_space_after = ["(", "[", "{", ".", "~"];
    let mut prev: Option<&str> = None;
    for s in surfaces {
        let s = s.as_ref();
        if let Some(p) = prev {
            let tight = no_space_after.contains(&p)
                || (no_space_before.contains(&s) && !(s == "(" && !p.chars().all(|c| is_ident_continue(c))))
                || (s == "[" && p.chars().last().is_some_and(is_ident_continue))
                || (s == "[" && (p == ")" || p == "]"));
            if !tight {
                out.push(' ');
            }
        }
        out.push_str(s);
        prev = Some(s);
    }
    out
}
