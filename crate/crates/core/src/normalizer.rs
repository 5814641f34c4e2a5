//! Variable and literal normalization.
//!
//! Two conventions, used in different places:
//! * `normalize_snippet` canonicalizes code on its own — identifiers that are
//!   not keywords, allowlisted names, or attribute/keyword-argument names,
//!   plus string-literal contents, all share one `varN` counter. This is the
//!   form the datastore is built from.
//! * `normalize_pair` aligns an intent with its code: entities marked in the
//!   intent by quotes or backticks get category placeholders (`strN`,
//!   `varN`/`lstN`) and their code occurrences are rewritten to match.
//!
//! Both record a `SubstitutionMap` so `denormalize` can restore the original
//! surface forms exactly.

use crate::lexer::{lex_code, LexError, Lexed, TokKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum NormalizeError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("unknown placeholder {name}")]
    UnknownPlaceholder { name: String },
}

pub const PY_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
    "try", "while", "with", "yield",
];

/// Builtins plus module roots commonly imported in snippet corpora. Attribute
/// names after a dot are never substituted, so only roots need listing.
pub const DEFAULT_ALLOWLIST: &[&str] = &[
    // builtins
    "abs", "all", "any", "ascii", "bin", "bool", "bytearray", "bytes", "callable", "chr",
    "classmethod", "compile", "complex", "delattr", "dict", "dir", "divmod", "enumerate",
    "eval", "exec", "filter", "float", "format", "frozenset", "getattr", "globals", "hasattr",
    "hash", "hex", "id", "input", "int", "isinstance", "issubclass", "iter", "len", "list",
    "locals", "map", "max", "min", "next", "object", "oct", "open", "ord", "pow", "print",
    "property", "range", "repr", "reversed", "round", "set", "setattr", "slice", "sorted",
    "staticmethod", "str", "sum", "super", "tuple", "type", "vars", "zip", "self", "cls",
    "__import__", "__name__", "__file__",
    // common module roots
    "os", "sys", "re", "json", "math", "random", "datetime", "time", "collections",
    "itertools", "functools", "operator", "string", "subprocess", "shutil", "glob", "pickle",
    "csv", "io", "struct", "socket", "threading", "multiprocessing", "urllib", "urllib2",
    "requests", "numpy", "np", "pandas", "pd", "matplotlib", "plt", "scipy", "django",
    "flask", "sqlite3", "logging", "argparse", "copy", "heapq", "bisect", "array", "base64",
    "hashlib", "binascii", "zlib", "gzip", "tarfile", "zipfile", "xml", "html", "http",
    "email", "ast", "inspect", "traceback", "warnings", "unittest", "pathlib", "typing",
    "enum", "dataclasses", "abc", "decimal", "fractions", "statistics", "calendar", "queue",
    "signal", "select", "errno", "ctypes", "platform", "getpass", "tempfile", "uuid",
    "textwrap", "pprint", "codecs", "locale", "gettext",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Var,
    Str,
    Lst,
}

impl Category {
    fn prefix(self) -> &'static str {
        match self {
            Category::Var => "var",
            Category::Str => "str",
            Category::Lst => "lst",
        }
    }
}

/// Splits `var3`/`str0`/`lst12` into category and index.
pub fn parse_placeholder(s: &str) -> Option<(Category, usize)> {
    let (cat, rest) = if let Some(r) = s.strip_prefix("var") {
        (Category::Var, r)
    } else if let Some(r) = s.strip_prefix("str") {
        (Category::Str, r)
    } else if let Some(r) = s.strip_prefix("lst") {
        (Category::Lst, r)
    } else {
        return None;
    };
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok().map(|i| (cat, i))
}

/// Ordered placeholder → original-surface association. Entry order is
/// assignment order, which makes maps comparable across runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionMap {
    entries: Vec<(String, String)>,
}

impl SubstitutionMap {
    pub fn get(&self, placeholder: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(p, _)| p == placeholder)
            .map(|(_, o)| o.as_str())
    }

    fn insert(&mut self, placeholder: String, original: String) {
        if self.get(&placeholder).is_none() {
            self.entries.push((placeholder, original));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(p, o)| (p.as_str(), o.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when every entry maps a placeholder to itself — the shape a
    /// second normalization pass produces.
    pub fn is_identity(&self) -> bool {
        self.entries.iter().all(|(p, o)| p == o)
    }
}

#[derive(Debug, Clone)]
pub struct NormalizedSnippet {
    pub lexed: Lexed,
    pub map: SubstitutionMap,
}

impl NormalizedSnippet {
    pub fn code(&self) -> String {
        self.lexed.render()
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.lexed.surfaces()
    }
}

#[derive(Debug, Clone)]
pub struct NormalizedIntent {
    pub text: String,
    pub entities: Vec<Entity>,
    pub map: SubstitutionMap,
}

#[derive(Debug, Clone)]
pub struct Entity {
    pub placeholder: String,
    pub text: String,
    pub category: Category,
}

#[derive(Debug, Clone)]
pub struct NormalizedPair {
    pub intent: String,
    pub code: Lexed,
    pub map: SubstitutionMap,
    /// Entities marked in the intent that never occurred in the code.
    pub unmatched: Vec<String>,
}

pub struct Normalizer {
    allow: HashSet<String>,
    keywords: HashSet<String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Normalizer {
    pub fn new() -> Self {
        Normalizer {
            allow: DEFAULT_ALLOWLIST.iter().map(|s| s.to_string()).collect(),
            keywords: PY_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Replaces the builtin allowlist with the file's contents: one name per
    /// line, blank lines ignored.
    pub fn from_allowlist_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Normalizer {
            allow: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            keywords: PY_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn is_protected(&self, word: &str) -> bool {
        self.keywords.contains(word) || self.allow.contains(word)
    }

    /// Table-6 style normalization: one shared `var` counter over identifiers
    /// and string contents. Existing placeholders are kept as themselves and
    /// their indices never reused.
    pub fn normalize_snippet(&self, code: &str) -> Result<NormalizedSnippet, NormalizeError> {
        let mut lexed = lex_code(code)?;
        let mut map = SubstitutionMap::default();
        let mut by_original: HashMap<String, String> = HashMap::new();
        let mut taken: BTreeSet<usize> = BTreeSet::new();

        // reserve indices already present so fresh assignments never collide
        for tok in &lexed.tokens {
            let name = match (&tok.kind, tok.string_parts()) {
                (TokKind::Ident, _) => Some(tok.surface.as_str()),
                (_, Some((_, content))) => Some(content),
                _ => None,
            };
            if let Some((Category::Var, idx)) = name.and_then(parse_placeholder) {
                taken.insert(idx);
            }
        }
        let mut alloc = move || {
            let mut i = 0;
            while taken.contains(&i) {
                i += 1;
            }
            taken.insert(i);
            i
        };

        let surfaces: Vec<String> = lexed.tokens.iter().map(|t| t.surface.clone()).collect();
        let kinds: Vec<TokKind> = lexed.tokens.iter().map(|t| t.kind.clone()).collect();
        let prev_code_token = |i: usize| -> Option<&str> {
            (0..i)
                .rev()
                .find(|&j| kinds[j] != TokKind::Comment)
                .map(|j| surfaces[j].as_str())
        };
        let next_code_token = |i: usize| -> Option<&str> {
            ((i + 1)..surfaces.len())
                .find(|&j| kinds[j] != TokKind::Comment)
                .map(|j| surfaces[j].as_str())
        };

        for i in 0..lexed.tokens.len() {
            match &kinds[i] {
                TokKind::Ident => {
                    let word = surfaces[i].as_str();
                    if self.is_protected(word) {
                        continue;
                    }
                    // attribute name: json.dumps keeps dumps
                    if prev_code_token(i) == Some(".") {
                        continue;
                    }
                    // keyword argument name: f(x, reverse=True) keeps reverse
                    if next_code_token(i) == Some("=")
                        && matches!(prev_code_token(i), Some("(") | Some(","))
                    {
                        continue;
                    }
                    if parse_placeholder(word).is_some() {
                        map.insert(word.to_string(), word.to_string());
                        continue;
                    }
                    let placeholder = by_original
                        .entry(word.to_string())
                        .or_insert_with(|| format!("var{}", alloc()))
                        .clone();
                    map.insert(placeholder.clone(), word.to_string());
                    lexed.tokens[i].surface = placeholder;
                }
                TokKind::Str { .. } => {
                    let Some((quote, content)) = lexed.tokens[i].string_parts() else {
                        continue; // prefixed strings left untouched
                    };
                    if content.is_empty() {
                        continue;
                    }
                    if parse_placeholder(content).is_some() {
                        map.insert(content.to_string(), content.to_string());
                        continue;
                    }
                    let content = content.to_string();
                    let placeholder = by_original
                        .entry(content.clone())
                        .or_insert_with(|| format!("var{}", alloc()))
                        .clone();
                    map.insert(placeholder.clone(), content);
                    lexed.tokens[i].surface = format!("{quote}{placeholder}{quote}");
                }
                _ => {}
            }
        }
        Ok(NormalizedSnippet { lexed, map })
    }

    /// Extracts marked entities from an intent: '…' and "…" spans become
    /// `strN`, `…` spans become `varN` (or `lstN` when `lst_texts` says the
    /// code binds them to a bracketed literal). The returned text has the
    /// markers replaced by bare placeholders.
    fn extract_intent(&self, intent: &str, lst_texts: &HashSet<String>) -> NormalizedIntent {
        let mut out = String::new();
        let mut entities: Vec<Entity> = Vec::new();
        let mut map = SubstitutionMap::default();
        let mut counters = [0usize; 3];
        let mut seen: HashMap<(u8, String), String> = HashMap::new();

        let chars: Vec<char> = intent.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '\'' || c == '"' || c == '`' {
                if let Some(end) = chars[i + 1..].iter().position(|&x| x == c) {
                    let text: String = chars[i + 1..i + 1 + end].iter().collect();
                    i += end + 2;
                    if text.is_empty() {
                        continue;
                    }
                    let category = if c == '`' {
                        if lst_texts.contains(&text) {
                            Category::Lst
                        } else {
                            Category::Var
                        }
                    } else {
                        Category::Str
                    };
                    let cat_ix = category as u8;
                    let placeholder = seen
                        .entry((cat_ix, text.clone()))
                        .or_insert_with(|| {
                            let n = counters[cat_ix as usize];
                            counters[cat_ix as usize] += 1;
                            format!("{}{}", category.prefix(), n)
                        })
                        .clone();
                    map.insert(placeholder.clone(), text.clone());
                    if !entities.iter().any(|e| e.placeholder == placeholder) {
                        entities.push(Entity {
                            placeholder: placeholder.clone(),
                            text,
                            category,
                        });
                    }
                    out.push_str(&placeholder);
                    continue;
                }
            }
            out.push(c);
            i += 1;
        }
        NormalizedIntent {
            text: out,
            entities,
            map,
        }
    }

    pub fn normalize_intent(&self, intent: &str) -> NormalizedIntent {
        self.extract_intent(intent, &HashSet::new())
    }

    /// Pair normalization: intent entities drive the placeholders; code
    /// occurrences are rewritten to match. Unmarked code identifiers are left
    /// alone and entities without code occurrences are reported, not errors.
    pub fn normalize_pair(&self, intent: &str, code: &str) -> Result<NormalizedPair, NormalizeError> {
        let mut lexed = lex_code(code)?;

        // identifiers bound by a bracketed-literal assignment → lst category
        let mut lst_texts: HashSet<String> = HashSet::new();
        let toks = &lexed.tokens;
        for i in 0..toks.len() {
            if toks[i].is_ident()
                && toks.get(i + 1).map(|t| t.surface.as_str()) == Some("=")
                && toks.get(i + 2).map(|t| t.surface.as_str()) == Some("[")
            {
                lst_texts.insert(toks[i].surface.clone());
            }
        }

        let ni = self.extract_intent(intent, &lst_texts);
        let mut used: HashSet<String> = HashSet::new();

        // entity lookup by text, preferring the natural category per token kind
        let find = |text: &str, prefer_str: bool| -> Option<&Entity> {
            let matches: Vec<&Entity> = ni.entities.iter().filter(|e| e.text == text).collect();
            if matches.is_empty() {
                return None;
            }
            matches
                .iter()
                .find(|e| (e.category == Category::Str) == prefer_str)
                .or(matches.first())
                .copied()
        };

        for i in 0..lexed.tokens.len() {
            match &lexed.tokens[i].kind {
                TokKind::Ident | TokKind::Number => {
                    if let Some(e) = find(&lexed.tokens[i].surface, false) {
                        used.insert(e.placeholder.clone());
                        lexed.tokens[i].surface = e.placeholder.clone();
                        lexed.tokens[i].kind = TokKind::Ident;
                    }
                }
                TokKind::Str { .. } => {
                    if let Some((quote, content)) = lexed.tokens[i].string_parts() {
                        if let Some(e) = find(content, true) {
                            used.insert(e.placeholder.clone());
                            lexed.tokens[i].surface =
                                format!("{quote}{}{quote}", e.placeholder);
                        }
                    }
                }
                _ => {}
            }
        }

        let unmatched = ni
            .entities
            .iter()
            .filter(|e| !used.contains(&e.placeholder))
            .map(|e| e.placeholder.clone())
            .collect();
        Ok(NormalizedPair {
            intent: ni.text,
            code: lexed,
            map: ni.map,
            unmatched,
        })
    }

    /// Restores original surfaces. Every placeholder-shaped identifier or
    /// string content must appear in the map.
    pub fn denormalize(&self, code: &Lexed, map: &SubstitutionMap) -> Result<Lexed, NormalizeError> {
        let mut out = code.clone();
        for tok in &mut out.tokens {
            match &tok.kind {
                TokKind::Ident if parse_placeholder(&tok.surface).is_some() => {
                    let original =
                        map.get(&tok.surface)
                            .ok_or_else(|| NormalizeError::UnknownPlaceholder {
                                name: tok.surface.clone(),
                            })?;
                    tok.surface = original.to_string();
                }
                TokKind::Str { .. } => {
                    if let Some((quote, content)) = tok.string_parts() {
                        if parse_placeholder(content).is_some() {
                            let original = map.get(content).ok_or_else(|| {
                                NormalizeError::UnknownPlaceholder {
                                    name: content.to_string(),
                                }
                            })?;
                            tok.surface = format!("{quote}{original}{quote}");
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Surface-level denormalization for decoded token sequences.
    pub fn denormalize_surfaces(
        &self,
        surfaces: &[String],
        map: &SubstitutionMap,
    ) -> Result<Vec<String>, NormalizeError> {
        surfaces
            .iter()
            .map(|s| {
                if parse_placeholder(s).is_some() {
                    return match map.get(s) {
                        Some(o) => Ok(o.to_string()),
                        None => Err(NormalizeError::UnknownPlaceholder { name: s.clone() }),
                    };
                }
                // quoted placeholder: 'str0' → 'original'
                if s.len() >= 2 {
                    let bytes = s.as_bytes();
                    let q = bytes[0] as char;
                    if (q == '\'' || q == '"') && bytes[s.len() - 1] as char == q {
                        let inner = &s[1..s.len() - 1];
                        if parse_placeholder(inner).is_some() {
                            return match map.get(inner) {
                                Some(o) => Ok(format!("{q}{o}{q}")),
                                None => Err(NormalizeError::UnknownPlaceholder {
                                    name: inner.to_string(),
                                }),
                            };
                        }
                    }
                }
                Ok(s.clone())
            })
            .collect()
    }
}

/// Whitespace/punctuation tokenizer for intents: lowercased words, digits
/// kept, punctuation as single tokens.
pub fn tokenize_intent(intent: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in intent.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> Normalizer {
        Normalizer::new()
    }

    #[test]
    fn reproduces_published_substitution_rows() {
        let cases = [
            ("json.dumps(geodata)", "json.dumps(var0)"),
            ("getattr(a, 'print_test')()", "getattr(var0, 'var1')()"),
            ("format(5e-10, 'f')", "format(5e-10, 'var0')"),
        ];
        for (input, expect) in cases {
            let n = norm().normalize_snippet(input).unwrap();
            assert_eq!(n.code(), expect, "input {input:?}");
        }
    }

    #[test]
    fn same_identifier_shares_one_placeholder() {
        let n = norm().normalize_snippet("foo(bar, bar, baz)").unwrap();
        assert_eq!(n.code(), "var0(var1, var1, var2)");
    }

    #[test]
    fn keyword_arguments_and_attributes_survive() {
        let n = norm()
            .normalize_snippet("sorted(data, key=lambda x: x.lower(), reverse=True)")
            .unwrap();
        assert_eq!(
            n.code(),
            "sorted(var0, key=lambda var1: var1.lower(), reverse=True)"
        );
    }

    #[test]
    fn normalization_is_idempotent() {
        let snippets = [
            "getattr(a, 'print_test')()",
            "mydict['some key'] = compute(val, val)",
            "x = [row for row in rows if row]",
        ];
        for s in snippets {
            let once = norm().normalize_snippet(s).unwrap();
            let twice = norm().normalize_snippet(&once.code()).unwrap();
            assert_eq!(once.code(), twice.code(), "not idempotent for {s:?}");
            assert!(twice.map.is_identity(), "second map not identity: {:?}", twice.map);
        }
    }

    #[test]
    fn existing_placeholders_reserve_their_indices() {
        let n = norm().normalize_snippet("zip(var1, fresh)").unwrap();
        // var1 keeps itself; fresh takes the lowest free index
        assert_eq!(n.code(), "zip(var1, var0)");
        assert_eq!(n.map.get("var1"), Some("var1"));
        assert_eq!(n.map.get("var0"), Some("fresh"));
    }

    #[test]
    fn round_trip_restores_source_exactly() {
        let snippets = [
            "getattr(a, 'print_test')()",
            "json.dumps(geodata)",
            "format(5e-10, 'f')",
            "df.groupby([df.index.date, 'action']).count()",
            "results = [r for k in keywords for r in re.findall(k, message.lower())]",
            "s.replace('it\\'s', \"that's\")  # tricky quotes",
            "open('file.txt').read().split('\\n')",
        ];
        let nm = norm();
        for s in snippets {
            let n = nm.normalize_snippet(s).unwrap();
            let back = nm.denormalize(&n.lexed, &n.map).unwrap();
            assert_eq!(back.render(), s, "round trip failed for {s:?}");
        }
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let nm = norm();
        let lexed = lex_code("var9.count('str3')").unwrap();
        let err = nm.denormalize(&lexed, &SubstitutionMap::default()).unwrap_err();
        assert!(matches!(err, NormalizeError::UnknownPlaceholder { name } if name == "var9"));
    }

    #[test]
    fn empty_map_identity_on_placeholder_free_code() {
        let nm = norm();
        let lexed = lex_code("print(len(sys.argv))").unwrap();
        let out = nm.denormalize(&lexed, &SubstitutionMap::default()).unwrap();
        assert_eq!(out.render(), "print(len(sys.argv))");
    }

    #[test]
    fn lex_errors_surface_with_position() {
        let err = norm().normalize_snippet("x = 'broken").unwrap_err();
        assert!(matches!(err, NormalizeError::Lex(LexError::UnterminatedString { pos: 4 })));
    }

    #[test]
    fn pair_normalization_matches_published_example() {
        let p = norm()
            .normalize_pair(
                "count the occurrences of item 'x' in list `mylist`",
                "mylist.count('x')",
            )
            .unwrap();
        assert_eq!(p.intent, "count the occurrences of item str0 in list var0");
        assert_eq!(p.code.render(), "var0.count('str0')");
        assert!(p.unmatched.is_empty());
        assert_eq!(p.map.get("str0"), Some("x"));
        assert_eq!(p.map.get("var0"), Some("mylist"));
    }

    #[test]
    fn pair_without_entities_is_unchanged() {
        let p = norm()
            .normalize_pair("sort a list of numbers", "sorted(numbers)")
            .unwrap();
        assert_eq!(p.intent, "sort a list of numbers");
        assert_eq!(p.code.render(), "sorted(numbers)");
        assert!(p.map.is_empty());
    }

    #[test]
    fn entities_numbered_by_intent_order() {
        let p = norm()
            .normalize_pair("swap `b` and `a`", "a, b = b, a")
            .unwrap();
        // first appearance in the intent wins: b → var0, a → var1
        assert_eq!(p.intent, "swap var0 and var1");
        assert_eq!(p.code.render(), "var1, var0 = var0, var1");
    }

    #[test]
    fn bracketed_literal_assignment_marks_lst_category() {
        let p = norm()
            .normalize_pair(
                "make a list `xs` of the first three squares",
                "xs = [1, 4, 9]",
            )
            .unwrap();
        assert_eq!(p.intent, "make a list lst0 of the first three squares");
        assert_eq!(p.code.render(), "lst0 = [1, 4, 9]");
    }

    #[test]
    fn unmatched_entities_are_reported() {
        let p = norm()
            .normalize_pair("print `missing` to stdout", "print('hello')")
            .unwrap();
        assert_eq!(p.unmatched, vec!["var0".to_string()]);
        assert_eq!(p.code.render(), "print('hello')");
    }

    #[test]
    fn repeated_entity_mentions_share_a_placeholder() {
        let p = norm()
            .normalize_pair("add `x` to `x`", "x + x")
            .unwrap();
        assert_eq!(p.intent, "add var0 to var0");
        assert_eq!(p.code.render(), "var0 + var0");
    }

    #[test]
    fn surface_denormalization_handles_quoted_placeholders() {
        let nm = norm();
        let mut map = SubstitutionMap::default();
        map.insert("var0".into(), "mylist".into());
        map.insert("str0".into(), "x".into());
        let out = nm
            .denormalize_surfaces(
                &["var0".into(), ".".into(), "count".into(), "(".into(), "'str0'".into(), ")".into()],
                &map,
            )
            .unwrap();
        assert_eq!(out.join(""), "mylist.count('x')");
    }

    #[test]
    fn intent_tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize_intent("Count the occurrences of item str0 in list var0!"),
            vec!["count", "the", "occurrences", "of", "item", "str0", "in", "list", "var0", "!"]
        );
    }
}
