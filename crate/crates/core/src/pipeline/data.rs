//! Dataset ingestion: JSON-lines pairs and their tokenized, id-encoded form.

use super::PipelineError;
use crate::lexer::lex_code;
use crate::normalizer::{tokenize_intent, Normalizer, SubstitutionMap};
use crate::vocab::{Vocab, BOS, EOS};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One intent/code pair. Field names follow the CoNaLa release so its files
/// load unchanged; unknown keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub intent: String,
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_intent: Option<String>,
}

impl RawExample {
    pub fn new(intent: &str, snippet: &str) -> Self {
        RawExample {
            intent: intent.to_string(),
            snippet: snippet.to_string(),
            rewritten_intent: None,
        }
    }

    /// The curated intent when present, the raw one otherwise.
    pub fn best_intent(&self) -> &str {
        self.rewritten_intent.as_deref().unwrap_or(&self.intent)
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawExample>, PipelineError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: RawExample = serde_json::from_str(&line).map_err(|e| PipelineError::Json {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<(), PipelineError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut file, ex).map_err(|e| PipelineError::Json {
            line: 0,
            detail: e.to_string(),
        })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// A pair ready for the model: id-encoded, with teacher-forcing targets and
/// the per-position copy ids the pointer head scatters into.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    /// Position in the source file; must match the id the pair was stored
    /// under when the database was built, so self-matches can be excluded.
    pub source_id: u64,
    /// Intent token ids (NL vocabulary).
    pub x: Vec<u32>,
    /// Decoder input: BOS followed by the code ids.
    pub y_in: Vec<u32>,
    /// Per-position next tokens: code ids followed by EOS.
    pub targets: Vec<usize>,
    /// Code-vocabulary id each intent position copies into.
    pub copy: Vec<u32>,
    /// Intent tokens as text.
    pub intent_tokens: Vec<String>,
    /// Code tokens as text; evaluation references.
    pub code_tokens: Vec<String>,
    /// Placeholder substitutions for mapping generated code back to surface
    /// form. Empty when normalization was off.
    pub map: SubstitutionMap,
}

pub struct Prepared {
    pub examples: Vec<PreparedExample>,
    /// Pairs dropped because they failed to lex/normalize, came out empty,
    /// or exceeded the length bounds.
    pub skipped: usize,
}

/// Tokenizes and encodes a dataset with the database's vocabularies.
/// `normalize` must match the flag the database was built with.
pub fn prepare(
    raw: &[RawExample],
    normalizer: &Normalizer,
    code_vocab: &Vocab,
    nl_vocab: &Vocab,
    normalize: bool,
    max_code_len: usize,
    max_nl_len: usize,
) -> Prepared {
    let mut examples = Vec::with_capacity(raw.len());
    let mut skipped = 0usize;
    for (i, ex) in raw.iter().enumerate() {
        let (intent_tokens, code_tokens, map) = if normalize {
            match normalizer.normalize_pair(ex.best_intent(), &ex.snippet) {
                Ok(pair) => (tokenize_intent(&pair.intent), pair.code.surfaces(), pair.map),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            }
        } else {
            match lex_code(&ex.snippet) {
                Ok(lexed) => (
                    tokenize_intent(ex.best_intent()),
                    lexed.surfaces(),
                    SubstitutionMap::default(),
                ),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            }
        };
        if intent_tokens.is_empty()
            || code_tokens.is_empty()
            || intent_tokens.len() > max_nl_len
            || code_tokens.len() + 1 > max_code_len
        {
            skipped += 1;
            continue;
        }
        let x = nl_vocab.encode(&intent_tokens);
        let code_ids = code_vocab.encode(&code_tokens);
        let mut y_in = Vec::with_capacity(code_ids.len() + 1);
        y_in.push(BOS);
        y_in.extend_from_slice(&code_ids);
        let mut targets: Vec<usize> = code_ids.iter().map(|&id| id as usize).collect();
        targets.push(EOS as usize);
        let copy = intent_tokens
            .iter()
            .map(|t| code_vocab.id_or_unk(t))
            .collect();
        examples.push(PreparedExample {
            source_id: i as u64,
            x,
            y_in,
            targets,
            copy,
            intent_tokens,
            code_tokens,
            map,
        });
    }
    Prepared { examples, skipped }
}

/// An intent encoded for generation, when there is no paired code yet.
#[derive(Debug, Clone)]
pub struct IntentInput {
    pub x: Vec<u32>,
    pub copy: Vec<u32>,
    /// Placeholder substitutions for mapping generated code back to surface
    /// form. Empty when normalization was off.
    pub map: SubstitutionMap,
}

/// Tokenizes and encodes a bare intent the way `prepare` treats paired ones.
/// With `normalize` the entities become placeholders; list-typed entities
/// cannot be told apart from plain variables without code, so they encode as
/// variables.
pub fn prepare_intent(
    intent: &str,
    normalizer: &Normalizer,
    code_vocab: &Vocab,
    nl_vocab: &Vocab,
    normalize: bool,
    max_nl_len: usize,
) -> Result<IntentInput, PipelineError> {
    let (text, map) = if normalize {
        let ni = normalizer.normalize_intent(intent);
        (ni.text, ni.map)
    } else {
        (intent.to_string(), SubstitutionMap::default())
    };
    let tokens = tokenize_intent(&text);
    if tokens.is_empty() {
        return Err(PipelineError::Empty { what: "intent" });
    }
    if tokens.len() > max_nl_len {
        return Err(PipelineError::Model(crate::model::ModelError::TooLong {
            what: "intent",
            len: tokens.len(),
            max: max_nl_len,
        }));
    }
    let x = nl_vocab.encode(&tokens);
    let copy = tokens.iter().map(|t| code_vocab.id_or_unk(t)).collect();
    Ok(IntentInput { x, copy, map })
}

/// Maps placeholders back to their originals where the map knows them and
/// keeps every other surface as-is, so a stray placeholder degrades the
/// output instead of failing it. Quoted placeholders keep their quotes.
pub fn restore_surfaces(surfaces: &[String], map: &SubstitutionMap) -> Vec<String> {
    use crate::normalizer::parse_placeholder;
    surfaces
        .iter()
        .map(|s| {
            if parse_placeholder(s).is_some() {
                if let Some(orig) = map.get(s) {
                    return orig.to_string();
                }
            }
            if s.len() >= 2 {
                let q = s.as_bytes()[0] as char;
                if (q == '\'' || q == '"') && s.ends_with(q) {
                    let inner = &s[1..s.len() - 1];
                    if parse_placeholder(inner).is_some() {
                        if let Some(orig) = map.get(inner) {
                            return format!("{q}{orig}{q}");
                        }
                    }
                }
            }
            s.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::UNK;

    fn vocab_over(pairs: &[(&str, &str)], normalize: bool) -> (Vocab, Vocab) {
        let norm = Normalizer::new();
        let mut code_vocab = Vocab::new();
        let mut nl_vocab = Vocab::new();
        for (intent, code) in pairs {
            let (it, ct) = if normalize {
                let p = norm.normalize_pair(intent, code).unwrap();
                (tokenize_intent(&p.intent), p.code.surfaces())
            } else {
                (tokenize_intent(intent), lex_code(code).unwrap().surfaces())
            };
            for t in it {
                nl_vocab.add(&t);
            }
            for t in ct {
                code_vocab.add(&t);
            }
        }
        (code_vocab, nl_vocab)
    }

    #[test]
    fn jsonl_round_trips_and_ignores_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"intent": "sum a list", "snippet": "sum(xs)", "question_id": 123}"#,
                "\n\n",
                r#"{"intent": "noop", "snippet": "pass", "rewritten_intent": "do nothing"}"#,
                "\n",
            ),
        )
        .unwrap();
        let read = read_jsonl(&path).unwrap();
        assert_eq!(read.len(), 2);
        assert_eq!(read[0].best_intent(), "sum a list");
        assert_eq!(read[1].best_intent(), "do nothing");

        let out = dir.path().join("out.jsonl");
        write_jsonl(&out, &read).unwrap();
        assert_eq!(read_jsonl(&out).unwrap(), read);
    }

    #[test]
    fn bad_json_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"intent\": \"x\", \"snippet\": \"y\"}\nnot json\n").unwrap();
        match read_jsonl(&path) {
            Err(PipelineError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected json error, got {other:?}"),
        }
    }

    #[test]
    fn prepare_builds_shifted_targets_and_copy_ids() {
        let pairs = [("join the strings in `parts` with '-'", "'-'.join(parts)")];
        let (code_vocab, nl_vocab) = vocab_over(&pairs, true);
        let raw = [RawExample::new(pairs[0].0, pairs[0].1)];
        let p = prepare(&raw, &Normalizer::new(), &code_vocab, &nl_vocab, true, 64, 32);
        assert_eq!(p.skipped, 0);
        let ex = &p.examples[0];
        assert_eq!(ex.source_id, 0);
        assert_eq!(ex.y_in[0], BOS);
        assert_eq!(ex.y_in.len(), ex.targets.len());
        assert_eq!(*ex.targets.last().unwrap(), EOS as usize);
        // teacher forcing: input at t+1 is the target of row t
        for t in 0..ex.targets.len() - 1 {
            assert_eq!(ex.y_in[t + 1] as usize, ex.targets[t]);
        }
        // the placeholder tokens shared by intent and code copy onto
        // themselves; intent-only words copy onto UNK
        assert_eq!(ex.copy.len(), ex.x.len());
        for (tok, &cid) in ex.intent_tokens.iter().zip(&ex.copy) {
            if ex.code_tokens.iter().any(|c| c == tok) {
                assert_ne!(cid, UNK, "shared token {tok} must map into the code vocab");
            }
        }
        assert!(ex.code_tokens.iter().any(|t| t == "var0"));
    }

    #[test]
    fn prepare_skips_unlexable_and_overlong_pairs() {
        let raw = [
            RawExample::new("broken", "x = 'unterminated"),
            RawExample::new("fine", "len(xs)"),
            RawExample::new("long", "x = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]"),
        ];
        let (code_vocab, nl_vocab) = vocab_over(&[("fine", "len(xs)")], false);
        let p = prepare(&raw, &Normalizer::new(), &code_vocab, &nl_vocab, false, 8, 32);
        assert_eq!(p.skipped, 2);
        assert_eq!(p.examples.len(), 1);
        // source id keeps the raw file position, not the surviving index
        assert_eq!(p.examples[0].source_id, 1);
    }

    #[test]
    fn bare_intents_encode_like_paired_ones() {
        let pairs = [("join the strings in `parts` with '-'", "'-'.join(parts)")];
        let (code_vocab, nl_vocab) = vocab_over(&pairs, true);
        let norm = Normalizer::new();
        let paired = prepare(
            &[RawExample::new(pairs[0].0, pairs[0].1)],
            &norm,
            &code_vocab,
            &nl_vocab,
            true,
            64,
            32,
        );
        let bare =
            prepare_intent(pairs[0].0, &norm, &code_vocab, &nl_vocab, true, 32).unwrap();
        let ex = &paired.examples[0];
        assert_eq!(bare.x, ex.x);
        assert_eq!(bare.copy, ex.copy);
        assert_eq!(bare.map.get("var0"), Some("parts"));
    }

    #[test]
    fn bare_intent_rejects_empty_and_overlong_input() {
        let (code_vocab, nl_vocab) = vocab_over(&[("a", "b")], false);
        let norm = Normalizer::new();
        assert!(matches!(
            prepare_intent("", &norm, &code_vocab, &nl_vocab, false, 32),
            Err(PipelineError::Empty { .. })
        ));
        assert!(matches!(
            prepare_intent("far too many words here", &norm, &code_vocab, &nl_vocab, false, 2),
            Err(PipelineError::Model(_))
        ));
    }

    #[test]
    fn restore_maps_known_placeholders_and_keeps_strays() {
        let norm = Normalizer::new();
        let ni = norm.normalize_intent("join `parts` with 'sep'");
        let surfaces: Vec<String> = ["'str0'", ".", "join", "(", "var0", ",", "str3", ")"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let out = restore_surfaces(&surfaces, &ni.map);
        assert_eq!(out[0], "'sep'");
        assert_eq!(out[4], "parts");
        // str3 was never introduced by the intent: kept verbatim
        assert_eq!(out[6], "str3");
    }
}
