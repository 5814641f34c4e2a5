//! r(C): how much of the test set's code already sits in the database.

use super::PipelineError;
use crate::datastore::{chunk_sequence, Database};
use std::collections::HashSet;

/// Fraction of length-m test chunks whose token ids appear verbatim as the
/// `N` half of some database entry. Test codes must be tokenized with the
/// database's code vocabulary; chunks are padded the same way entries were.
pub fn r_overlap(db: &Database, test_codes: &[Vec<u32>]) -> Result<f64, PipelineError> {
    if test_codes.is_empty() {
        return Err(PipelineError::Empty { what: "test set" });
    }
    let stored: HashSet<&[u32]> = db.records().iter().map(|r| r.n.as_slice()).collect();
    let mut total = 0usize;
    let mut hits = 0usize;
    for code in test_codes {
        if code.is_empty() {
            continue;
        }
        for (n, _f) in chunk_sequence(code, db.m())? {
            total += 1;
            if stored.contains(n.as_slice()) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(PipelineError::Empty { what: "test chunks" });
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::DbBuilder;

    fn snippet(i: usize) -> String {
        // normalization renames identifiers positionally, so distinctness
        // must come from protected attribute names and numeric literals;
        // every 4-token window of this shape contains one of them
        format!("beta{i}.method{i}({i}, gamma{i}) + delta{i}[{i}] * {i}")
    }

    fn build_db(codes: &[String], m: usize) -> Database {
        let emb = crate::embedder::FrozenEmbedder::new("ovtest", 16);
        let mut b = DbBuilder::classic(m, emb, true);
        for (i, c) in codes.iter().enumerate() {
            assert!(b.add_snippet(i as u64, c));
        }
        b.finish().0
    }

    fn encode(db: &Database, code: &str) -> Vec<u32> {
        let norm = crate::normalizer::Normalizer::new();
        let s = norm.normalize_snippet(code).unwrap();
        db.code_vocab().encode(&s.surfaces())
    }

    #[test]
    fn fully_inserted_test_set_scores_one() {
        let codes: Vec<String> = (0..6).map(snippet).collect();
        let db = build_db(&codes, 4);
        let test: Vec<Vec<u32>> = codes.iter().map(|c| encode(&db, c)).collect();
        assert_eq!(r_overlap(&db, &test).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_test_set_scores_zero() {
        let codes: Vec<String> = (0..6).map(snippet).collect();
        let db = build_db(&codes, 4);
        let other: Vec<String> = (50..56).map(snippet).collect();
        // same-shape snippets normalize to the same skeleton except the
        // numeric literals, which differ — so no chunk matches
        let test: Vec<Vec<u32>> = other.iter().map(|c| encode(&db, c)).collect();
        assert_eq!(r_overlap(&db, &test).unwrap(), 0.0);
    }

    #[test]
    fn quarter_construction_scores_exactly_a_quarter() {
        // 3 pool snippets the db holds, plus filler codes it does not; each
        // snippet contributes the same number of chunks, and the test set is
        // built so exactly a quarter of its chunks come from the pool
        let pool: Vec<String> = (0..3).map(snippet).collect();
        let db = build_db(&pool, 4);
        let n_chunks = chunk_sequence(&encode(&db, &pool[0]), 4).unwrap().len();
        assert!(n_chunks >= 2);

        let mut test = Vec::new();
        test.push(encode(&db, &pool[0]));
        for i in 0..3 {
            test.push(encode(&db, &snippet(60 + i)));
        }
        let r = r_overlap(&db, &test).unwrap();
        assert!(
            (r - 0.25).abs() < 1e-12,
            "constructed overlap must be exactly 0.25, got {r}"
        );
    }

    #[test]
    fn empty_inputs_error() {
        let db = build_db(&[snippet(0)], 4);
        assert!(matches!(
            r_overlap(&db, &[]),
            Err(PipelineError::Empty { .. })
        ));
    }
}
