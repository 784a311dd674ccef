use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

/// Cumulative BLEU-1 to BLEU-4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bleu {
    pub b: [f64; 4],
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: clipped n-gram matches and candidate n-gram totals are summed
/// over the corpus before taking precisions; the brevity penalty uses the
/// closest reference length per candidate (shorter on ties).
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Bleu> {
    if candidates.len() != references.len() {
        return Err(Error::invalid("one reference set per candidate is required"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Empty("reference set"));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("nonempty references");
        for n in 1..=4 {
            let counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(Bleu { b: [0.0; 4] });
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut b = [0.0; 4];
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..4 {
        if matches[n] == 0 || totals[n] == 0 {
            zero = true;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        b[n] = if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() };
    }
    Ok(Bleu { b })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one() {
        let c = vec![toks("a red circle to the left of a blue star")];
        let r = vec![vec![c[0].clone()]];
        let b = corpus_bleu(&c, &r).unwrap();
        for x in b.b {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_unigrams_score_zero() {
        let b = corpus_bleu(&[toks("x y z")], &[vec![toks("a b c")]]).unwrap();
        assert_eq!(b.b, [0.0; 4]);
        let empty: Vec<Vec<&str>> = vec![vec![]];
        assert_eq!(corpus_bleu(&empty, &[vec![toks("a")]]).unwrap().b, [0.0; 4]);
        assert!(corpus_bleu(&[toks("a")], &[vec![]]).is_err());
    }

    #[test]
    fn two_sentence_hand_computation() {
        // cand 1: "the the cat sat" vs ref "the cat sat down"
        //   unigrams: the(2, clip 1) cat sat -> 3/4; bigrams: the-the 0,
        //   the-cat 1, cat-sat 1 -> 2/3; trigrams: the-cat-sat 1 of 2;
        //   4-grams: 0 of 1
        // cand 2: "a dog runs fast" vs refs "a dog runs", "the dog runs fast"
        //   unigrams 4/4; bigrams 3/3; trigrams 2/2; 4-grams 0/1
        //   ("a dog runs fast" is not in any reference)
        let c = vec![toks("the the cat sat"), toks("a dog runs fast")];
        let r = vec![
            vec![toks("the cat sat down")],
            vec![toks("a dog runs"), toks("the dog runs fast")],
        ];
        let b = corpus_bleu(&c, &r).unwrap();
        // totals: p1 = 7/8, p2 = 5/6, p3 = 3/4, p4 = 0/2; c = 8, r = 4 + 4
        let p = [7.0 / 8.0, 5.0 / 6.0, 3.0 / 4.0];
        let bp = (1.0f64 - 8.0 / 8.0).exp();
        assert!((b.b[0] - bp * p[0]).abs() < 1e-12);
        assert!((b.b[1] - bp * (p[0] * p[1]).sqrt()).abs() < 1e-12);
        assert!((b.b[2] - bp * (p[0] * p[1] * p[2]).powf(1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(b.b[3], 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = corpus_bleu(&[toks("a b")], &[vec![toks("a b c d")]]).unwrap();
        assert!((b.b[0] - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }
}
