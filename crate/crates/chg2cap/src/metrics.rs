//! Corpus caption metrics: BLEU-1..4, ROUGE-L, CIDEr-D, and METEOR-x.
//!
//! Conventions follow the standard caption-evaluation tooling so scores stay
//! comparable: BLEU pools clipped modified n-gram counts over the corpus and
//! uses the closest-reference-length brevity penalty; ROUGE-L is the LCS
//! F-measure with beta = 1.2 averaged over images; CIDEr-D uses 1..4-gram
//! tf-idf cosines with reference-clipped candidate counts, a sigma = 6
//! Gaussian length penalty, and a factor of 10. METEOR-x is the simplified
//! exact-match variant: unigram alignments only, no stemming or synonymy,
//! which is why the report names it `meteor_x`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;
const CIDER_NGRAMS: usize = 4;

/// Candidate sentences and their reference sets, one entry per image.
pub type Candidates = [Vec<String>];
pub type References = [Vec<Vec<String>>];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageScores {
    pub id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor_x: f64,
}

/// Corpus-level evaluation report, the JSON payload of the `evaluate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor_x: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<PerImageScores>>,
}

fn validate(candidates: &Candidates, references: &References) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Metrics("empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Metrics(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|refs| refs.is_empty()) {
        return Err(Error::Metrics(format!("image {i} has no references")));
    }
    Ok(())
}

fn ngram_counts(words: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= k {
        for gram in words.windows(k) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Corpus BLEU-N: geometric mean of pooled clipped modified n-gram
/// precisions for orders 1..N times the brevity penalty. Any order with zero
/// total matches zeroes the score.
pub fn bleu_n(candidates: &Candidates, references: &References, n: usize) -> Result<f64> {
    if n == 0 || n > 4 {
        return Err(Error::Metrics(format!("BLEU order {n} outside 1..4")));
    }
    validate(candidates, references)?;

    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += closest_reference_length(cand.len(), refs);
        for k in 1..=n {
            let cand_counts = ngram_counts(cand, k);
            total[k - 1] += cand.len().saturating_sub(k - 1);
            for (gram, &count) in &cand_counts {
                let max_ref = refs
                    .iter()
                    .map(|r| ngram_counts(r, k).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[k - 1] += count.min(max_ref);
            }
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * precision)
}

/// Reference length closest to the candidate's; ties pick the shorter one.
fn closest_reference_length(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&len| {
            let diff = (len as i64 - cand_len as i64).abs();
            (diff, len)
        })
        .unwrap_or(0)
}

// ── ROUGE-L ─────────────────────────────────────────────────────────────

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            if r.is_empty() {
                return 0.0;
            }
            let lcs = lcs_len(cand, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let recall = lcs / r.len() as f64;
            let precision = lcs / cand.len() as f64;
            (1.0 + beta2) * recall * precision / (recall + beta2 * precision)
        })
        .fold(0.0, f64::max)
}

/// Corpus ROUGE-L: per image the best LCS F-measure over the references,
/// averaged over images.
pub fn rouge_l(candidates: &Candidates, references: &References) -> Result<f64> {
    Ok(rouge_l_detailed(candidates, references)?.0)
}

pub fn rouge_l_detailed(
    candidates: &Candidates,
    references: &References,
) -> Result<(f64, Vec<f64>)> {
    validate(candidates, references)?;
    let per_image: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_single(c, r))
        .collect();
    Ok((mean(&per_image), per_image))
}

// ── CIDEr-D ─────────────────────────────────────────────────────────────

/// Corpus CIDEr-D. The idf table treats each image's reference set as one
/// document; a single-image corpus therefore has degenerate idf. The score
/// is still computed in that case; callers decide whether to warn.
pub fn cider_d(candidates: &Candidates, references: &References) -> Result<f64> {
    Ok(cider_d_detailed(candidates, references)?.0)
}

pub fn cider_d_detailed(
    candidates: &Candidates,
    references: &References,
) -> Result<(f64, Vec<f64>)> {
    validate(candidates, references)?;
    let n_images = references.len() as f64;

    // Document frequency per order: in how many images' references does the
    // n-gram appear at least once. BTreeMaps keep every f64 reduction in
    // a canonical key order so repeated runs are bit-identical.
    let mut df: Vec<BTreeMap<Vec<String>, f64>> = vec![BTreeMap::new(); CIDER_NGRAMS];
    for refs in references {
        for k in 1..=CIDER_NGRAMS {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for reference in refs {
                for gram in reference.windows(k).filter(|g| g.len() == k) {
                    seen.insert(gram);
                }
            }
            for gram in seen {
                *df[k - 1].entry(gram.to_vec()).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |k: usize, gram: &[String]| -> f64 {
        let d = df[k - 1].get(gram).copied().unwrap_or(0.0).max(1.0);
        n_images.ln() - d.ln()
    };

    let mut per_image = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let mut order_scores = Vec::with_capacity(CIDER_NGRAMS);
        for k in 1..=CIDER_NGRAMS {
            let cand_counts = ngram_counts(cand, k);
            // Candidate counts clipped by the maximum reference count.
            let clipped: BTreeMap<&[String], f64> = cand_counts
                .iter()
                .map(|(&gram, &count)| {
                    let max_ref = refs
                        .iter()
                        .map(|r| ngram_counts(r, k).get(gram).copied().unwrap_or(0))
                        .max()
                        .unwrap_or(0);
                    (gram, count.min(max_ref) as f64)
                })
                .collect();
            let cand_vec: BTreeMap<&[String], f64> = clipped
                .iter()
                .map(|(&gram, &tf)| (gram, tf * idf(k, gram)))
                .collect();
            let cand_norm = l2(cand_vec.values());

            let mut ref_mean = 0.0;
            for reference in refs {
                let ref_vec: BTreeMap<&[String], f64> = ngram_counts(reference, k)
                    .into_iter()
                    .map(|(gram, tf)| (gram, tf as f64 * idf(k, gram)))
                    .collect();
                let ref_norm = l2(ref_vec.values());
                let mut sim = 0.0;
                if cand_norm > 0.0 && ref_norm > 0.0 {
                    for (gram, &cv) in &cand_vec {
                        if let Some(&rv) = ref_vec.get(gram) {
                            sim += cv * rv;
                        }
                    }
                    sim /= cand_norm * ref_norm;
                }
                let delta = cand.len() as f64 - reference.len() as f64;
                sim *= (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                ref_mean += sim;
            }
            order_scores.push(ref_mean / refs.len() as f64);
        }
        per_image.push(10.0 * mean(&order_scores));
    }
    Ok((mean(&per_image), per_image))
}

fn l2<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

// ── METEOR-x ────────────────────────────────────────────────────────────

/// Exact-match METEOR score of one candidate against one reference.
fn meteor_single(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // Leftmost-maximal exact alignment: each candidate word takes the first
    // unmatched identical reference position.
    let mut taken = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (ci, word) in cand.iter().enumerate() {
        if let Some(ri) = reference
            .iter()
            .enumerate()
            .position(|(ri, r)| !taken[ri] && r == word)
        {
            taken[ri] = true;
            pairs.push((ci, ri));
        }
    }
    let matches = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let precision = matches / cand.len() as f64;
    let recall = matches / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let mut chunks = 1usize;
    for window in pairs.windows(2) {
        let (c0, r0) = window[0];
        let (c1, r1) = window[1];
        if c1 != c0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / matches).powi(3);
    f_mean * (1.0 - penalty)
}

/// Corpus METEOR-x: per image the best exact-match score over references,
/// averaged over images.
pub fn meteor_x(candidates: &Candidates, references: &References) -> Result<f64> {
    Ok(meteor_x_detailed(candidates, references)?.0)
}

pub fn meteor_x_detailed(
    candidates: &Candidates,
    references: &References,
) -> Result<(f64, Vec<f64>)> {
    validate(candidates, references)?;
    let per_image: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| meteor_single(c, r))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok((mean(&per_image), per_image))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Compute the full report over a corpus. `ids` labels the per-image
/// breakdown; per-image BLEU-4 treats each image as a singleton corpus.
pub fn evaluate_corpus(
    ids: &[String],
    candidates: &Candidates,
    references: &References,
    with_per_image: bool,
) -> Result<EvalReport> {
    validate(candidates, references)?;
    let bleu = [
        bleu_n(candidates, references, 1)?,
        bleu_n(candidates, references, 2)?,
        bleu_n(candidates, references, 3)?,
        bleu_n(candidates, references, 4)?,
    ];
    let (rouge, rouge_per) = rouge_l_detailed(candidates, references)?;
    let (cider, cider_per) = cider_d_detailed(candidates, references)?;
    let (meteor, meteor_per) = meteor_x_detailed(candidates, references)?;
    let per_image = if with_per_image {
        let mut rows = Vec::with_capacity(candidates.len());
        for i in 0..candidates.len() {
            rows.push(PerImageScores {
                id: ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                bleu4: bleu_n(
                    &candidates[i..=i],
                    &references[i..=i],
                    4,
                )?,
                rouge_l: rouge_per[i],
                cider_d: cider_per[i],
                meteor_x: meteor_per[i],
            });
        }
        Some(rows)
    } else {
        None
    };
    Ok(EvalReport {
        bleu,
        rouge_l: rouge,
        cider_d: cider,
        meteor_x: meteor,
        per_image,
    })
}
