//! Captioning (BLEU, CIDEr), grounding (F1_ALL, F1_LOC, GRD., ATT.) and
//! hallucination (CHAIR_i, CHAIR_s, RECALL_o) metrics.
//!
//! Zero-denominator convention: every ratio whose denominator is zero is 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::bbox::{iou, BBox};

/// Regions count as matching a ground-truth box above this IoU (strictly).
pub const IOU_THRESHOLD: f64 = 0.5;

/// CIDEr n-gram orders and scale.
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("BLEU order must be at least 1")]
    InvalidOrder,
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus<C, R>(candidates: &[C], references: &[R]) -> Result<(), MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus-level BLEU with clipped n-gram precision up to order `n`, uniform
/// weights and the standard brevity penalty (closest reference length).
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    check_corpus(candidates, references)?;
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for k in 1..=n {
            let cand_counts = ngram_counts(cand, k);
            let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand_counts {
                matched[k - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if cand_len == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub corpus: f64,
    pub per_clip: Vec<f64>,
}

/// CIDEr: TF-IDF weighted n-gram cosine similarity for n = 1..4, averaged
/// over references and orders, scaled by 10. Document frequencies are
/// counted over the reference sets of the corpus.
pub fn cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<CiderScores, MetricError> {
    check_corpus(candidates, references)?;
    let n_docs = candidates.len() as f64;
    let mut per_clip = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
        for refs in references {
            let seen: BTreeSet<Ngram<'_>> = refs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            if refs.is_empty() {
                continue;
            }
            let vc = tf_idf(ngram_counts(cand, n), &df, n_docs);
            let nc = vc.values().map(|x| x * x).sum::<f64>().sqrt();
            let mut sim = 0.0;
            for r in refs {
                let vr = tf_idf(ngram_counts(r, n), &df, n_docs);
                let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    let d: f64 = vc
                        .iter()
                        .filter_map(|(g, x)| vr.get(g).map(|y| x * y))
                        .sum();
                    sim += d / (nc * nr);
                }
            }
            per_clip[i] += sim / refs.len() as f64;
        }
    }
    for s in &mut per_clip {
        *s *= CIDER_SCALE / CIDER_MAX_N as f64;
    }
    let corpus = per_clip.iter().sum::<f64>() / per_clip.len() as f64;
    Ok(CiderScores { corpus, per_clip })
}

fn tf_idf<'a>(
    counts: BTreeMap<Ngram<'a>, usize>,
    df: &BTreeMap<Ngram<'_>, usize>,
    n_docs: f64,
) -> BTreeMap<Ngram<'a>, f64> {
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (n_docs.ln() - d.ln()))
        })
        .collect()
}

/// A region identified by its box and the frame it was proposed on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub frame: usize,
}

impl FrameBox {
    /// Same frame and IoU strictly above `threshold`.
    pub fn matches(&self, other: &FrameBox, threshold: f64) -> bool {
        self.frame == other.frame && iou(&self.bbox, &other.bbox) > threshold
    }
}

/// An object word in a generated sentence and the region it was localized to.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedObject {
    pub class: usize,
    pub region: Option<FrameBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthObject {
    pub class: usize,
    pub region: FrameBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub f1_all: f64,
    pub f1_loc: f64,
    /// Object words generated.
    pub a: usize,
    /// Of those, object words present in the clip's ground truth.
    pub b: usize,
    /// Of those, words localized with IoU above the threshold.
    pub c: usize,
}

impl GroundingCounts {
    pub fn from_counts(a: usize, b: usize, c: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            f1_all: ratio(c, a),
            f1_loc: ratio(c, b),
            a,
            b,
            c,
        }
    }
}

/// `F1_ALL = C/A`, `F1_LOC = C/B` over generated object words.
pub fn grounding_f1(
    predictions: &[Vec<PredictedObject>],
    ground_truth: &[Vec<GroundTruthObject>],
    threshold: f64,
) -> GroundingCounts {
    let (mut a, mut b, mut c) = (0, 0, 0);
    for (preds, gts) in predictions.iter().zip(ground_truth) {
        for p in preds {
            a += 1;
            let same_class: Vec<&GroundTruthObject> =
                gts.iter().filter(|g| g.class == p.class).collect();
            if same_class.is_empty() {
                continue;
            }
            b += 1;
            if let Some(r) = &p.region {
                if same_class.iter().any(|g| r.matches(&g.region, threshold)) {
                    c += 1;
                }
            }
        }
    }
    GroundingCounts::from_counts(a, b, c)
}

/// Attention and localization at one annotated object word.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedStep {
    /// Region attention `a^r` at the word's decoding step.
    pub attention: Vec<f64>,
    /// Region chosen by localization.
    pub localized: usize,
    pub regions: Vec<FrameBox>,
    pub ground_truth: FrameBox,
}

/// `GRD.`: fraction of annotated words whose localized region matches the
/// ground truth. `ATT.`: mean attention mass on matching regions.
pub fn grd_att(steps: &[AnnotatedStep], threshold: f64) -> (f64, f64) {
    if steps.is_empty() {
        return (0.0, 0.0);
    }
    let mut grd = 0.0;
    let mut att = 0.0;
    for s in steps {
        if s.regions[s.localized].matches(&s.ground_truth, threshold) {
            grd += 1.0;
        }
        att += s
            .regions
            .iter()
            .zip(&s.attention)
            .filter(|(r, _)| r.matches(&s.ground_truth, threshold))
            .map(|(_, a)| a)
            .sum::<f64>();
    }
    let n = steps.len() as f64;
    (grd / n, att / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_i: f64,
    pub chair_s: f64,
    pub recall_o: f64,
}

/// Hallucination rates of mentioned objects against per-clip ground-truth
/// object sets.
pub fn chair<T: Ord>(mentions: &[Vec<T>], ground_truth: &[BTreeSet<T>]) -> ChairScores {
    let mut instances = 0usize;
    let mut hallucinated = 0usize;
    let mut bad_sentences = 0usize;
    let mut gt_total = 0usize;
    let mut gt_hit = 0usize;
    for (m, gt) in mentions.iter().zip(ground_truth) {
        let h = m.iter().filter(|o| !gt.contains(o)).count();
        instances += m.len();
        hallucinated += h;
        if h > 0 {
            bad_sentences += 1;
        }
        gt_total += gt.len();
        gt_hit += gt.iter().filter(|g| m.contains(g)).count();
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    ChairScores {
        chair_i: ratio(hallucinated, instances),
        chair_s: ratio(bad_sentences, mentions.len()),
        recall_o: ratio(gt_hit, gt_total),
    }
}

/// How the grounding traces behind a report were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMode {
    pub teacher_forced: bool,
    pub restrict_gt_frame: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub mode: ReportMode,
    pub clips: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub f1_all: f64,
    pub f1_loc: f64,
    pub grd: f64,
    pub att: f64,
    pub chair_i: f64,
    pub chair_s: f64,
    pub recall_o: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub count_c: usize,
}

impl MetricReport {
    /// Two plain-text tables: captioning plus grounding, then hallucination.
    /// Rates are printed as percentages, CHAIR scores as fractions.
    pub fn to_table(&self, method: &str) -> String {
        let mut s = String::new();
        let w = method.len().max(6);
        let _ = writeln!(
            s,
            "{:<w$} | {:>7} {:>7} {:>7} | {:>6} {:>6} {:>7} {:>7}",
            "Method", "BLEU@1", "BLEU@4", "CIDEr", "GRD.", "ATT.", "F1_ALL", "F1_LOC"
        );
        let _ = writeln!(
            s,
            "{:<w$} | {:>7.2} {:>7.2} {:>7.2} | {:>6.1} {:>6.1} {:>7.2} {:>7.2}",
            method,
            100.0 * self.bleu1,
            100.0 * self.bleu4,
            100.0 * self.cider,
            100.0 * self.grd,
            100.0 * self.att,
            100.0 * self.f1_all,
            100.0 * self.f1_loc
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<w$} | {:>7} {:>7} {:>8}", "Method", "CHAIR_i", "CHAIR_s", "RECALL_o");
        let _ = writeln!(
            s,
            "{:<w$} | {:>7.3} {:>7.3} {:>8.3}",
            method, self.chair_i, self.chair_s, self.recall_o
        );
        let _ = writeln!(
            s,
            "\nmode: teacher_forced={} restrict_gt_frame={} clips={} A={} B={} C={}",
            self.mode.teacher_forced,
            self.mode.restrict_gt_frame,
            self.clips,
            self.count_a,
            self.count_b,
            self.count_c
        );
        s
    }
}
