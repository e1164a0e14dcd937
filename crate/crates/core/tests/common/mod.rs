//! Brute-force metric re-implementations and random tiny instances.
//!
//! Nothing here calls into `rgl_core::metrics` internals: n-grams are
//! enumerated with index loops and counted by linear scans, and IoU is
//! computed by counting unit cells on an integer grid.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rgl_core::metrics::{
    bleu, chair, cider, grd_att, grounding_f1, AnnotatedStep, BBox, FrameBox, GroundTruthObject,
    PredictedObject, IOU_THRESHOLD,
};

pub const TOL: f64 = 1e-9;
const GRID: i64 = 6;
const WORDS: [&str; 4] = ["a", "b", "c", "d"];

fn windows(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        let mut g = Vec::new();
        for j in 0..n {
            g.push(tokens[i + j].clone());
        }
        out.push(g);
        i += 1;
    }
    out
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let cand_len: usize = cands.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return 0.0;
    }
    let mut ref_len = 0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best: Option<usize> = None;
        for r in rs {
            let better = match best {
                None => true,
                Some(b) => {
                    let (db, dr) = (b.abs_diff(c.len()), r.len().abs_diff(c.len()));
                    dr < db || (dr == db && r.len() < b)
                }
            };
            if better {
                best = Some(r.len());
            }
        }
        ref_len += best.unwrap_or(0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0, 0);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = windows(c, k);
            for g in distinct(&cg) {
                let have = occurrences(&cg, &g);
                let mut allowed = 0;
                for r in rs {
                    allowed = allowed.max(occurrences(&windows(r, k), &g));
                }
                matched += have.min(allowed);
                total += have;
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_sum / n as f64).exp()
}

/// Per-clip CIDEr and the corpus mean. Document frequency counts clips
/// whose reference set contains the n-gram, floored at 1.
pub fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> (f64, Vec<f64>) {
    let docs = cands.len() as f64;
    let mut per_clip = vec![0.0; cands.len()];
    for n in 1..=4 {
        let df = |g: &[String]| -> f64 {
            let c = refs
                .iter()
                .filter(|rs| rs.iter().any(|r| occurrences(&windows(r, n), g) > 0))
                .count();
            c.max(1) as f64
        };
        let vector = |s: &[String]| -> Vec<(Vec<String>, f64)> {
            let w = windows(s, n);
            distinct(&w)
                .into_iter()
                .map(|g| {
                    let x = occurrences(&w, &g) as f64 * (docs.ln() - df(&g).ln());
                    (g, x)
                })
                .collect()
        };
        for i in 0..cands.len() {
            let vc = vector(&cands[i]);
            let mut sim = 0.0;
            for r in &refs[i] {
                let vr = vector(r);
                let mut dot = 0.0;
                for (g, x) in &vc {
                    for (h, y) in &vr {
                        if g == h {
                            dot += x * y;
                        }
                    }
                }
                let na = vc.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
                let nb = vr.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    sim += dot / (na * nb);
                }
            }
            per_clip[i] += sim / refs[i].len() as f64;
        }
    }
    for s in &mut per_clip {
        *s *= 10.0 / 4.0;
    }
    let corpus = per_clip.iter().sum::<f64>() / per_clip.len() as f64;
    (corpus, per_clip)
}

fn cells(b: &BBox) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for x in 0..GRID {
        for y in 0..GRID {
            let (xf, yf) = (x as f64, y as f64);
            if xf >= b.x1 && xf + 1.0 <= b.x2 && yf >= b.y1 && yf + 1.0 <= b.y2 {
                out.push((x, y));
            }
        }
    }
    out
}

/// IoU of integer-grid boxes by counting covered unit cells.
pub fn cell_iou(a: &BBox, b: &BBox) -> f64 {
    let ca = cells(a);
    let cb = cells(b);
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    let union = ca.len() + cb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn hit(a: &FrameBox, b: &FrameBox) -> bool {
    a.frame == b.frame && cell_iou(&a.bbox, &b.bbox) > IOU_THRESHOLD
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// `(f1_all, f1_loc, A, B, C)`.
pub fn grounding_oracle(
    preds: &[Vec<PredictedObject>],
    gts: &[Vec<GroundTruthObject>],
) -> (f64, f64, usize, usize, usize) {
    let (mut a, mut b, mut c) = (0, 0, 0);
    for i in 0..preds.len() {
        for p in &preds[i] {
            a += 1;
            let mut class_present = false;
            let mut localized = false;
            for g in &gts[i] {
                if g.class == p.class {
                    class_present = true;
                    if let Some(r) = &p.region {
                        localized |= hit(r, &g.region);
                    }
                }
            }
            if class_present {
                b += 1;
            }
            if localized {
                c += 1;
            }
        }
    }
    (ratio(c, a), ratio(c, b), a, b, c)
}

pub fn grd_att_oracle(steps: &[AnnotatedStep]) -> (f64, f64) {
    if steps.is_empty() {
        return (0.0, 0.0);
    }
    let mut grd = 0.0;
    let mut att = 0.0;
    for s in steps {
        if hit(&s.regions[s.localized], &s.ground_truth) {
            grd += 1.0;
        }
        for i in 0..s.regions.len() {
            if hit(&s.regions[i], &s.ground_truth) {
                att += s.attention[i];
            }
        }
    }
    (grd / steps.len() as f64, att / steps.len() as f64)
}

/// `(chair_i, chair_s, recall_o)`.
pub fn chair_oracle(mentions: &[Vec<usize>], gts: &[Vec<usize>]) -> (f64, f64, f64) {
    let (mut inst, mut bad_inst, mut bad_sent, mut gt_n, mut gt_hit) = (0, 0, 0, 0, 0);
    for i in 0..mentions.len() {
        let mut any = false;
        for m in &mentions[i] {
            inst += 1;
            if !gts[i].contains(m) {
                bad_inst += 1;
                any = true;
            }
        }
        if any {
            bad_sent += 1;
        }
        let mut seen: Vec<usize> = Vec::new();
        for g in &gts[i] {
            if seen.contains(g) {
                continue;
            }
            seen.push(*g);
            gt_n += 1;
            if mentions[i].contains(g) {
                gt_hit += 1;
            }
        }
    }
    (ratio(bad_inst, inst), ratio(bad_sent, mentions.len()), ratio(gt_hit, gt_n))
}

pub fn sentence<R: Rng>(rng: &mut R, min: usize, max: usize) -> Vec<String> {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
}

pub fn corpus<R: Rng>(rng: &mut R) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let n = rng.random_range(1..=5);
    let cands = (0..n).map(|_| sentence(rng, 0, 7)).collect();
    let refs = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=3);
            (0..k).map(|_| sentence(rng, 1, 7)).collect()
        })
        .collect();
    (cands, refs)
}

pub fn grid_box<R: Rng>(rng: &mut R) -> BBox {
    let x1 = rng.random_range(0..GRID - 1);
    let y1 = rng.random_range(0..GRID - 1);
    let x2 = rng.random_range(x1 + 1..=GRID);
    let y2 = rng.random_range(y1 + 1..=GRID);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

pub fn frame_box<R: Rng>(rng: &mut R) -> FrameBox {
    FrameBox {
        bbox: grid_box(rng),
        frame: rng.random_range(0..2),
    }
}

pub fn grounding_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<PredictedObject>>, Vec<Vec<GroundTruthObject>>) {
    let n = rng.random_range(1..=4);
    let preds = (0..n)
        .map(|_| {
            (0..rng.random_range(0..=4))
                .map(|_| PredictedObject {
                    class: rng.random_range(0..4),
                    region: rng.random_bool(0.8).then(|| frame_box(rng)),
                })
                .collect()
        })
        .collect();
    let gts = (0..n)
        .map(|_| {
            (0..rng.random_range(0..=3))
                .map(|_| GroundTruthObject {
                    class: rng.random_range(0..4),
                    region: frame_box(rng),
                })
                .collect()
        })
        .collect();
    (preds, gts)
}

pub fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

pub fn annotated_steps<R: Rng>(rng: &mut R) -> Vec<AnnotatedStep> {
    (0..rng.random_range(1..=5))
        .map(|_| {
            let n = rng.random_range(1..=5);
            AnnotatedStep {
                attention: simplex(rng, n),
                localized: rng.random_range(0..n),
                regions: (0..n).map(|_| frame_box(rng)).collect(),
                ground_truth: frame_box(rng),
            }
        })
        .collect()
}

pub fn chair_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = rng.random_range(1..=5);
    let mentions = (0..n)
        .map(|_| (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..6)).collect())
        .collect();
    let gts = (0..n)
        .map(|_| (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..6)).collect())
        .collect();
    (mentions, gts)
}

fn close(what: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= TOL {
        Ok(())
    } else {
        Err(format!("{what}: implementation {got} vs oracle {want}"))
    }
}

/// Draws one instance per metric and compares against the oracles.
pub fn check_metric_instance<R: Rng>(rng: &mut R) -> Result<(), String> {
    let (cands, refs) = corpus(rng);
    for n in [1, 4] {
        let got = bleu(&cands, &refs, n).map_err(|e| e.to_string())?;
        close(&format!("BLEU@{n}"), got, bleu_oracle(&cands, &refs, n))?;
    }
    let got = cider(&cands, &refs).map_err(|e| e.to_string())?;
    let (corpus_want, per_clip_want) = cider_oracle(&cands, &refs);
    close("CIDEr", got.corpus, corpus_want)?;
    for (g, w) in got.per_clip.iter().zip(&per_clip_want) {
        close("CIDEr per clip", *g, *w)?;
    }

    let (preds, gts) = grounding_instance(rng);
    let got = grounding_f1(&preds, &gts, IOU_THRESHOLD);
    let (f1_all, f1_loc, a, b, c) = grounding_oracle(&preds, &gts);
    if (got.a, got.b, got.c) != (a, b, c) {
        return Err(format!("grounding counts {:?} vs oracle {:?}", (got.a, got.b, got.c), (a, b, c)));
    }
    close("F1_ALL", got.f1_all, f1_all)?;
    close("F1_LOC", got.f1_loc, f1_loc)?;

    let steps = annotated_steps(rng);
    let (grd, att) = grd_att(&steps, IOU_THRESHOLD);
    let (grd_want, att_want) = grd_att_oracle(&steps);
    close("GRD", grd, grd_want)?;
    close("ATT", att, att_want)?;

    let (mentions, gt_lists) = chair_instance(rng);
    let sets: Vec<BTreeSet<usize>> = gt_lists.iter().map(|g| g.iter().copied().collect()).collect();
    let got = chair(&mentions, &sets);
    let (ci, cs, ro) = chair_oracle(&mentions, &gt_lists);
    close("CHAIR_i", got.chair_i, ci)?;
    close("CHAIR_s", got.chair_s, cs)?;
    close("RECALL_o", got.recall_o, ro)?;
    Ok(())
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
