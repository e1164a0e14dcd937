//! Generation traces and evaluation of a model against a split.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::{Clip, VideoSample, Vocab};
use crate::decoder::{DecodeMode, GateOverride, Generated};
use crate::graph_encoder::PooledGraphRepr;
use crate::grounding::localize;
use crate::metrics::{
    bleu, chair, cider, grd_att, grounding_f1, AnnotatedStep, FrameBox, GroundTruthObject, MetricError,
    MetricReport, PredictedObject, ReportMode, IOU_THRESHOLD,
};
use crate::model::{Model, RefinedSource};
use crate::params::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizedRegion {
    pub token_index: usize,
    pub region_index: usize,
    pub frame_index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Per-clip generation trace. Selection vectors have one entry per decoding
/// step, the end-token step included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipTrace {
    pub clip_id: String,
    pub tokens: Vec<String>,
    pub s_r: Vec<f64>,
    pub s_sg: Vec<f64>,
    pub a_r: Vec<Vec<f64>>,
    pub a_sg: Vec<Vec<f64>>,
    pub localized_regions: Vec<LocalizedRegion>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    pub mode: DecodeMode,
    pub source: RefinedSource,
    pub gate: GateOverride,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            source: RefinedSource::Visual,
            gate: GateOverride::None,
        }
    }
}

fn trace_of(model: &Model, g: &mut Graph, vocab: &Vocab, clip: &Clip, regions: crate::autodiff::Var, gen: &Generated) -> ClipTrace {
    let all = vec![true; clip.regions.len()];
    let mut localized_regions = Vec::new();
    for (t, &w) in gen.tokens.iter().enumerate() {
        let Some(class) = vocab.object_class(w) else { continue };
        let p_s = model.grounding.region_class_scores(g, regions, gen.outputs[t].selection.a_r);
        let column: Vec<f64> = {
            let v = g.tape.value(p_s);
            (0..v.rows()).map(|r| v.get(r, class)).collect()
        };
        if let Some(r) = localize(&column, &all) {
            localized_regions.push(LocalizedRegion {
                token_index: t,
                region_index: r,
                frame_index: clip.regions[r].frame,
                bbox: clip.regions[r].bbox,
            });
        }
    }
    ClipTrace {
        clip_id: clip.id.clone(),
        tokens: vocab.decode(&gen.tokens),
        s_r: gen.steps.iter().map(|s| s.s_r).collect(),
        s_sg: gen.steps.iter().map(|s| s.s_sg).collect(),
        a_r: gen.steps.iter().map(|s| s.a_r.clone()).collect(),
        a_sg: gen.steps.iter().map(|s| s.a_sg.clone()).collect(),
        localized_regions,
    }
}

/// Generates every clip of a video in order, carrying the context state.
pub fn generate_video(model: &Model, vocab: &Vocab, video: &VideoSample, opts: &GenerateOptions) -> Vec<ClipTrace> {
    let mut g = Graph::new(&model.store);
    let dec = &model.decoder;
    let mut ctx = dec.zero_context(&mut g);
    let mut prev_h2 = None;
    let mut out = Vec::with_capacity(video.clips.len());
    for clip in &video.clips {
        let (refined, _) = model.refined(&mut g, clip, opts.source);
        let inputs = dec.prepare(&mut g, clip, refined);
        let start = dec.sentence_start(&mut g, prev_h2, &mut ctx, &refined);
        let gen = dec.generate(&mut g, &inputs, start, opts.mode, dec.dims.max_len, opts.gate);
        out.push(trace_of(model, &mut g, vocab, clip, inputs.regions, &gen));
        prev_h2 = Some(gen.last_h2);
    }
    out
}

/// Generates one clip as the first sentence of a video, with an explicit
/// graph representation `(u_obj, u_att, u_rel)`.
pub fn generate_clip(
    model: &Model,
    vocab: &Vocab,
    clip: &Clip,
    refined: &[Vec<f64>; 3],
    mode: DecodeMode,
    gate: GateOverride,
) -> ClipTrace {
    let mut g = Graph::new(&model.store);
    let dec = &model.decoder;
    let refined = PooledGraphRepr::constant(&mut g, refined);
    let inputs = dec.prepare(&mut g, clip, refined);
    let start = dec.zero_state(&mut g);
    let gen = dec.generate(&mut g, &inputs, start, mode, dec.dims.max_len, gate);
    trace_of(model, &mut g, vocab, clip, inputs.regions, &gen)
}

/// Refined representation values of a clip.
pub fn refined_values(model: &Model, clip: &Clip, source: RefinedSource) -> [Vec<f64>; 3] {
    let mut g = Graph::new(&model.store);
    let (r, _) = model.refined(&mut g, clip, source);
    r.values(&g.tape)
}

/// Held-out `L(M)` averaged over clips.
pub fn mean_mapping_loss(model: &Model, videos: &[VideoSample]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for clip in videos.iter().flat_map(|v| &v.clips) {
        let mut g = Graph::new(&model.store);
        let (_, lm) = model.refined(&mut g, clip, RefinedSource::Visual);
        total += g.tape.scalar(lm.expect("visual source yields a mapping loss"));
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Teacher-forced statistics over a split.
#[derive(Clone, Debug, Default)]
pub struct TeacherForced {
    pub correct: usize,
    pub total: usize,
    pub steps: Vec<AnnotatedStep>,
}

impl TeacherForced {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn candidate_mask(clip: &Clip, frame: Option<usize>) -> Vec<bool> {
    clip.regions.iter().map(|r| frame.is_none_or(|f| r.frame == f)).collect()
}

fn region_boxes(clip: &Clip) -> Vec<FrameBox> {
    clip.regions.iter().map(|r| r.frame_box()).collect()
}

pub fn teacher_forced(model: &Model, videos: &[VideoSample], source: RefinedSource, restrict_gt_frame: bool) -> TeacherForced {
    let mut stats = TeacherForced::default();
    let dec = &model.decoder;
    for video in videos {
        let mut g = Graph::new(&model.store);
        let mut ctx = dec.zero_context(&mut g);
        let mut prev_h2 = None;
        for clip in &video.clips {
            let (refined, _) = model.refined(&mut g, clip, source);
            let inputs = dec.prepare(&mut g, clip, refined);
            let start = dec.sentence_start(&mut g, prev_h2, &mut ctx, &refined);
            let out = dec.teacher_forced(&mut g, &inputs, start, &clip.sentence, GateOverride::None);
            stats.correct += out.correct;
            stats.total += out.total;
            for ann in &clip.annotations {
                let a_r = out.steps[ann.position].selection.a_r;
                let p_s = model.grounding.region_class_scores(&mut g, inputs.regions, a_r);
                let v = g.tape.value(p_s);
                let column: Vec<f64> = (0..v.rows()).map(|r| v.get(r, ann.class)).collect();
                let mask = candidate_mask(clip, restrict_gt_frame.then_some(ann.frame));
                let localized = localize(&column, &mask).unwrap_or(0);
                stats.steps.push(AnnotatedStep {
                    attention: g.tape.value(a_r).as_slice().to_vec(),
                    localized,
                    regions: region_boxes(clip),
                    ground_truth: ann.frame_box(),
                });
            }
            prev_h2 = Some(out.last_h2);
        }
    }
    stats
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: DecodeMode,
    pub source: RefinedSource,
    pub teacher_forced: bool,
    pub restrict_gt_frame: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            source: RefinedSource::Visual,
            teacher_forced: true,
            restrict_gt_frame: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub traces: Vec<ClipTrace>,
    /// Teacher-forced next-token accuracy, end token included.
    pub token_accuracy: f64,
    /// Fraction of clips whose generated sentence equals the reference.
    pub exact_match: f64,
}

/// Object label names mentioned in a token sequence.
pub fn mentioned_objects(vocab: &Vocab, tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|t| vocab.object_class(vocab.word_id(t)))
        .map(|c| vocab.labels.objects[c].clone())
        .collect()
}

/// Generates the split, then computes every metric. Hallucination ground
/// truth defaults to the objects of each clip's language graph.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    videos: &[VideoSample],
    opts: &EvalOptions,
    hallucination_gt: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<Evaluation, MetricError> {
    let gen_opts = GenerateOptions {
        mode: opts.mode,
        source: opts.source,
        gate: GateOverride::None,
    };
    let traces: Vec<ClipTrace> = videos
        .iter()
        .flat_map(|v| generate_video(model, vocab, v, &gen_opts))
        .collect();
    let clips: Vec<&Clip> = videos.iter().flat_map(|v| &v.clips).collect();

    let candidates: Vec<Vec<String>> = traces.iter().map(|t| t.tokens.clone()).collect();
    let references: Vec<Vec<Vec<String>>> = clips.iter().map(|c| vec![vocab.decode(&c.sentence)]).collect();
    let bleu1 = bleu(&candidates, &references, 1)?;
    let bleu4 = bleu(&candidates, &references, 4)?;
    let cider_scores = cider(&candidates, &references)?;
    let exact = candidates.iter().zip(&references).filter(|(c, r)| *c == &r[0]).count();

    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut gen_steps = Vec::new();
    for (trace, clip) in traces.iter().zip(&clips) {
        let by_token: BTreeMap<usize, &LocalizedRegion> =
            trace.localized_regions.iter().map(|l| (l.token_index, l)).collect();
        let mut preds = Vec::new();
        for (t, tok) in trace.tokens.iter().enumerate() {
            if let Some(class) = vocab.object_class(vocab.word_id(tok)) {
                preds.push(PredictedObject {
                    class,
                    region: by_token.get(&t).map(|l| FrameBox {
                        bbox: l.bbox,
                        frame: l.frame_index,
                    }),
                });
                if !opts.teacher_forced {
                    if let Some(ann) = clip.annotations.iter().find(|a| a.class == class) {
                        let mask = candidate_mask(clip, opts.restrict_gt_frame.then_some(ann.frame));
                        let localized = if opts.restrict_gt_frame {
                            // re-localize within the annotated frame
                            let mut g = Graph::new(&model.store);
                            let r = model.decoder.augment_regions(&mut g, &clip.regions);
                            let a = g.tape.constant_vector(&trace.a_r[t]);
                            let p_s = model.grounding.region_class_scores(&mut g, r, a);
                            let v = g.tape.value(p_s);
                            let column: Vec<f64> = (0..v.rows()).map(|i| v.get(i, class)).collect();
                            localize(&column, &mask).unwrap_or(0)
                        } else {
                            by_token.get(&t).map_or(0, |l| l.region_index)
                        };
                        gen_steps.push(AnnotatedStep {
                            attention: trace.a_r[t].clone(),
                            localized,
                            regions: region_boxes(clip),
                            ground_truth: ann.frame_box(),
                        });
                    }
                }
            }
        }
        predictions.push(preds);
        truths.push(
            clip.annotations
                .iter()
                .map(|a| GroundTruthObject {
                    class: a.class,
                    region: a.frame_box(),
                })
                .collect::<Vec<_>>(),
        );
    }
    let counts = grounding_f1(&predictions, &truths, IOU_THRESHOLD);

    let tf = teacher_forced(model, videos, opts.source, opts.restrict_gt_frame);
    let (grd, att) = if opts.teacher_forced {
        grd_att(&tf.steps, IOU_THRESHOLD)
    } else {
        grd_att(&gen_steps, IOU_THRESHOLD)
    };

    let canonical = |name: &str| -> String {
        vocab.synonyms.get(name).cloned().unwrap_or_else(|| name.to_string())
    };
    let mentions: Vec<Vec<String>> = traces.iter().map(|t| mentioned_objects(vocab, &t.tokens)).collect();
    let gt_sets: Vec<BTreeSet<String>> = clips
        .iter()
        .map(|c| match hallucination_gt.and_then(|m| m.get(&c.id)) {
            Some(names) => names.iter().map(|n| canonical(n)).collect(),
            None => c
                .language_graph
                .objects
                .iter()
                .map(|o| vocab.labels.objects[o.label].clone())
                .collect(),
        })
        .collect();
    let ch = chair(&mentions, &gt_sets);

    let report = MetricReport {
        mode: ReportMode {
            teacher_forced: opts.teacher_forced,
            restrict_gt_frame: opts.restrict_gt_frame,
        },
        clips: clips.len(),
        bleu1,
        bleu4,
        cider: cider_scores.corpus,
        f1_all: counts.f1_all,
        f1_loc: counts.f1_loc,
        grd,
        att,
        chair_i: ch.chair_i,
        chair_s: ch.chair_s,
        recall_o: ch.recall_o,
        count_a: counts.a,
        count_b: counts.b,
        count_c: counts.c,
    };
    Ok(Evaluation {
        report,
        traces,
        token_accuracy: tf.accuracy(),
        exact_match: exact as f64 / clips.len().max(1) as f64,
    })
}

/// Corpus CIDEr of greedy generations against the references.
pub fn corpus_cider(model: &Model, vocab: &Vocab, videos: &[VideoSample], source: RefinedSource) -> f64 {
    let opts = GenerateOptions {
        mode: DecodeMode::Greedy,
        source,
        gate: GateOverride::None,
    };
    let candidates: Vec<Vec<String>> = videos
        .iter()
        .flat_map(|v| generate_video(model, vocab, v, &opts))
        .map(|t| t.tokens)
        .collect();
    let references: Vec<Vec<Vec<String>>> = videos
        .iter()
        .flat_map(|v| &v.clips)
        .map(|c| vec![vocab.decode(&c.sentence)])
        .collect();
    cider(&candidates, &references).map_or(0.0, |s| s.corpus)
}
