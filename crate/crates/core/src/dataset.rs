//! Grounded-video samples: seeded synthesis, manifest I/O and batching.
//!
//! Synthetic clips are built from a sampled caption scene graph. Every
//! object class `c` has a fixed prototype `p_c`; a region of class `c` gets
//! the feature `p_c + N(0, sigma^2)` and class scores
//! `softmax(-||feature - p_k||)` over all classes. Caption objects sit on
//! one frame per clause, have one exact proposal and possibly a jittered
//! duplicate with IoU above 0.5; remaining proposals are distractors of
//! classes absent from the caption. Frame features are the mean of the
//! frame's region features plus noise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BBox};
use crate::config::{ConfigError, SynthConfig};
use crate::metrics::{FrameBox, IOU_THRESHOLD};
use crate::scene_graph::{LabelVocab, SceneGraph, SceneGraphJson, TemplateGrammar};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Sentences are cut at this many words.
pub const MAX_SENTENCE_LEN: usize = 20;

const OBJECT_NAMES: &[&str] = &[
    "man", "woman", "child", "dog", "cat", "horse", "ball", "bike", "car", "guitar", "boat", "bird",
];
const ATTRIBUTE_NAMES: &[&str] = &[
    "blue", "red", "small", "tall", "young", "old", "green", "wooden",
];
const RELATION_NAMES: &[&str] = &[
    "grab", "ride", "chase", "hold", "watch", "push", "throw", "pull",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Word vocabulary plus the three label vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pub words: Vec<String>,
    pub labels: LabelVocab,
    /// Extra surface forms mapped to object labels.
    pub synonyms: BTreeMap<String, String>,
    word_index: HashMap<String, usize>,
    word_class: Vec<Option<usize>>,
}

impl Vocab {
    pub fn new(
        words: Vec<String>,
        labels: LabelVocab,
        synonyms: BTreeMap<String, String>,
    ) -> Result<Self, DatasetError> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*s) {
                return Err(schema(
                    format!("$.vocab.words[{i}]"),
                    format!("expected reserved token {s:?}"),
                ));
            }
        }
        let mut word_index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if word_index.insert(w.clone(), i).is_some() {
                return Err(schema(format!("$.vocab.words[{i}]"), format!("duplicate word {w:?}")));
            }
        }
        for (k, v) in &synonyms {
            if labels.object_id(v).is_none() {
                return Err(schema(
                    format!("$.vocab.synonyms.{k}"),
                    format!("synonym target {v:?} is not an object label"),
                ));
            }
        }
        let word_class = words
            .iter()
            .map(|w| {
                labels
                    .object_id(w)
                    .or_else(|| synonyms.get(w).and_then(|t| labels.object_id(t)))
            })
            .collect();
        Ok(Self {
            words,
            labels,
            synonyms,
            word_index,
            word_class,
        })
    }

    /// Vocabulary for the templated grammar: reserved tokens, determiner,
    /// conjunction, then object, attribute and relation words.
    pub fn for_labels(labels: LabelVocab) -> Self {
        let mut words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        words.push(TemplateGrammar::DETERMINER.into());
        words.push(TemplateGrammar::CONJUNCTION.into());
        words.extend(labels.objects.iter().cloned());
        words.extend(labels.attributes.iter().cloned());
        words.extend(labels.relations.iter().cloned());
        Self::new(words, labels, BTreeMap::new()).expect("generated vocabulary is consistent")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of a word, or the Unknown token.
    pub fn word_id(&self, w: &str) -> usize {
        self.word_index.get(w).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    /// Object class named by a word id (exact match or synonym).
    pub fn object_class(&self, word_id: usize) -> Option<usize> {
        self.word_class.get(word_id).copied().flatten()
    }

    pub fn n_objects(&self) -> usize {
        self.labels.objects.len()
    }

    pub fn grammar(&self) -> TemplateGrammar {
        TemplateGrammar::new(self.labels.clone())
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.word(i).to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub feature: Vec<f64>,
    pub bbox: BBox,
    pub frame: usize,
    pub class_scores: Vec<f64>,
}

impl Region {
    pub fn frame_box(&self) -> FrameBox {
        FrameBox {
            bbox: self.bbox,
            frame: self.frame,
        }
    }
}

/// Ground-truth grounding of one object word.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    /// Index of the object word in the sentence.
    pub position: usize,
    pub class: usize,
    pub frame: usize,
    pub bbox: BBox,
    /// `gamma[i]` is true iff region `i` lies on `frame` with IoU above 0.5.
    pub gamma: Vec<bool>,
}

impl ObjectAnnotation {
    pub fn frame_box(&self) -> FrameBox {
        FrameBox {
            bbox: self.bbox,
            frame: self.frame,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub frame_features: Vec<Vec<f64>>,
    /// Mean frame feature followed by `(clip index / clip count, 1.0)`.
    pub global_rep: Vec<f64>,
    pub regions: Vec<Region>,
    pub frame_graphs: Vec<SceneGraph>,
    /// Word ids, without begin/end tokens.
    pub sentence: Vec<usize>,
    pub annotations: Vec<ObjectAnnotation>,
    /// Parsed (or supplied) language scene graph of `sentence`.
    pub language_graph: SceneGraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub clips: Vec<Clip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub videos: Vec<VideoSample>,
    pub heldout: Vec<VideoSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[VideoSample] {
        match split {
            Split::Train => &self.videos,
            Split::Heldout => &self.heldout,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.all_clips().next().map_or(0, |c| {
            c.regions.first().map_or(0, |r| r.feature.len())
        })
    }

    pub fn frame_dim(&self) -> usize {
        self.all_clips()
            .next()
            .and_then(|c| c.frame_features.first())
            .map_or(0, Vec::len)
    }

    pub fn all_clips(&self) -> impl Iterator<Item = &Clip> {
        self.videos
            .iter()
            .chain(&self.heldout)
            .flat_map(|v| v.clips.iter())
    }

    pub fn n_clips(&self, split: Split) -> usize {
        self.split(split).iter().map(|v| v.clips.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = self.to_json();
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ManifestJson::from_dataset(self)).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: ManifestJson = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut path = format!("$.{}", e.path());
            path = path.trim_end_matches(".?").to_string();
            if path == "$.." || path == "$." {
                path = "$".into();
            }
            let msg = e.inner().to_string();
            // missing fields are reported on their parent; point at the field
            if let Some(field) = msg
                .strip_prefix("missing field `")
                .and_then(|r| r.split('`').next())
            {
                path = if path == "$" {
                    format!("$.{field}")
                } else {
                    format!("{path}.{field}")
                };
            }
            schema(path, msg)
        })?;
        manifest.into_dataset()
    }
}

/// Rounds to 9 significant digits so the decimal manifest form is exact.
pub fn round9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn softmax_neg_dist(feature: &[f64], prototypes: &[Vec<f64>]) -> Vec<f64> {
    let logits: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            -feature
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| round9(e / z)).collect()
}

fn label_names(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| {
            base.get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("{prefix}{i}"))
        })
        .collect()
}

struct Synth<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    prototypes: Vec<Vec<f64>>,
    vocab: Vocab,
    grammar: TemplateGrammar,
}

impl Synth<'_> {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn random_box(&mut self) -> BBox {
        let w = self.rng.random_range(0.2..0.45);
        let h = self.rng.random_range(0.2..0.45);
        let x1 = self.rng.random_range(0.0..(1.0 - w));
        let y1 = self.rng.random_range(0.0..(1.0 - h));
        BBox::new(round9(x1), round9(y1), round9(x1 + w), round9(y1 + h))
    }

    /// A box on `frame` overlapping no existing box there by more than 0.3 IoU.
    fn free_box(&mut self, taken: &[(usize, BBox)], frame: usize) -> BBox {
        loop {
            let b = self.random_box();
            if taken
                .iter()
                .filter(|(f, _)| *f == frame)
                .all(|(_, t)| iou(t, &b) <= 0.3)
            {
                return b;
            }
        }
    }

    fn jittered(&mut self, b: &BBox) -> BBox {
        loop {
            let dx = self.rng.random_range(-0.1..0.1) * b.width();
            let dy = self.rng.random_range(-0.1..0.1) * b.height();
            let x1 = (b.x1 + dx).clamp(0.0, 1.0);
            let y1 = (b.y1 + dy).clamp(0.0, 1.0);
            let x2 = (b.x2 + dx).clamp(0.0, 1.0);
            let y2 = (b.y2 + dy).clamp(0.0, 1.0);
            let j = BBox::new(round9(x1), round9(y1), round9(x2), round9(y2));
            if j.is_proper() && iou(&j, b) > 0.6 {
                return j;
            }
        }
    }

    fn region_feature(&mut self, class: usize) -> Vec<f64> {
        let sigma = self.cfg.noise_sigma;
        (0..self.cfg.feature_dim)
            .map(|d| {
                let n = if sigma > 0.0 { sigma * self.normal() } else { 0.0 };
                round9(self.prototypes[class][d] + n)
            })
            .collect()
    }

    fn caption_graph(&mut self) -> (SceneGraph, Vec<usize>) {
        let n_clauses = if self.rng.random_bool(0.5) { 1 } else { 2 };
        let mut kinds: Vec<bool> = (0..n_clauses).map(|_| self.rng.random_bool(0.75)).collect();
        // triplet clauses first so node order equals rendering order
        kinds.sort_by_key(|&triplet| !triplet);
        let n_obj: usize = kinds.iter().map(|&t| if t { 2 } else { 1 }).sum();
        let mut classes: Vec<usize> = (0..self.cfg.n_objects).collect();
        classes.shuffle(&mut self.rng);
        classes.truncate(n_obj);

        let mut g = SceneGraph::language();
        let mut clause_of = Vec::new();
        let mut next = 0;
        for (ci, &triplet) in kinds.iter().enumerate() {
            let s = g.add_object(classes[next], None);
            clause_of.push(ci);
            next += 1;
            if triplet {
                let o = g.add_object(classes[next], None);
                clause_of.push(ci);
                next += 1;
                let rel = self.rng.random_range(0..self.cfg.n_relations);
                g.add_relation(rel, s, o);
            }
        }
        for obj in 0..g.objects.len() {
            let n_attr = match self.rng.random_range(0.0..1.0) {
                x if x < 0.5 => 0,
                x if x < 0.85 => 1,
                _ => 2,
            };
            let mut attrs: Vec<usize> = (0..self.cfg.n_attributes).collect();
            attrs.shuffle(&mut self.rng);
            for &a in attrs.iter().take(n_attr.min(self.cfg.n_attributes)) {
                g.add_attribute(a, obj);
            }
        }
        (g, clause_of)
    }

    fn clip(&mut self, id: String, clip_index: usize, n_clips: usize) -> Clip {
        let cfg = self.cfg;
        let (caption, clause_of) = self.caption_graph();
        let words = self.grammar.render(&caption).expect("synthetic graphs render");
        let mut sentence: Vec<usize> = words.iter().map(|w| self.vocab.word_id(w)).collect();
        sentence.truncate(MAX_SENTENCE_LEN);

        let n_clauses = clause_of.iter().max().map_or(0, |m| m + 1);
        let clause_frames: Vec<usize> = (0..n_clauses)
            .map(|_| self.rng.random_range(0..cfg.frames))
            .collect();

        // (class, frame, box, caption object or None, is duplicate)
        let mut specs: Vec<(usize, usize, BBox, Option<usize>, bool)> = Vec::new();
        let mut taken: Vec<(usize, BBox)> = Vec::new();
        let mut object_boxes = Vec::new();
        for (obj, node) in caption.objects.iter().enumerate() {
            let frame = clause_frames[clause_of[obj]];
            let b = self.free_box(&taken, frame);
            taken.push((frame, b));
            object_boxes.push((frame, b));
            specs.push((node.label, frame, b, Some(obj), false));
        }
        for obj in 0..caption.objects.len() {
            if specs.len() < cfg.regions && self.rng.random_bool(0.5) {
                let (frame, b) = object_boxes[obj];
                let j = self.jittered(&b);
                specs.push((caption.objects[obj].label, frame, j, Some(obj), true));
            }
        }
        let used: BTreeSet<usize> = caption.objects.iter().map(|o| o.label).collect();
        let free_classes: Vec<usize> = (0..cfg.n_objects).filter(|c| !used.contains(c)).collect();
        while specs.len() < cfg.regions {
            let class = free_classes[self.rng.random_range(0..free_classes.len())];
            let frame = self.rng.random_range(0..cfg.frames);
            let b = self.free_box(&taken, frame);
            taken.push((frame, b));
            specs.push((class, frame, b, None, false));
        }
        specs.shuffle(&mut self.rng);

        let mut regions = Vec::with_capacity(specs.len());
        for &(class, frame, bbox, _, _) in &specs {
            let feature = self.region_feature(class);
            let class_scores = softmax_neg_dist(&feature, &self.prototypes);
            regions.push(Region {
                feature,
                bbox,
                frame,
                class_scores,
            });
        }

        let mut frame_features = Vec::with_capacity(cfg.frames);
        for q in 0..cfg.frames {
            let members: Vec<&Region> = regions.iter().filter(|r| r.frame == q).collect();
            let f: Vec<f64> = (0..cfg.feature_dim)
                .map(|d| {
                    let mean = if members.is_empty() {
                        0.0
                    } else {
                        members.iter().map(|r| r.feature[d]).sum::<f64>() / members.len() as f64
                    };
                    let n = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * self.normal()
                    } else {
                        0.0
                    };
                    round9(mean + n)
                })
                .collect();
            frame_features.push(f);
        }
        let mut global_rep: Vec<f64> = (0..cfg.feature_dim)
            .map(|d| round9(frame_features.iter().map(|f| f[d]).sum::<f64>() / cfg.frames as f64))
            .collect();
        global_rep.push(round9(clip_index as f64 / n_clips as f64));
        global_rep.push(1.0);

        // detector-style frame graphs: one node per non-duplicate proposal
        let mut frame_graphs = Vec::with_capacity(cfg.frames);
        for q in 0..cfg.frames {
            let mut g = SceneGraph::frame(q);
            let mut node_of_caption = HashMap::new();
            for (ri, &(_, frame, _, cap, dup)) in specs.iter().enumerate() {
                if frame != q || dup {
                    continue;
                }
                let label = argmax(&regions[ri].class_scores);
                let node = g.add_object(label, Some(ri));
                if let Some(c) = cap {
                    node_of_caption.insert(c, node);
                }
            }
            for a in &caption.attributes {
                if let Some(&n) = node_of_caption.get(&a.owner) {
                    g.add_attribute(a.label, n);
                }
            }
            for r in &caption.relations {
                if let (Some(&s), Some(&o)) =
                    (node_of_caption.get(&r.subject), node_of_caption.get(&r.object))
                {
                    g.add_relation(r.label, s, o);
                }
            }
            frame_graphs.push(g);
        }

        let mut annotations = Vec::new();
        let mut obj_cursor = 0;
        for (pos, &w) in sentence.iter().enumerate() {
            if let Some(class) = self.vocab.object_class(w) {
                let (frame, bbox) = object_boxes[obj_cursor];
                obj_cursor += 1;
                let gamma = gamma_for(&regions, frame, &bbox);
                annotations.push(ObjectAnnotation {
                    position: pos,
                    class,
                    frame,
                    bbox,
                    gamma,
                });
            }
        }

        Clip {
            id,
            frame_features,
            global_rep,
            regions,
            frame_graphs,
            sentence,
            annotations,
            language_graph: caption,
        }
    }
}

/// `gamma_i = 1` iff region `i` is on `frame` and overlaps `bbox` with IoU > 0.5.
pub fn gamma_for(regions: &[Region], frame: usize, bbox: &BBox) -> Vec<bool> {
    regions
        .iter()
        .map(|r| r.frame == frame && iou(&r.bbox, bbox) > IOU_THRESHOLD)
        .collect()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_synth_config(cfg: &SynthConfig) -> Result<(), ConfigError> {
    let positive = [
        ("n_videos", cfg.n_videos),
        ("clips_per_video", cfg.clips_per_video),
        ("frames", cfg.frames),
        ("regions", cfg.regions),
        ("feature_dim", cfg.feature_dim),
        ("n_objects", cfg.n_objects),
        ("n_attributes", cfg.n_attributes),
        ("n_relations", cfg.n_relations),
    ];
    for (key, v) in positive {
        if v == 0 {
            return Err(ConfigError::NonPositive {
                key: key.into(),
                value: v.to_string(),
            });
        }
    }
    if cfg.regions < 4 || cfg.n_objects < 5 {
        return Err(ConfigError::InvalidValue {
            key: if cfg.regions < 4 { "regions" } else { "n_objects" }.into(),
            value: if cfg.regions < 4 { cfg.regions } else { cfg.n_objects }.to_string(),
            reason: "need at least 4 regions and 5 object classes per clip".into(),
        });
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(ConfigError::InvalidValue {
            key: "noise_sigma".into(),
            value: cfg.noise_sigma.to_string(),
            reason: "must be non-negative".into(),
        });
    }
    Ok(())
}

/// Deterministic synthetic dataset for `(cfg, seed)`.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Dataset, DatasetError> {
    check_synth_config(cfg)?;
    let labels = LabelVocab {
        objects: label_names(OBJECT_NAMES, cfg.n_objects, "object"),
        attributes: label_names(ATTRIBUTE_NAMES, cfg.n_attributes, "attribute"),
        relations: label_names(RELATION_NAMES, cfg.n_relations, "relation"),
    };
    let vocab = Vocab::for_labels(labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_objects)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| round9(StandardNormal.sample(&mut rng)))
                .collect()
        })
        .collect();
    let mut synth = Synth {
        cfg,
        rng,
        prototypes,
        grammar: vocab.grammar(),
        vocab,
    };
    let mut make = |prefix: &str, n: usize| -> Vec<VideoSample> {
        (0..n)
            .map(|v| {
                let id = format!("{prefix}{v:03}");
                let clips = (0..cfg.clips_per_video)
                    .map(|c| synth.clip(format!("{id}_c{c}"), c, cfg.clips_per_video))
                    .collect();
                VideoSample { id, clips }
            })
            .collect()
    };
    let videos = make("video", cfg.n_videos);
    let heldout = make("heldout", cfg.n_heldout);
    Ok(Dataset {
        vocab: synth.vocab,
        videos,
        heldout,
    })
}

/// Deterministic permutation of `0..n` under `seed`, cut into batches.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Shuffles whole videos and packs them, in order, into batches of at most
/// `clip_budget` clips. A video longer than the budget gets its own batch.
pub fn packed_video_batches(clip_counts: &[usize], clip_budget: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(clip_budget >= 1, "batch size must be at least 1");
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut used = 0;
    for v in shuffled_batches(clip_counts.len(), 1, seed).into_iter().flatten() {
        let n = clip_counts[v];
        match out.last_mut() {
            Some(last) if used + n <= clip_budget => {
                last.push(v);
                used += n;
            }
            _ => {
                out.push(vec![v]);
                used = n;
            }
        }
    }
    out
}

/// Clips with padded sentences and region validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    /// `(video index, clip index)` per row.
    pub items: Vec<(usize, usize)>,
    /// Sentences padded with [`PAD`] to the longest in the batch.
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
    pub region_mask: Vec<Vec<bool>>,
}

/// Batches every clip of `videos` in a seed-determined order.
pub fn batch(videos: &[VideoSample], batch_size: usize, seed: u64) -> Vec<PaddedBatch> {
    let refs: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, s)| (0..s.clips.len()).map(move |c| (v, c)))
        .collect();
    shuffled_batches(refs.len(), batch_size, seed)
        .into_iter()
        .map(|idx| {
            let items: Vec<(usize, usize)> = idx.iter().map(|&i| refs[i]).collect();
            let clips: Vec<&Clip> = items.iter().map(|&(v, c)| &videos[v].clips[c]).collect();
            let max_len = clips.iter().map(|c| c.sentence.len()).max().unwrap_or(0);
            let max_regions = clips.iter().map(|c| c.regions.len()).max().unwrap_or(0);
            let mut tokens = Vec::new();
            let mut token_mask = Vec::new();
            let mut region_mask = Vec::new();
            for c in &clips {
                let mut t = c.sentence.clone();
                t.resize(max_len, PAD);
                tokens.push(t);
                token_mask.push((0..max_len).map(|i| i < c.sentence.len()).collect());
                region_mask.push((0..max_regions).map(|i| i < c.regions.len()).collect());
            }
            PaddedBatch {
                items,
                tokens,
                token_mask,
                region_mask,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifest JSON

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabJson {
    words: Vec<String>,
    objects: Vec<String>,
    attributes: Vec<String>,
    relations: Vec<String>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionJson {
    feature: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    frame: usize,
    class_scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationJson {
    position: usize,
    class: String,
    frame: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    gamma: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipJson {
    clip_id: String,
    frame_features: Vec<Vec<f64>>,
    global_rep: Vec<f64>,
    regions: Vec<RegionJson>,
    frame_graphs: Vec<SceneGraphJson>,
    sentence: Vec<usize>,
    annotations: Vec<AnnotationJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    language_graph: Option<SceneGraphJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoJson {
    video_id: String,
    clips: Vec<ClipJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    vocab: VocabJson,
    videos: Vec<VideoJson>,
    #[serde(default)]
    heldout: Vec<VideoJson>,
}

impl ManifestJson {
    fn from_dataset(d: &Dataset) -> Self {
        let labels = &d.vocab.labels;
        let grammar = d.vocab.grammar();
        let videos = |vs: &[VideoSample]| -> Vec<VideoJson> {
            vs.iter()
                .map(|v| VideoJson {
                    video_id: v.id.clone(),
                    clips: v
                        .clips
                        .iter()
                        .map(|c| {
                            let words = d.vocab.decode(&c.sentence);
                            let parsed = grammar.parse_caption(&words).ok();
                            ClipJson {
                                clip_id: c.id.clone(),
                                frame_features: c.frame_features.clone(),
                                global_rep: c.global_rep.clone(),
                                regions: c
                                    .regions
                                    .iter()
                                    .map(|r| RegionJson {
                                        feature: r.feature.clone(),
                                        bbox: r.bbox.into(),
                                        frame: r.frame,
                                        class_scores: r.class_scores.clone(),
                                    })
                                    .collect(),
                                frame_graphs: c
                                    .frame_graphs
                                    .iter()
                                    .map(|g| SceneGraphJson::from_graph(g, labels))
                                    .collect(),
                                sentence: c.sentence.clone(),
                                annotations: c
                                    .annotations
                                    .iter()
                                    .map(|a| AnnotationJson {
                                        position: a.position,
                                        class: labels.objects[a.class].clone(),
                                        frame: a.frame,
                                        bbox: a.bbox.into(),
                                        gamma: a.gamma.iter().map(|&g| g as u8).collect(),
                                    })
                                    .collect(),
                                // only stored when it cannot be re-derived by parsing
                                language_graph: if parsed.as_ref() == Some(&c.language_graph) {
                                    None
                                } else {
                                    Some(SceneGraphJson::from_graph(&c.language_graph, labels))
                                },
                            }
                        })
                        .collect(),
                })
                .collect()
        };
        Self {
            vocab: VocabJson {
                words: d.vocab.words.clone(),
                objects: labels.objects.clone(),
                attributes: labels.attributes.clone(),
                relations: labels.relations.clone(),
                synonyms: d.vocab.synonyms.clone(),
            },
            videos: videos(&d.videos),
            heldout: videos(&d.heldout),
        }
    }

    fn into_dataset(self) -> Result<Dataset, DatasetError> {
        let labels = LabelVocab {
            objects: self.vocab.objects,
            attributes: self.vocab.attributes,
            relations: self.vocab.relations,
        };
        let vocab = Vocab::new(self.vocab.words, labels, self.vocab.synonyms)?;
        let videos = convert_videos(self.videos, &vocab, "videos")?;
        let heldout = convert_videos(self.heldout, &vocab, "heldout")?;
        Ok(Dataset {
            vocab,
            videos,
            heldout,
        })
    }
}

fn convert_videos(
    videos: Vec<VideoJson>,
    vocab: &Vocab,
    key: &str,
) -> Result<Vec<VideoSample>, DatasetError> {
    let grammar = vocab.grammar();
    let mut out = Vec::with_capacity(videos.len());
    for (vi, v) in videos.into_iter().enumerate() {
        let vpath = format!("$.{key}[{vi}]");
        if v.clips.is_empty() {
            return Err(schema(format!("{vpath}.clips"), "a video needs at least one clip"));
        }
        let mut clips = Vec::with_capacity(v.clips.len());
        for (ci, c) in v.clips.into_iter().enumerate() {
            clips.push(convert_clip(c, vocab, &grammar, &format!("{vpath}.clips[{ci}]"))?);
        }
        out.push(VideoSample { id: v.video_id, clips });
    }
    Ok(out)
}

fn check_box(b: &BBox, path: &str) -> Result<(), DatasetError> {
    if !(b.x1 < b.x2 && b.y1 < b.y2) {
        return Err(schema(path, "box must satisfy x1 < x2 and y1 < y2"));
    }
    if ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(schema(path, "box coordinates must be normalized to [0, 1]"));
    }
    Ok(())
}

fn convert_clip(
    c: ClipJson,
    vocab: &Vocab,
    grammar: &TemplateGrammar,
    path: &str,
) -> Result<Clip, DatasetError> {
    let n_obj = vocab.n_objects();
    if c.frame_features.is_empty() {
        return Err(schema(format!("{path}.frame_features"), "at least one frame is required"));
    }
    let fdim = c.frame_features[0].len();
    for (q, f) in c.frame_features.iter().enumerate() {
        if f.len() != fdim || !f.iter().all(|x| x.is_finite()) {
            return Err(schema(
                format!("{path}.frame_features[{q}]"),
                "frame features must be finite and equally sized",
            ));
        }
    }
    let n_frames = c.frame_features.len();
    if c.regions.is_empty() {
        return Err(schema(format!("{path}.regions"), "at least one region is required"));
    }
    let rdim = c.regions[0].feature.len();
    let mut regions = Vec::with_capacity(c.regions.len());
    for (ri, r) in c.regions.into_iter().enumerate() {
        let rpath = format!("{path}.regions[{ri}]");
        let bbox = BBox::from(r.bbox);
        check_box(&bbox, &format!("{rpath}.box"))?;
        if r.feature.len() != rdim || !r.feature.iter().all(|x| x.is_finite()) {
            return Err(schema(format!("{rpath}.feature"), "region features must be finite and equally sized"));
        }
        if r.frame >= n_frames {
            return Err(schema(format!("{rpath}.frame"), "frame index out of range"));
        }
        if r.class_scores.len() != n_obj {
            return Err(schema(
                format!("{rpath}.class_scores"),
                "class score count must equal the object vocabulary size",
            ));
        }
        let total: f64 = r.class_scores.iter().sum();
        if (total - 1.0).abs() > 1e-6 || r.class_scores.iter().any(|&p| !(p >= 0.0)) {
            return Err(schema(
                format!("{rpath}.class_scores"),
                "class scores must be a probability vector summing to 1 within 1e-6",
            ));
        }
        regions.push(Region {
            feature: r.feature,
            bbox,
            frame: r.frame,
            class_scores: r.class_scores,
        });
    }
    let n_regions = regions.len();

    let mut frame_graphs = Vec::with_capacity(c.frame_graphs.len());
    for (gi, gj) in c.frame_graphs.iter().enumerate() {
        let gpath = format!("{path}.frame_graphs[{gi}]");
        let g = gj
            .to_graph(&vocab.labels)
            .map_err(|e| schema(format!("{gpath}.{}", e.path), e.to_string()))?;
        if g.source != crate::scene_graph::GraphSource::Frame {
            return Err(schema(format!("{gpath}.source"), "frame graphs must have source \"frame\""));
        }
        if let Some(v) = g.validate(&vocab.labels, Some(n_regions)).first() {
            return Err(schema(gpath, v.to_string()));
        }
        frame_graphs.push(g);
    }

    if c.sentence.is_empty() || c.sentence.len() > MAX_SENTENCE_LEN {
        return Err(schema(
            format!("{path}.sentence"),
            format!("sentence length must be in 1..={MAX_SENTENCE_LEN}"),
        ));
    }
    for (i, &t) in c.sentence.iter().enumerate() {
        if t >= vocab.len() || t == PAD || t == BOS || t == EOS {
            return Err(schema(format!("{path}.sentence[{i}]"), "token id is not a word of the vocabulary"));
        }
    }

    let mut annotations = Vec::with_capacity(c.annotations.len());
    for (ai, a) in c.annotations.into_iter().enumerate() {
        let apath = format!("{path}.annotations[{ai}]");
        let class = vocab
            .labels
            .object_id(&a.class)
            .ok_or_else(|| schema(format!("{apath}.class"), format!("unknown object label {:?}", a.class)))?;
        if a.position >= c.sentence.len() || vocab.object_class(c.sentence[a.position]).is_none() {
            return Err(schema(format!("{apath}.position"), "position must index an object word"));
        }
        let bbox = BBox::from(a.bbox);
        check_box(&bbox, &format!("{apath}.box"))?;
        if a.frame >= n_frames {
            return Err(schema(format!("{apath}.frame"), "frame index out of range"));
        }
        if a.gamma.len() != n_regions || a.gamma.iter().any(|&g| g > 1) {
            return Err(schema(format!("{apath}.gamma"), "gamma must be a 0/1 vector with one entry per region"));
        }
        if !a.gamma.contains(&1) {
            return Err(schema(format!("{apath}.gamma"), "gamma needs at least one positive region"));
        }
        annotations.push(ObjectAnnotation {
            position: a.position,
            class,
            frame: a.frame,
            bbox,
            gamma: a.gamma.iter().map(|&g| g == 1).collect(),
        });
    }

    let language_graph = match &c.language_graph {
        Some(gj) => {
            let gpath = format!("{path}.language_graph");
            let g = gj
                .to_graph(&vocab.labels)
                .map_err(|e| schema(format!("{gpath}.{}", e.path), e.to_string()))?;
            if let Some(v) = g.validate(&vocab.labels, None).first() {
                return Err(schema(gpath, v.to_string()));
            }
            g
        }
        None => grammar
            .parse_caption(&vocab.decode(&c.sentence))
            .map_err(|e| schema(format!("{path}.sentence"), format!("cannot derive language graph: {e}")))?,
    };

    Ok(Clip {
        id: c.clip_id,
        frame_features: c.frame_features,
        global_rep: c.global_rep,
        regions,
        frame_graphs,
        sentence: c.sentence,
        annotations,
        language_graph,
    })
}

/// Per-clip ground-truth object label sets, `{"clip_id": ["obj", ...]}`.
pub fn load_object_sets(path: &Path) -> Result<BTreeMap<String, Vec<String>>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| schema(format!("$.{}", e.path()), e.inner().to_string()))
}
