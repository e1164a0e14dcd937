//! The assembled model and its batch losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::{Clip, Dataset, VideoSample};
use crate::decoder::{Decoder, DecoderDims, GateOverride};
use crate::graph_encoder::{mapping_loss, EncoderDims, GraphEncoder, PooledGraphRepr, LANGUAGE_PREFIX};
use crate::grounding::{grounding_loss, region_attention_loss, Grounding};
use crate::params::{Graph, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub encoder: EncoderDims,
    pub decoder: DecoderDims,
}

impl ModelDims {
    pub fn new(cfg: &ModelConfig, data: &Dataset) -> Self {
        let labels = &data.vocab.labels;
        let first = data.all_clips().next();
        let region_dim = data.feature_dim();
        let frame_dim = data.frame_dim();
        let global_dim = first.map_or(frame_dim + 2, |c| c.global_rep.len());
        Self {
            encoder: EncoderDims {
                n_objects: labels.objects.len(),
                n_attributes: labels.attributes.len(),
                n_relations: labels.relations.len(),
                embed: cfg.embed_dim,
                unified: cfg.unified_dim,
                region_dim,
                mfb_k: cfg.mfb_k,
            },
            decoder: DecoderDims {
                vocab: data.vocab.len(),
                word: cfg.word_dim,
                hidden: cfg.hidden_dim,
                att: cfg.att_dim,
                frame_dim,
                global_dim,
                region_dim,
                n_objects: labels.objects.len(),
                unified: cfg.unified_dim,
                max_len: cfg.max_len,
            },
        }
    }
}

/// Training phase: language reconstruction, then visual refinement with the
/// language encoder frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Full,
}

/// Where the decoder's graph representation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinedSource {
    /// `u^L` of the clip's language graph.
    Language,
    /// Mapped visual representation.
    Visual,
    /// All-zero vectors (ablation).
    Zero,
}

impl Phase {
    pub fn source(self) -> RefinedSource {
        match self {
            Phase::Pretrain => RefinedSource::Language,
            Phase::Full => RefinedSource::Visual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_l: f64,
    pub lambda_r: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        Self {
            lambda_m: t.lambda_m,
            lambda_l: t.lambda_l,
            lambda_r: t.lambda_r,
        }
    }
}

/// Which scalar to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Caption,
    Mapping,
    RegionAttention,
    Grounding,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Caption,
        Objective::Mapping,
        Objective::RegionAttention,
        Objective::Grounding,
        Objective::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Caption => "L_S",
            Objective::Mapping => "L_M",
            Objective::RegionAttention => "L_R",
            Objective::Grounding => "L_G",
            Objective::Total => "total",
        }
    }
}

/// Batch losses: cross-entropy summed per sentence and averaged over clips,
/// `L(M)` averaged over clips, `L(R)` and `L(G)` averaged over annotations.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub ce: Var,
    pub lm: Var,
    pub lr: Var,
    pub lg: Var,
    /// `ce + lambda_m L(M)`
    pub ls: Var,
    /// `L(S) + L(G)`
    pub total: Var,
    pub correct: usize,
    pub tokens: usize,
    pub clips: usize,
    pub annotations: usize,
}

impl BatchLoss {
    pub fn get(&self, o: Objective) -> Var {
        match o {
            Objective::Caption => self.ls,
            Objective::Mapping => self.lm,
            Objective::RegionAttention => self.lr,
            Objective::Grounding => self.lg,
            Objective::Total => self.total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub encoder: GraphEncoder,
    pub decoder: Decoder,
    pub grounding: Grounding,
}

impl Model {
    /// Registers every block in a fixed order with seeded initial values.
    pub fn build(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = GraphEncoder::register(&mut store, &mut rng, dims.encoder);
        let decoder = Decoder::register(&mut store, &mut rng, dims.decoder);
        let grounding = Grounding::register(&mut store, &mut rng, dims.decoder.n_objects, dims.decoder.aug_dim());
        Self {
            dims,
            store,
            encoder,
            decoder,
            grounding,
        }
    }

    pub fn new(cfg: &ModelConfig, data: &Dataset, seed: u64) -> Self {
        Self::build(ModelDims::new(cfg, data), seed)
    }

    /// Blocks of the language-side encoder.
    pub fn language_blocks(&self) -> Vec<ParamId> {
        self.store.with_prefix(LANGUAGE_PREFIX).collect()
    }

    /// Blocks updated in `phase`.
    pub fn trainable(&self, phase: Phase) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let name = self.store.name(id);
                match phase {
                    Phase::Pretrain => {
                        !name.starts_with("graph_encoder.visual.") && !name.starts_with("graph_encoder.mapping.")
                    }
                    Phase::Full => !name.starts_with(LANGUAGE_PREFIX),
                }
            })
            .collect()
    }

    pub fn language_hash(&self) -> String {
        self.store.hash_blocks(self.language_blocks())
    }

    /// Graph representation fed to the decoder, plus `L(M)` when the source
    /// is visual.
    pub fn refined(&self, g: &mut Graph, clip: &Clip, source: RefinedSource) -> (PooledGraphRepr, Option<Var>) {
        match source {
            RefinedSource::Language => (self.encoder.language_repr(g, &clip.language_graph), None),
            RefinedSource::Visual => {
                let u_l = self.encoder.language_repr(g, &clip.language_graph);
                let u_f = self.encoder.visual_repr(g, &clip.frame_graphs, &clip.regions);
                let u = self.encoder.map_visual_to_language(g, &u_f);
                let lm = mapping_loss(&mut g.tape, &u, &u_l).expect("pooled shapes agree");
                (u, Some(lm))
            }
            RefinedSource::Zero => {
                let z = vec![0.0; self.dims.encoder.unified];
                (PooledGraphRepr::constant(g, &[z.clone(), z.clone(), z]), None)
            }
        }
    }

    /// Teacher-forced losses over whole videos, so the context generator
    /// links consecutive clips.
    pub fn batch_loss(&self, g: &mut Graph, videos: &[&VideoSample], phase: Phase, w: &LossWeights) -> BatchLoss {
        let mut nll = Vec::new();
        let mut lms = Vec::new();
        let mut lrs = Vec::new();
        let mut lgs = Vec::new();
        let (mut correct, mut tokens) = (0, 0);
        for video in videos {
            let mut ctx = self.decoder.zero_context(g);
            let mut prev_h2 = None;
            for clip in &video.clips {
                let (refined, lm) = self.refined(g, clip, phase.source());
                lms.extend(lm);
                let inputs = self.decoder.prepare(g, clip, refined);
                let start = self.decoder.sentence_start(g, prev_h2, &mut ctx, &refined);
                let out = self.decoder.teacher_forced(g, &inputs, start, &clip.sentence, GateOverride::None);
                correct += out.correct;
                tokens += out.total;
                nll.push(out.nll);
                for ann in &clip.annotations {
                    let a_r = out.steps[ann.position].selection.a_r;
                    let lr = region_attention_loss(&mut g.tape, a_r, &ann.gamma);
                    let p_s = self.grounding.region_class_scores(g, inputs.regions, a_r);
                    let lg = grounding_loss(&mut g.tape, p_s, &ann.gamma, ann.class, lr, w.lambda_l, w.lambda_r);
                    lrs.push(lr);
                    lgs.push(lg);
                }
                prev_h2 = Some(out.last_h2);
            }
        }
        let clips = nll.len();
        let mut mean = |xs: &[Var]| {
            if xs.is_empty() {
                g.tape.zeros(1, 1)
            } else {
                let s = g.tape.add_all(xs);
                g.tape.scale(s, 1.0 / xs.len() as f64)
            }
        };
        let ce = mean(&nll);
        let lm = mean(&lms);
        let lr = mean(&lrs);
        let lg = mean(&lgs);
        let wm = g.tape.scale(lm, w.lambda_m);
        let ls = g.tape.add(ce, wm);
        let total = g.tape.add(ls, lg);
        BatchLoss {
            ce,
            lm,
            lr,
            lg,
            ls,
            total,
            correct,
            tokens,
            clips,
            annotations: lrs.len(),
        }
    }
}
