//! Two-layer sentence generator with temporal attention, region
//! self-attention, the region/graph selection mechanism, the word
//! distribution head and the cross-sentence context generator.
//!
//! Per step:
//! ```text
//! h1 = LSTM1(h1, [h2_prev; global; Emb(y_prev)])
//! f  = sum_q softmax(v^T tanh(W_f f_q + W_h h1))_q f_q
//! (s_r, s_sg) = softmax(score_r([h1; mean r]), score_sg([h1; mean u]))
//! r  = sum_i a_r_i r_i         u = sum_j a_sg_j u_j
//! h2 = LSTM2(h2, [h1; f; s_sg u; s_r r])
//! p  = softmax(W_hy h2)
//! ```
//! The first sentence of a video starts from zero states. Sentence `i > 0`
//! first advances the context cell on the previous sentence's last `h2` and
//! seeds `h1` with `relu(I [h_c; u_obj; u_att; u_rel] + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{Clip, Region, BOS, EOS};
use crate::graph_encoder::PooledGraphRepr;
use crate::layers::{AdditiveAttention, Dense, Lstm, Scorer};
use crate::params::{init_weight, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub word: usize,
    pub hidden: usize,
    pub att: usize,
    pub frame_dim: usize,
    pub global_dim: usize,
    pub region_dim: usize,
    pub n_objects: usize,
    pub unified: usize,
    pub max_len: usize,
}

impl DecoderDims {
    /// Region feature, 5-d box encoding and class scores.
    pub fn aug_dim(&self) -> usize {
        self.region_dim + 5 + self.n_objects
    }
}

/// Single-head self-attention with residual, no biases.
#[derive(Clone, Copy, Debug)]
pub struct RegionSelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub dims: DecoderDims,
    pub embedding: ParamId,
    pub lstm1: Lstm,
    pub lstm2: Lstm,
    pub temporal: AdditiveAttention,
    pub self_attention: RegionSelfAttention,
    pub gate_regions: Scorer,
    pub gate_graph: Scorer,
    pub region_attention: AdditiveAttention,
    pub graph_attention: AdditiveAttention,
    pub w_hy: ParamId,
    pub context: Lstm,
    pub init: Dense,
}

/// Forces one selection gate to zero (and the other to one).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateOverride {
    #[default]
    None,
    ZeroGraph,
    ZeroRegions,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

/// Context cell state carried across the sentences of one video.
#[derive(Clone, Copy, Debug)]
pub struct ContextState {
    pub hc: Var,
    pub cc: Var,
    /// Completed sentences consumed so far.
    pub updates: usize,
}

/// Per-clip decoder inputs.
#[derive(Clone, Copy, Debug)]
pub struct ClipInputs {
    /// `Q x d_f`
    pub frames: Var,
    pub global: Var,
    /// Augmented regions after self-attention, `N x d_aug`.
    pub regions: Var,
    pub refined: PooledGraphRepr,
    /// The three refined vectors as rows, `3 x u`.
    pub refined_rows: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Selection {
    pub s_r: Var,
    pub s_sg: Var,
    pub a_r: Var,
    pub a_sg: Var,
    pub r_hat: Var,
    pub u_hat: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub probs: Var,
    pub selection: Selection,
    pub temporal: Var,
}

/// Teacher-forced pass over one sentence.
#[derive(Clone, Debug)]
pub struct SentenceOutput {
    pub steps: Vec<StepOutput>,
    /// Summed negative log-likelihood of the gold tokens and the end token.
    pub nll: Var,
    pub correct: usize,
    pub total: usize,
    pub last_h2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Selection values recorded at one generation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub s_r: f64,
    pub s_sg: f64,
    pub a_r: Vec<f64>,
    pub a_sg: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Generated {
    /// Word ids without the end token.
    pub tokens: Vec<usize>,
    /// One entry per produced token, the end token included.
    pub steps: Vec<StepTrace>,
    /// Step outputs aligned with `steps`.
    pub outputs: Vec<StepOutput>,
    pub last_h2: Var,
    pub log_prob: f64,
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).as_slice().to_vec()
}

/// `[feature; x1, y1, x2, y2, area; class_scores]` per region.
pub fn augmented_region_matrix(regions: &[Region]) -> Tensor {
    let rows: Vec<Vec<f64>> = regions
        .iter()
        .map(|r| {
            let mut v = r.feature.clone();
            v.extend_from_slice(&r.bbox.encoding());
            v.extend_from_slice(&r.class_scores);
            v
        })
        .collect();
    Tensor::from_rows(&rows)
}

impl Decoder {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, dims: DecoderDims) -> Self {
        let (m, a, u, aug) = (dims.hidden, dims.att, dims.unified, dims.aug_dim());
        let embedding = store.register("decoder.embedding", crate::params::gaussian(rng, dims.vocab, dims.word, 1.0));
        let lstm1 = Lstm::register(store, rng, "decoder.lstm1", m + dims.global_dim + dims.word, m);
        let lstm2 = Lstm::register(store, rng, "decoder.lstm2", m + dims.frame_dim + u + aug, m);
        let temporal = AdditiveAttention::register(store, rng, "decoder.temporal", dims.frame_dim, m, a);
        let self_attention = RegionSelfAttention {
            wq: store.register("decoder.self_attention.wq", init_weight(rng, a, aug)),
            wk: store.register("decoder.self_attention.wk", init_weight(rng, a, aug)),
            wv: store.register("decoder.self_attention.wv", init_weight(rng, a, aug)),
            wo: store.register("decoder.self_attention.wo", init_weight(rng, aug, a)),
        };
        let gate_regions = Scorer::register(store, rng, "decoder.gate.regions", m + aug, a);
        let gate_graph = Scorer::register(store, rng, "decoder.gate.graph", m + u, a);
        let region_attention = AdditiveAttention::register(store, rng, "decoder.region_attention", aug, m, a);
        let graph_attention = AdditiveAttention::register(store, rng, "decoder.graph_attention", u, m, a);
        let w_hy = store.register("decoder.w_hy", init_weight(rng, dims.vocab, m));
        let context = Lstm::register(store, rng, "decoder.context", m, m);
        let init = Dense::register(store, rng, "decoder.init", m, m + 3 * u);
        Self {
            dims,
            embedding,
            lstm1,
            lstm2,
            temporal,
            self_attention,
            gate_regions,
            gate_graph,
            region_attention,
            graph_attention,
            w_hy,
            context,
            init,
        }
    }

    /// `R + softmax(Q K^T / sqrt(d)) V W_o` over the augmented regions.
    pub fn augment_regions(&self, g: &mut Graph, regions: &[Region]) -> Var {
        let r = g.constant(augmented_region_matrix(regions));
        self.self_attend(g, r)
    }

    pub fn self_attend(&self, g: &mut Graph, r: Var) -> Var {
        let sa = self.self_attention;
        let (wq, wk, wv, wo) = (g.param(sa.wq), g.param(sa.wk), g.param(sa.wv), g.param(sa.wo));
        let q = g.tape.matmul_t(r, wq);
        let k = g.tape.matmul_t(r, wk);
        let v = g.tape.matmul_t(r, wv);
        let scores = g.tape.matmul_t(q, k);
        let scaled = g.tape.scale(scores, 1.0 / (self.dims.att as f64).sqrt());
        let weights = g.tape.softmax_rows(scaled);
        let mixed = g.tape.matmul(weights, v);
        let out = g.tape.matmul_t(mixed, wo);
        g.tape.add(r, out)
    }

    pub fn prepare(&self, g: &mut Graph, clip: &Clip, refined: PooledGraphRepr) -> ClipInputs {
        let frames = g.constant(Tensor::from_rows(&clip.frame_features));
        let global = g.tape.constant_vector(&clip.global_rep);
        let regions = self.augment_regions(g, &clip.regions);
        let refined_rows = g.tape.stack_rows(&refined.parts());
        ClipInputs {
            frames,
            global,
            regions,
            refined,
            refined_rows,
        }
    }

    pub fn zero_state(&self, g: &mut Graph) -> DecoderState {
        let m = self.dims.hidden;
        DecoderState {
            h1: g.tape.zeros(m, 1),
            c1: g.tape.zeros(m, 1),
            h2: g.tape.zeros(m, 1),
            c2: g.tape.zeros(m, 1),
        }
    }

    pub fn zero_context(&self, g: &mut Graph) -> ContextState {
        let m = self.dims.hidden;
        ContextState {
            hc: g.tape.zeros(m, 1),
            cc: g.tape.zeros(m, 1),
            updates: 0,
        }
    }

    /// Consumes the previous sentence's last `h2` and returns `x_0`.
    pub fn init_next_sentence(
        &self,
        g: &mut Graph,
        last_h2: Var,
        ctx: &mut ContextState,
        refined: &PooledGraphRepr,
    ) -> Var {
        let (hc, cc) = self.context.step(g, last_h2, ctx.hc, ctx.cc);
        ctx.hc = hc;
        ctx.cc = cc;
        ctx.updates += 1;
        let [o, a, r] = refined.parts();
        let x = g.tape.concat(&[hc, o, a, r]);
        self.init.relu(g, x)
    }

    /// Start state of a sentence: zeros for the first sentence of a video,
    /// otherwise `h1 = x_0`.
    pub fn sentence_start(
        &self,
        g: &mut Graph,
        previous_h2: Option<Var>,
        ctx: &mut ContextState,
        refined: &PooledGraphRepr,
    ) -> DecoderState {
        let mut s = self.zero_state(g);
        if let Some(h2) = previous_h2 {
            s.h1 = self.init_next_sentence(g, h2, ctx, refined);
        }
        s
    }

    pub fn step_layer1(&self, g: &mut Graph, state: &DecoderState, global: Var, prev_word: usize) -> (Var, Var) {
        let emb = g.lookup(self.embedding, prev_word);
        let x = g.tape.concat(&[state.h2, global, emb]);
        self.lstm1.step(g, x, state.h1, state.c1)
    }

    /// Attention weights over frames and the attended frame vector.
    pub fn temporal_attention(&self, g: &mut Graph, h1: Var, frames: Var) -> (Var, Var) {
        let w = self.temporal.weights(g, frames, h1);
        let f_hat = g.tape.t_matmul(frames, w);
        (w, f_hat)
    }

    pub fn select(
        &self,
        g: &mut Graph,
        h1: Var,
        regions: Var,
        refined_rows: Var,
        gate: GateOverride,
    ) -> Selection {
        let (s_r, s_sg) = match gate {
            GateOverride::None => {
                let mr = g.tape.mean_rows(regions);
                let mu = g.tape.mean_rows(refined_rows);
                let xr = g.tape.concat(&[h1, mr]);
                let xu = g.tape.concat(&[h1, mu]);
                let score_r = self.gate_regions.score(g, xr);
                let score_sg = self.gate_graph.score(g, xu);
                let scores = g.tape.concat(&[score_r, score_sg]);
                let s = g.tape.softmax(scores);
                (g.tape.pick(s, 0), g.tape.pick(s, 1))
            }
            GateOverride::ZeroGraph => (g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(0.0))),
            GateOverride::ZeroRegions => (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(1.0))),
        };
        let a_r = self.region_attention.weights(g, regions, h1);
        let r_hat = g.tape.t_matmul(regions, a_r);
        let a_sg = self.graph_attention.weights(g, refined_rows, h1);
        let u_hat = g.tape.t_matmul(refined_rows, a_sg);
        Selection {
            s_r,
            s_sg,
            a_r,
            a_sg,
            r_hat,
            u_hat,
        }
    }

    pub fn step_layer2(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        h1: Var,
        f_hat: Var,
        sel: &Selection,
    ) -> (Var, Var) {
        let gu = g.tape.scale_by(sel.u_hat, sel.s_sg);
        let gr = g.tape.scale_by(sel.r_hat, sel.s_r);
        let x = g.tape.concat(&[h1, f_hat, gu, gr]);
        self.lstm2.step(g, x, state.h2, state.c2)
    }

    /// `softmax(W_hy h2)`.
    pub fn word_distribution(&self, g: &mut Graph, h2: Var) -> Var {
        let w = g.param(self.w_hy);
        let logits = g.tape.matmul(w, h2);
        g.tape.softmax(logits)
    }

    pub fn step(
        &self,
        g: &mut Graph,
        inputs: &ClipInputs,
        state: &DecoderState,
        prev_word: usize,
        gate: GateOverride,
    ) -> StepOutput {
        let (h1, c1) = self.step_layer1(g, state, inputs.global, prev_word);
        let (temporal, f_hat) = self.temporal_attention(g, h1, inputs.frames);
        let selection = self.select(g, h1, inputs.regions, inputs.refined_rows, gate);
        let (h2, c2) = self.step_layer2(g, state, h1, f_hat, &selection);
        let probs = self.word_distribution(g, h2);
        StepOutput {
            state: DecoderState { h1, c1, h2, c2 },
            probs,
            selection,
            temporal,
        }
    }

    /// Gold-prefix pass over `sentence` followed by the end token.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        inputs: &ClipInputs,
        start: DecoderState,
        sentence: &[usize],
        gate: GateOverride,
    ) -> SentenceOutput {
        let mut state = start;
        let mut prev = BOS;
        let mut steps = Vec::with_capacity(sentence.len() + 1);
        let mut nlls = Vec::with_capacity(sentence.len() + 1);
        let mut correct = 0;
        for &target in sentence.iter().chain(std::iter::once(&EOS)) {
            let out = self.step(g, inputs, &state, prev, gate);
            let p = g.tape.pick(out.probs, target);
            let lp = g.tape.log(p);
            nlls.push(lp);
            if crate::dataset::argmax(g.tape.value(out.probs).as_slice()) == target {
                correct += 1;
            }
            state = out.state;
            prev = target;
            steps.push(out);
        }
        let total_lp = g.tape.add_all(&nlls);
        let nll = g.tape.scale(total_lp, -1.0);
        SentenceOutput {
            last_h2: state.h2,
            total: steps.len(),
            steps,
            nll,
            correct,
        }
    }

    /// Decodes one sentence from `start`. Beam search keeps the `width`
    /// best partial sentences by summed log-probability and returns the best
    /// finished one; width 1 is greedy decoding.
    pub fn generate(
        &self,
        g: &mut Graph,
        inputs: &ClipInputs,
        start: DecoderState,
        mode: DecodeMode,
        max_len: usize,
        gate: GateOverride,
    ) -> Generated {
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(w) => w.max(1),
        };
        struct Hyp {
            tokens: Vec<usize>,
            outputs: Vec<StepOutput>,
            state: DecoderState,
            log_prob: f64,
        }
        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            outputs: Vec::new(),
            state: start,
            log_prob: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for t in 0..max_len.max(1) {
            let mut cands: Vec<(f64, usize, usize, StepOutput)> = Vec::new();
            for (bi, h) in beams.iter().enumerate() {
                let prev = h.tokens.last().copied().unwrap_or(BOS);
                let out = self.step(g, inputs, &h.state, prev, gate);
                let probs = g.tape.value(out.probs).as_slice();
                let mut order: Vec<usize> = (0..probs.len()).collect();
                // stable sort keeps the lowest id first among ties
                order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
                for &w in order.iter().take(width) {
                    let lp = h.log_prob + probs[w].max(crate::autodiff::LOG_FLOOR).ln();
                    cands.push((lp, bi, w, out));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let last = t + 1 == max_len.max(1);
            let mut next = Vec::new();
            for (lp, bi, w, out) in cands {
                if next.len() == width {
                    break;
                }
                let mut tokens = beams[bi].tokens.clone();
                let mut outputs = beams[bi].outputs.clone();
                outputs.push(out);
                if w != EOS {
                    tokens.push(w);
                }
                let hyp = Hyp {
                    tokens,
                    outputs,
                    state: out.state,
                    log_prob: lp,
                };
                if w == EOS || last {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            // log-probabilities only fall, so a finished leader cannot be overtaken
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if next.is_empty() || next.iter().all(|h| h.log_prob <= best_done) {
                break;
            }
            beams = next;
        }
        if finished.is_empty() {
            finished = beams;
        }
        let best = finished
            .into_iter()
            .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
            .expect("at least one hypothesis");
        let steps = best
            .outputs
            .iter()
            .map(|o| StepTrace {
                s_r: g.tape.scalar(o.selection.s_r),
                s_sg: g.tape.scalar(o.selection.s_sg),
                a_r: values(&g.tape, o.selection.a_r),
                a_sg: values(&g.tape, o.selection.a_sg),
            })
            .collect();
        Generated {
            tokens: best.tokens,
            steps,
            last_h2: best.state.h2,
            outputs: best.outputs,
            log_prob: best.log_prob,
        }
    }
}

/// `L(S)`: summed gold-token negative log-likelihood plus `lambda_m L(M)`.
pub fn caption_loss(tape: &mut Tape, probs: &[Var], gold: &[usize], mapping: Option<Var>, lambda_m: f64) -> Var {
    let lps: Vec<Var> = probs
        .iter()
        .zip(gold)
        .map(|(&p, &y)| {
            let py = tape.pick(p, y);
            tape.log(py)
        })
        .collect();
    let s = tape.add_all(&lps);
    let nll = tape.scale(s, -1.0);
    match mapping {
        Some(m) => {
            let wm = tape.scale(m, lambda_m);
            tape.add(nll, wm)
        }
        None => nll,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> DecoderDims {
        DecoderDims {
            vocab: 9,
            word: 4,
            hidden: 5,
            att: 3,
            frame_dim: 4,
            global_dim: 6,
            region_dim: 4,
            n_objects: 3,
            unified: 4,
            max_len: 20,
        }
    }

    fn setup(seed: u64) -> (ParamStore, Decoder, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::register(&mut store, &mut rng, dims());
        (store, dec, rng)
    }

    fn regions(rng: &mut ChaCha8Rng, n: usize) -> Vec<Region> {
        (0..n)
            .map(|i| Region {
                feature: init_weight(rng, 4, 1).into_vec(),
                bbox: BBox::new(0.1 * i as f64, 0.1, 0.1 * i as f64 + 0.3, 0.5),
                frame: 0,
                class_scores: vec![0.2, 0.3, 0.5],
            })
            .collect()
    }

    fn vals(g: &Graph, v: Var) -> Vec<f64> {
        g.tape.value(v).as_slice().to_vec()
    }

    #[test]
    fn zero_lstm1_gives_zero_hidden() {
        let (mut store, dec, _) = setup(0);
        store.set(dec.lstm1.w, Tensor::zeros(20, 5 + 6 + 4 + 5));
        let mut g = Graph::new(&store);
        let s = dec.zero_state(&mut g);
        let global = g.tape.constant_vector(&[1.0; 6]);
        let (h1, _) = dec.step_layer1(&mut g, &s, global, 3);
        assert!(vals(&g, h1).iter().all(|&x| x == 0.0));
        let (h1b, _) = dec.step_layer1(&mut g, &s, global, 3);
        assert_eq!(vals(&g, h1), vals(&g, h1b));
    }

    #[test]
    fn temporal_attention_cases() {
        let (store, dec, mut rng) = setup(1);
        let mut g = Graph::new(&store);
        let h1 = g.constant(init_weight(&mut rng, 5, 1));
        let one = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let (_, f) = dec.temporal_attention(&mut g, h1, one);
        assert_eq!(vals(&g, f), vec![1.0, 2.0, 3.0, 4.0]);
        let same = g.constant(Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0, 0.0]; 3]));
        let (w, f) = dec.temporal_attention(&mut g, h1, same);
        for (a, b) in vals(&g, f).iter().zip([0.5, -1.0, 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((vals(&g, w).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_value_and_output_keep_augmented_input() {
        let (mut store, dec, mut rng) = setup(2);
        store.set(dec.self_attention.wv, Tensor::zeros(3, 12));
        store.set(dec.self_attention.wo, Tensor::zeros(12, 3));
        let rs = regions(&mut rng, 3);
        let mut g = Graph::new(&store);
        let out = dec.augment_regions(&mut g, &rs);
        assert_eq!(g.tape.value(out), &augmented_region_matrix(&rs));
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let (store, dec, mut rng) = setup(3);
        let rs = regions(&mut rng, 4);
        let mut perm = rs.clone();
        perm.reverse();
        let mut g = Graph::new(&store);
        let a = dec.augment_regions(&mut g, &rs);
        let b = dec.augment_regions(&mut g, &perm);
        let (ta, tb) = (g.tape.value(a).clone(), g.tape.value(b).clone());
        for i in 0..4 {
            for (x, y) in ta.row(i).iter().zip(tb.row(3 - i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_cases() {
        let (mut store, dec, mut rng) = setup(4);
        let rs = regions(&mut rng, 1);
        let mut g = Graph::new(&store);
        let h1 = g.constant(init_weight(&mut rng, 5, 1));
        let r = dec.augment_regions(&mut g, &rs);
        let u = g.tape.leaf(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.1, 0.9]; 3]));
        let sel = dec.select(&mut g, h1, r, u, GateOverride::None);
        assert_eq!(vals(&g, sel.a_r), vec![1.0]);
        assert_eq!(vals(&g, sel.r_hat), g.tape.value(r).as_slice().to_vec());
        for (a, b) in vals(&g, sel.u_hat).iter().zip([0.3, -0.2, 0.1, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum = g.tape.scalar(sel.s_r) + g.tape.scalar(sel.s_sg);
        assert!((sum - 1.0).abs() < 1e-12);
        drop(g);
        for s in [dec.gate_regions, dec.gate_graph] {
            let (r, c) = store.get(s.v).shape();
            store.set(s.v, Tensor::zeros(r, c));
        }
        let mut g = Graph::new(&store);
        let h1 = g.constant(init_weight(&mut rng, 5, 1));
        let r = dec.augment_regions(&mut g, &rs);
        let u = g.tape.leaf(init_weight(&mut rng, 3, 4));
        let sel = dec.select(&mut g, h1, r, u, GateOverride::None);
        assert_eq!(g.tape.scalar(sel.s_r), 0.5);
        assert_eq!(g.tape.scalar(sel.s_sg), 0.5);
    }

    #[test]
    fn zero_graph_gate_ignores_u_hat() {
        let (store, dec, mut rng) = setup(5);
        let rs = regions(&mut rng, 3);
        let mut g = Graph::new(&store);
        let s = dec.zero_state(&mut g);
        let h1 = g.constant(init_weight(&mut rng, 5, 1));
        let f = g.constant(init_weight(&mut rng, 4, 1));
        let r = dec.augment_regions(&mut g, &rs);
        let u1 = g.tape.leaf(init_weight(&mut rng, 3, 4));
        let u2 = g.tape.leaf(init_weight(&mut rng, 3, 4));
        let s1 = dec.select(&mut g, h1, r, u1, GateOverride::ZeroGraph);
        let s2 = dec.select(&mut g, h1, r, u2, GateOverride::ZeroGraph);
        let (a, _) = dec.step_layer2(&mut g, &s, h1, f, &s1);
        let (b, _) = dec.step_layer2(&mut g, &s, h1, f, &s2);
        assert_eq!(vals(&g, a), vals(&g, b));
    }

    #[test]
    fn word_distribution_cases() {
        let (mut store, dec, mut rng) = setup(6);
        let mut g = Graph::new(&store);
        let h2 = g.constant(init_weight(&mut rng, 5, 1));
        let p = dec.word_distribution(&mut g, h2);
        assert!((vals(&g, p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        drop(g);
        store.set(dec.w_hy, Tensor::zeros(9, 5));
        let mut g = Graph::new(&store);
        let h2 = g.constant(init_weight(&mut rng, 5, 1));
        let p = dec.word_distribution(&mut g, h2);
        assert!(vals(&g, p).iter().all(|&x| (x - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn caption_loss_uniform_closed_form() {
        let mut tape = Tape::new();
        let probs: Vec<Var> = (0..3).map(|_| tape.constant_vector(&[0.25; 4])).collect();
        let l = caption_loss(&mut tape, &probs, &[0, 2, 3], None, 1.0);
        assert!((tape.scalar(l) - 3.0 * 4f64.ln()).abs() < 1e-12);
        let one: Vec<Var> = (0..2).map(|_| tape.constant_vector(&[0.0, 1.0])).collect();
        let m = tape.constant_vector(&[0.5]);
        let l = caption_loss(&mut tape, &one, &[1, 1], Some(m), 0.0);
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn context_updates_once_per_sentence_and_carries_h2() {
        let (store, dec, mut rng) = setup(7);
        let mut g = Graph::new(&store);
        let refined = PooledGraphRepr::constant(&mut g, &[vec![0.1; 4], vec![0.2; 4], vec![-0.3; 4]]);
        let mut ctx = dec.zero_context(&mut g);
        let first = dec.sentence_start(&mut g, None, &mut ctx, &refined);
        assert_eq!(ctx.updates, 0);
        assert!(vals(&g, first.h1).iter().all(|&x| x == 0.0));
        let h2a = g.constant(init_weight(&mut rng, 5, 1));
        let h2b = g.constant(init_weight(&mut rng, 5, 1));
        let mut ctx_b = ctx;
        let xa = dec.init_next_sentence(&mut g, h2a, &mut ctx, &refined);
        let xb = dec.init_next_sentence(&mut g, h2b, &mut ctx_b, &refined);
        assert_eq!(ctx.updates, 1);
        assert_ne!(vals(&g, xa), vals(&g, xb));
    }

    fn toy_clip(rng: &mut ChaCha8Rng) -> Clip {
        Clip {
            id: "c".into(),
            frame_features: vec![init_weight(rng, 4, 1).into_vec(), init_weight(rng, 4, 1).into_vec()],
            global_rep: init_weight(rng, 6, 1).into_vec(),
            regions: regions(rng, 3),
            frame_graphs: vec![],
            sentence: vec![4, 5, 6],
            annotations: vec![],
            language_graph: crate::scene_graph::SceneGraph::language(),
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_max_len_one() {
        let (store, dec, mut rng) = setup(8);
        let clip = toy_clip(&mut rng);
        let mut g = Graph::new(&store);
        let refined = PooledGraphRepr::constant(&mut g, &[vec![0.1; 4], vec![0.2; 4], vec![-0.3; 4]]);
        let inputs = dec.prepare(&mut g, &clip, refined);
        let start = dec.zero_state(&mut g);
        let greedy = dec.generate(&mut g, &inputs, start, DecodeMode::Greedy, 20, GateOverride::None);
        let beam1 = dec.generate(&mut g, &inputs, start, DecodeMode::Beam(1), 20, GateOverride::None);
        assert_eq!(greedy.tokens, beam1.tokens);
        assert!(greedy.tokens.len() <= 20);
        assert_eq!(greedy.steps.len(), greedy.outputs.len());

        let one = dec.generate(&mut g, &inputs, start, DecodeMode::Greedy, 1, GateOverride::None);
        let first = dec.step(&mut g, &inputs, &start, BOS, GateOverride::None);
        let best = crate::dataset::argmax(g.tape.value(first.probs).as_slice());
        assert_eq!(one.steps.len(), 1);
        if best == EOS {
            assert!(one.tokens.is_empty());
        } else {
            assert_eq!(one.tokens, vec![best]);
        }
        let beam3 = dec.generate(&mut g, &inputs, start, DecodeMode::Beam(3), 20, GateOverride::None);
        assert!(beam3.tokens.len() <= 20);
    }
}
