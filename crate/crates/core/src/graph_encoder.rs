//! Role-aware graph convolutions over scene graphs, MFB fusion of region
//! features into object embeddings, per-type pooling and the visual to
//! language mapping.
//!
//! Every block computes `relu(W [inputs] + b)` with output size `u`. An
//! object's embedding averages the subject-role and object-role block
//! outputs of its incident triplets; objects without relations use their own
//! block. Attribute rows are scaled by `1 / T` where `T` is the owner's
//! attribute count.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::dataset::Region;
use crate::layers::Dense;
use crate::params::{gaussian, init_weight, Graph, ParamId, ParamStore};
use crate::scene_graph::SceneGraph;

#[derive(Debug, Error, PartialEq)]
#[error("dimension mismatch in {what}: expected {expected}, found {found}")]
pub struct DimensionError {
    pub what: &'static str,
    pub expected: String,
    pub found: String,
}

/// Label tables `e^o`, `e^a`, `e^r`, one row per label.
#[derive(Clone, Copy, Debug)]
pub struct LabelEmbeddings {
    pub object_table: ParamId,
    pub attribute_table: ParamId,
    pub relation_table: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GcnParams {
    pub subject: Dense,
    pub object: Dense,
    pub attribute: Dense,
    pub relation: Dense,
    pub isolated: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct MfbParams {
    /// `k*e x d_r`
    pub px: ParamId,
    /// `k*e x e`
    pub py: ParamId,
    pub k: usize,
}

/// One graph side: its embeddings, convolutions and (visual side only) MFB.
#[derive(Clone, Copy, Debug)]
pub struct GraphSide {
    pub embeddings: LabelEmbeddings,
    pub gcn: GcnParams,
    pub mfb: Option<MfbParams>,
}

/// Two-layer perceptron `W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Dense,
    pub second: Dense,
}

impl Mlp {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.first.relu(g, x);
        self.second.apply(g, h)
    }
}

/// Per-node embeddings of one graph (`u x 1` each).
#[derive(Clone, Debug, Default)]
pub struct NodeEmbeddings {
    pub u_obj: Vec<Var>,
    pub u_att: Vec<Var>,
    pub u_rel: Vec<Var>,
}

/// Per-type summaries `(obj, att, rel)`, each `u x 1`.
#[derive(Clone, Copy, Debug)]
pub struct PooledGraphRepr {
    pub obj: Var,
    pub att: Var,
    pub rel: Var,
}

impl PooledGraphRepr {
    pub fn parts(&self) -> [Var; 3] {
        [self.obj, self.att, self.rel]
    }

    pub fn values(&self, tape: &Tape) -> [Vec<f64>; 3] {
        self.parts().map(|v| tape.value(v).as_slice().to_vec())
    }

    pub fn constant(g: &mut Graph, values: &[Vec<f64>; 3]) -> Self {
        let [o, a, r] = values.clone().map(|v| g.tape.constant_vector(&v));
        Self { obj: o, att: a, rel: r }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
    pub embed: usize,
    pub unified: usize,
    pub region_dim: usize,
    pub mfb_k: usize,
}

/// Language-side and visual-side encoders plus the mapping MLPs.
#[derive(Clone, Copy, Debug)]
pub struct GraphEncoder {
    pub dims: EncoderDims,
    pub language: GraphSide,
    pub visual: GraphSide,
    /// One mapping per node type.
    pub mapping: [Mlp; 3],
}

pub const LANGUAGE_PREFIX: &str = "graph_encoder.language.";

fn register_side<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    d: &EncoderDims,
    with_mfb: bool,
) -> GraphSide {
    let (e, u) = (d.embed, d.unified);
    let mut table = |kind: &str, rows: usize| {
        store.register(format!("{name}.emb.{kind}"), gaussian(rng, rows, e, 1.0))
    };
    let embeddings = LabelEmbeddings {
        object_table: table("objects", d.n_objects),
        attribute_table: table("attributes", d.n_attributes),
        relation_table: table("relations", d.n_relations),
    };
    let gcn = GcnParams {
        subject: Dense::register(store, rng, &format!("{name}.gcn.subject"), u, 3 * e),
        object: Dense::register(store, rng, &format!("{name}.gcn.object"), u, 3 * e),
        attribute: Dense::register(store, rng, &format!("{name}.gcn.attribute"), u, 2 * e),
        relation: Dense::register(store, rng, &format!("{name}.gcn.relation"), u, 3 * e),
        isolated: Dense::register(store, rng, &format!("{name}.gcn.isolated"), u, e),
    };
    let mfb = with_mfb.then(|| MfbParams {
        px: store.register(format!("{name}.mfb.px"), init_weight(rng, d.mfb_k * e, d.region_dim)),
        py: store.register(format!("{name}.mfb.py"), init_weight(rng, d.mfb_k * e, e)),
        k: d.mfb_k,
    });
    GraphSide { embeddings, gcn, mfb }
}

impl GraphEncoder {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, dims: EncoderDims) -> Self {
        let language = register_side(store, rng, "graph_encoder.language", &dims, false);
        let visual = register_side(store, rng, "graph_encoder.visual", &dims, true);
        let u = dims.unified;
        let mapping = ["obj", "att", "rel"].map(|t| Mlp {
            first: Dense::register(store, rng, &format!("graph_encoder.mapping.{t}.first"), u, u),
            second: Dense::register(store, rng, &format!("graph_encoder.mapping.{t}.second"), u, u),
        });
        Self {
            dims,
            language,
            visual,
            mapping,
        }
    }

    /// Node embeddings of one graph. Objects with a region index use the
    /// MFB fusion of region feature and label embedding when the side has
    /// MFB parameters.
    pub fn encode(
        &self,
        g: &mut Graph,
        side: &GraphSide,
        graph: &SceneGraph,
        regions: &[Region],
    ) -> NodeEmbeddings {
        let emb = &side.embeddings;
        let e_obj: Vec<Var> = graph
            .objects
            .iter()
            .map(|o| {
                let label = g.lookup(emb.object_table, o.label);
                match (side.mfb, o.region) {
                    (Some(mfb), Some(r)) => {
                        let x = g.tape.constant_vector(&regions[r].feature);
                        let px = g.param(mfb.px);
                        let py = g.param(mfb.py);
                        mfb_fuse(&mut g.tape, x, label, px, py, mfb.k)
                    }
                    _ => label,
                }
            })
            .collect();
        encode_nodes(g, &side.gcn, emb, graph, &e_obj)
    }

    /// Pooled language representation `u^L` of a language graph.
    pub fn language_repr(&self, g: &mut Graph, graph: &SceneGraph) -> PooledGraphRepr {
        let nodes = self.encode(g, &self.language, graph, &[]);
        pool_graphs(&mut g.tape, &[nodes], self.dims.unified)
    }

    /// Pooled visual representation `u^F` over all frame graphs of a clip.
    pub fn visual_repr(
        &self,
        g: &mut Graph,
        graphs: &[SceneGraph],
        regions: &[Region],
    ) -> PooledGraphRepr {
        let nodes: Vec<NodeEmbeddings> = graphs
            .iter()
            .map(|fg| self.encode(g, &self.visual, fg, regions))
            .collect();
        pool_graphs(&mut g.tape, &nodes, self.dims.unified)
    }

    /// Refined representation: one MLP per node type.
    pub fn map_visual_to_language(&self, g: &mut Graph, pooled: &PooledGraphRepr) -> PooledGraphRepr {
        let [o, a, r] = pooled.parts();
        PooledGraphRepr {
            obj: self.mapping[0].apply(g, o),
            att: self.mapping[1].apply(g, a),
            rel: self.mapping[2].apply(g, r),
        }
    }
}

/// Applies the convolution blocks given per-object input embeddings.
pub fn encode_nodes(
    g: &mut Graph,
    gcn: &GcnParams,
    emb: &LabelEmbeddings,
    graph: &SceneGraph,
    e_obj: &[Var],
) -> NodeEmbeddings {
    let n = graph.objects.len();
    let mut incident: Vec<Vec<Var>> = vec![Vec::new(); n];
    let mut u_rel = Vec::with_capacity(graph.relations.len());
    for rel in &graph.relations {
        let er = g.lookup(emb.relation_table, rel.label);
        let triple = g.tape.concat(&[e_obj[rel.subject], er, e_obj[rel.object]]);
        let as_subject = gcn.subject.relu(g, triple);
        let as_object = gcn.object.relu(g, triple);
        incident[rel.subject].push(as_subject);
        incident[rel.object].push(as_object);
        u_rel.push(gcn.relation.relu(g, triple));
    }
    let u_obj = incident
        .iter()
        .enumerate()
        .map(|(j, outs)| {
            if outs.is_empty() {
                gcn.isolated.relu(g, e_obj[j])
            } else {
                let s = g.tape.add_all(outs);
                g.tape.scale(s, 1.0 / outs.len() as f64)
            }
        })
        .collect();
    let mut counts = vec![0usize; n];
    for a in &graph.attributes {
        counts[a.owner] += 1;
    }
    let u_att = graph
        .attributes
        .iter()
        .map(|a| {
            let ea = g.lookup(emb.attribute_table, a.label);
            let pair = g.tape.concat(&[e_obj[a.owner], ea]);
            let out = gcn.attribute.relu(g, pair);
            g.tape.scale(out, 1.0 / counts[a.owner] as f64)
        })
        .collect();
    NodeEmbeddings { u_obj, u_att, u_rel }
}

/// `normalize(signed_sqrt(sum_pool_k((P_x x) * (P_y y))))`.
pub fn mfb_fuse(tape: &mut Tape, x: Var, y: Var, px: Var, py: Var, k: usize) -> Var {
    let a = tape.matmul(px, x);
    let b = tape.matmul(py, y);
    let z = tape.mul(a, b);
    let pooled = tape.sum_pool(z, k);
    let s = tape.signed_sqrt(pooled);
    tape.l2_normalize(s)
}

/// [`mfb_fuse`] with shape validation.
pub fn mfb_fuse_checked(
    tape: &mut Tape,
    x: Var,
    y: Var,
    px: Var,
    py: Var,
    k: usize,
) -> Result<Var, DimensionError> {
    let (pxr, pxc) = tape.shape(px);
    let (pyr, pyc) = tape.shape(py);
    let xs = tape.shape(x);
    let ys = tape.shape(y);
    if k == 0 || pxr != pyr || pxr % k != 0 || xs != (pxc, 1) || ys != (pyc, 1) {
        return Err(DimensionError {
            what: "mfb_fuse",
            expected: format!("x {pxc}x1, y {pyc}x1, equal projection rows divisible by k={k}"),
            found: format!("x {xs:?}, y {ys:?}, projections {pxr}x{pxc} and {pyr}x{pyc}"),
        });
    }
    Ok(mfb_fuse(tape, x, y, px, py, k))
}

/// Mean over every row of each node type across graphs; empty types give
/// the zero vector.
pub fn pool_graphs(tape: &mut Tape, graphs: &[NodeEmbeddings], u: usize) -> PooledGraphRepr {
    let mut pool = |pick: fn(&NodeEmbeddings) -> &Vec<Var>| {
        let rows: Vec<Var> = graphs.iter().flat_map(|n| pick(n).iter().copied()).collect();
        if rows.is_empty() {
            tape.zeros(u, 1)
        } else {
            let s = tape.add_all(&rows);
            tape.scale(s, 1.0 / rows.len() as f64)
        }
    };
    PooledGraphRepr {
        obj: pool(|n| &n.u_obj),
        att: pool(|n| &n.u_att),
        rel: pool(|n| &n.u_rel),
    }
}

/// `L(M)`: mean squared difference over all `3u` components.
pub fn mapping_loss(
    tape: &mut Tape,
    a: &PooledGraphRepr,
    b: &PooledGraphRepr,
) -> Result<Var, DimensionError> {
    let sa: Vec<_> = a.parts().iter().map(|&v| tape.shape(v)).collect();
    let sb: Vec<_> = b.parts().iter().map(|&v| tape.shape(v)).collect();
    if sa != sb {
        return Err(DimensionError {
            what: "mapping_loss",
            expected: format!("{sa:?}"),
            found: format!("{sb:?}"),
        });
    }
    let va = tape.concat(&a.parts());
    let vb = tape.concat(&b.parts());
    let n = tape.value(va).len();
    let d = tape.sub(va, vb);
    let sq = tape.mul(d, d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::SceneGraph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> EncoderDims {
        EncoderDims {
            n_objects: 5,
            n_attributes: 4,
            n_relations: 3,
            embed: 6,
            unified: 4,
            region_dim: 7,
            mfb_k: 2,
        }
    }

    fn setup(seed: u64) -> (ParamStore, GraphEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = GraphEncoder::register(&mut store, &mut rng, dims());
        (store, enc)
    }

    fn zero_side(store: &mut ParamStore, prefix: &str) {
        let ids: Vec<_> = store.with_prefix(prefix).collect();
        for id in ids {
            if store.name(id).contains(".gcn.") {
                let (r, c) = store.get(id).shape();
                store.set(id, Tensor::zeros(r, c));
            }
        }
    }

    fn vals(g: &Graph, v: Var) -> Vec<f64> {
        g.tape.value(v).as_slice().to_vec()
    }

    #[test]
    fn mfb_identity_one_hot() {
        let mut tape = Tape::new();
        let x = tape.constant_vector(&[0.0, 1.0, 0.0]);
        let y = tape.constant_vector(&[0.0, 1.0, 0.0]);
        let i = tape.leaf(Tensor::identity(3));
        let out = mfb_fuse(&mut tape, x, y, i, i, 1);
        let v = tape.value(out).as_slice();
        assert!((v[1] - 1.0).abs() < 1e-12 && v[0] == 0.0 && v[2] == 0.0);
    }

    #[test]
    fn mfb_zero_input_and_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let px = tape.leaf(init_weight(&mut rng, 8, 5));
        let py = tape.leaf(init_weight(&mut rng, 8, 3));
        let zero = tape.constant_vector(&[0.0; 5]);
        let y = tape.leaf(init_weight(&mut rng, 3, 1));
        let out = mfb_fuse(&mut tape, zero, y, px, py, 2);
        assert!(tape.value(out).as_slice().iter().all(|&v| v == 0.0));
        let x = tape.leaf(init_weight(&mut rng, 5, 1));
        let out = mfb_fuse(&mut tape, x, y, px, py, 2);
        assert!((tape.value(out).norm_sq().sqrt() - 1.0).abs() < 1e-12);
        assert!(mfb_fuse_checked(&mut tape, y, x, px, py, 2).is_err());
        assert!(mfb_fuse_checked(&mut tape, x, y, px, py, 3).is_err());
    }

    #[test]
    fn zero_weights_give_zero_nodes() {
        let (mut store, enc) = setup(0);
        zero_side(&mut store, LANGUAGE_PREFIX);
        let mut sg = SceneGraph::language();
        let a = sg.add_object(0, None);
        let b = sg.add_object(1, None);
        sg.add_object(2, None);
        sg.add_relation(0, a, b);
        sg.add_attribute(1, a);
        let mut g = Graph::new(&store);
        let n = enc.encode(&mut g, &enc.language, &sg, &[]);
        for v in n.u_obj.iter().chain(&n.u_att).chain(&n.u_rel) {
            assert!(vals(&g, *v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn object_average_over_roles() {
        let (store, enc) = setup(1);
        let mut sg = SceneGraph::language();
        let j = sg.add_object(0, None);
        let k = sg.add_object(1, None);
        let l = sg.add_object(2, None);
        sg.add_relation(0, j, k);
        sg.add_relation(1, j, l);
        sg.add_relation(2, k, j);
        let mut g = Graph::new(&store);
        let n = enc.encode(&mut g, &enc.language, &sg, &[]);
        let got = vals(&g, n.u_obj[j]);

        // hand evaluation of the three block outputs
        let emb = |t: ParamId, r: usize| store.get(t).row(r).to_vec();
        let e = &enc.language.embeddings;
        let block = |d: &Dense, parts: &[Vec<f64>]| -> Vec<f64> {
            let x: Vec<f64> = parts.concat();
            let w = store.get(d.w);
            let b = store.get(d.b);
            (0..w.rows())
                .map(|r| (crate::tensor::dot(w.row(r), &x) + b.get(r, 0)).max(0.0))
                .collect()
        };
        let (o0, o1, o2) = (emb(e.object_table, 0), emb(e.object_table, 1), emb(e.object_table, 2));
        let g1 = block(&enc.language.gcn.subject, &[o0.clone(), emb(e.relation_table, 0), o1.clone()]);
        let g2 = block(&enc.language.gcn.subject, &[o0.clone(), emb(e.relation_table, 1), o2]);
        let g3 = block(&enc.language.gcn.object, &[o1, emb(e.relation_table, 2), o0]);
        for i in 0..4 {
            let want = (g1[i] + g2[i] + g3[i]) / 3.0;
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attribute_rows_scaled_by_owner_count() {
        let (store, enc) = setup(2);
        let mut one = SceneGraph::language();
        let o = one.add_object(0, None);
        one.add_attribute(1, o);
        let mut two = one.clone();
        two.add_attribute(2, o);
        let mut g = Graph::new(&store);
        let n1 = enc.encode(&mut g, &enc.language, &one, &[]);
        let n2 = enc.encode(&mut g, &enc.language, &two, &[]);
        let a = vals(&g, n1.u_att[0]);
        let b = vals(&g, n2.u_att[0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x / 2.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn relations_are_directed() {
        let (store, enc) = setup(3);
        let mut fwd = SceneGraph::language();
        let a = fwd.add_object(0, None);
        let b = fwd.add_object(1, None);
        let mut bwd = fwd.clone();
        fwd.add_relation(0, a, b);
        bwd.add_relation(0, b, a);
        let mut g = Graph::new(&store);
        let n1 = enc.encode(&mut g, &enc.language, &fwd, &[]);
        let n2 = enc.encode(&mut g, &enc.language, &bwd, &[]);
        assert_ne!(vals(&g, n1.u_rel[0]), vals(&g, n2.u_rel[0]));
    }

    #[test]
    fn pooling_cases() {
        let mut tape = Tape::new();
        let v = tape.constant_vector(&[1.0, -2.0]);
        let mv = tape.constant_vector(&[-1.0, 2.0]);
        let one = NodeEmbeddings {
            u_obj: vec![v],
            ..Default::default()
        };
        let p = pool_graphs(&mut tape, &[one.clone()], 2);
        assert_eq!(tape.value(p.obj).as_slice(), &[1.0, -2.0]);
        assert_eq!(tape.value(p.rel).as_slice(), &[0.0, 0.0]);
        let p2 = pool_graphs(&mut tape, &[one.clone(), one], 2);
        assert_eq!(tape.value(p2.obj).as_slice(), &[1.0, -2.0]);
        let sym = NodeEmbeddings {
            u_obj: vec![v, mv],
            ..Default::default()
        };
        let p3 = pool_graphs(&mut tape, &[sym], 2);
        assert_eq!(tape.value(p3.obj).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn mapping_loss_cases() {
        let mut tape = Tape::new();
        let mk = |t: &mut Tape, o: [f64; 2]| PooledGraphRepr {
            obj: t.constant_vector(&o),
            att: t.constant_vector(&[0.5, 0.5]),
            rel: t.constant_vector(&[-1.0, 2.0]),
        };
        let a = mk(&mut tape, [1.0, 0.0]);
        let b = mk(&mut tape, [0.0, 0.0]);
        let l = mapping_loss(&mut tape, &a, &b).unwrap();
        assert!((tape.scalar(l) - 1.0 / 6.0).abs() < 1e-15);
        let l0 = mapping_loss(&mut tape, &a, &a).unwrap();
        assert_eq!(tape.scalar(l0), 0.0);
        let c = PooledGraphRepr {
            obj: tape.constant_vector(&[1.0, 0.0, 0.0]),
            ..a
        };
        assert!(mapping_loss(&mut tape, &a, &c).is_err());
    }

    #[test]
    fn identity_mapping_passes_nonnegative_input() {
        let (mut store, enc) = setup(4);
        for m in &enc.mapping {
            store.set(m.first.w, Tensor::identity(4));
            store.set(m.second.w, Tensor::identity(4));
        }
        let mut g = Graph::new(&store);
        let x = PooledGraphRepr::constant(&mut g, &[vec![0.1, 0.2, 0.0, 3.0], vec![1.0; 4], vec![0.0; 4]]);
        let y = enc.map_visual_to_language(&mut g, &x);
        assert_eq!(y.values(&g.tape), x.values(&g.tape));
    }

    #[test]
    fn visual_side_fuses_region_features() {
        let (store, enc) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let region = |f: Vec<f64>| Region {
            feature: f,
            bbox: crate::bbox::BBox::new(0.0, 0.0, 0.5, 0.5),
            frame: 0,
            class_scores: vec![0.2; 5],
        };
        let regions = vec![
            region(init_weight(&mut rng, 7, 1).into_vec()),
            region(init_weight(&mut rng, 7, 1).into_vec()),
        ];
        let mut fg = SceneGraph::frame(0);
        fg.add_object(0, Some(0));
        let mut g = Graph::new(&store);
        let a = enc.visual_repr(&mut g, std::slice::from_ref(&fg), &regions);
        fg.objects[0].region = Some(1);
        let b = enc.visual_repr(&mut g, &[fg], &regions);
        assert_ne!(vals(&g, a.obj), vals(&g, b.obj));
    }
}
