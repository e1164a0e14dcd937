//! Scene-graph data model shared by frame-level and language-level graphs,
//! structural validation, and a parser/renderer for the templated caption
//! grammar `(the)? ATTR* OBJ (REL (the)? ATTR* OBJ)?` joined by `and`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    Frame,
    Language,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectNode {
    pub label: usize,
    pub region: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeNode {
    pub label: usize,
    pub owner: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationNode {
    pub label: usize,
    pub subject: usize,
    pub object: usize,
}

/// Object, attribute and relation nodes. Nodes are identified by position,
/// so two objects with the same label are distinct instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGraph {
    pub source: GraphSource,
    pub frame_index: Option<usize>,
    pub objects: Vec<ObjectNode>,
    pub attributes: Vec<AttributeNode>,
    pub relations: Vec<RelationNode>,
}

impl SceneGraph {
    pub fn empty(source: GraphSource, frame_index: Option<usize>) -> Self {
        Self {
            source,
            frame_index,
            objects: Vec::new(),
            attributes: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn language() -> Self {
        Self::empty(GraphSource::Language, None)
    }

    pub fn frame(index: usize) -> Self {
        Self::empty(GraphSource::Frame, Some(index))
    }

    pub fn add_object(&mut self, label: usize, region: Option<usize>) -> usize {
        self.objects.push(ObjectNode { label, region });
        self.objects.len() - 1
    }

    pub fn add_attribute(&mut self, label: usize, owner: usize) {
        self.attributes.push(AttributeNode { label, owner });
    }

    pub fn add_relation(&mut self, label: usize, subject: usize, object: usize) {
        self.relations.push(RelationNode {
            label,
            subject,
            object,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.attributes.is_empty() && self.relations.is_empty()
    }

    /// `(subject label, relation label, object label)` per relation, in order.
    pub fn triplets(&self) -> Vec<(usize, usize, usize)> {
        self.relations
            .iter()
            .map(|r| {
                (
                    self.objects[r.subject].label,
                    r.label,
                    self.objects[r.object].label,
                )
            })
            .collect()
    }

    /// Every broken invariant, empty iff the graph is well formed.
    pub fn validate(&self, vocab: &LabelVocab, n_regions: Option<usize>) -> Vec<Violation> {
        use ViolationKind::*;
        let mut out = Vec::new();
        let n_obj = self.objects.len();
        match (self.source, self.frame_index) {
            (GraphSource::Frame, None) => out.push(Violation::new(MissingFrameIndex, 0)),
            (GraphSource::Language, Some(_)) => out.push(Violation::new(UnexpectedFrameIndex, 0)),
            _ => {}
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.label >= vocab.objects.len() {
                out.push(Violation::new(ObjectLabelOutOfRange, i));
            }
            if let Some(r) = o.region {
                if self.source == GraphSource::Language {
                    out.push(Violation::new(RegionOnLanguageGraph, i));
                } else if n_regions.is_some_and(|n| r >= n) {
                    out.push(Violation::new(RegionOutOfRange, i));
                }
            }
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.label >= vocab.attributes.len() {
                out.push(Violation::new(AttributeLabelOutOfRange, i));
            }
            if a.owner >= n_obj {
                out.push(Violation::new(DanglingOwner, i));
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.label >= vocab.relations.len() {
                out.push(Violation::new(RelationLabelOutOfRange, i));
            }
            if r.subject >= n_obj {
                out.push(Violation::new(DanglingSubject, i));
            }
            if r.object >= n_obj {
                out.push(Violation::new(DanglingObject, i));
            }
            if r.subject == r.object {
                out.push(Violation::new(SelfRelation, i));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    MissingFrameIndex,
    UnexpectedFrameIndex,
    ObjectLabelOutOfRange,
    RegionOnLanguageGraph,
    RegionOutOfRange,
    AttributeLabelOutOfRange,
    DanglingOwner,
    RelationLabelOutOfRange,
    DanglingSubject,
    DanglingObject,
    SelfRelation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Index of the offending node within its own node list.
    pub index: usize,
}

impl Violation {
    fn new(kind: ViolationKind, index: usize) -> Self {
        Self { kind, index }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ViolationKind::*;
        let i = self.index;
        match self.kind {
            MissingFrameIndex => write!(f, "frame graph without frame index"),
            UnexpectedFrameIndex => write!(f, "language graph with frame index"),
            ObjectLabelOutOfRange => write!(f, "object label out of range at object {i}"),
            RegionOnLanguageGraph => write!(f, "region reference on language graph at object {i}"),
            RegionOutOfRange => write!(f, "region index out of range at object {i}"),
            AttributeLabelOutOfRange => write!(f, "attribute label out of range at attribute {i}"),
            DanglingOwner => write!(f, "dangling owner at attribute {i}"),
            RelationLabelOutOfRange => write!(f, "relation label out of range at relation {i}"),
            DanglingSubject => write!(f, "dangling subject at relation {i}"),
            DanglingObject => write!(f, "dangling object at relation {i}"),
            SelfRelation => write!(f, "self-relation at relation {i}"),
        }
    }
}

/// The three disjoint label spaces.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelVocab {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
}

impl LabelVocab {
    pub fn object_id(&self, label: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == label)
    }

    pub fn attribute_id(&self, label: &str) -> Option<usize> {
        self.attributes.iter().position(|o| o == label)
    }

    pub fn relation_id(&self, label: &str) -> Option<usize> {
        self.relations.iter().position(|o| o == label)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty sentence")]
    Empty,
    #[error("token {position} ({token:?}) is not in the grammar vocabulary")]
    UnknownToken { position: usize, token: String },
    #[error("token {position} ({token:?}) is not allowed here: expected {expected}")]
    Unexpected {
        position: usize,
        token: String,
        expected: &'static str,
    },
    #[error("sentence ends after relation {token:?} at {position}: dangling relation")]
    DanglingRelation { position: usize, token: String },
    #[error("sentence ends before an object word")]
    Truncated,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("object {0} takes part in more than one relation")]
    SharedObject(usize),
    #[error("graph is not valid: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TokenClass {
    Det,
    Conj,
    Attr(usize),
    Obj(usize),
    Rel(usize),
}

/// Word classes of the templated caption grammar.
#[derive(Clone, Debug)]
pub struct TemplateGrammar {
    pub labels: LabelVocab,
    pub determiner: String,
    pub conjunction: String,
    lookup: HashMap<String, TokenClass>,
}

impl TemplateGrammar {
    pub const DETERMINER: &'static str = "the";
    pub const CONJUNCTION: &'static str = "and";

    pub fn new(labels: LabelVocab) -> Self {
        let mut lookup = HashMap::new();
        lookup.insert(Self::DETERMINER.to_string(), TokenClass::Det);
        lookup.insert(Self::CONJUNCTION.to_string(), TokenClass::Conj);
        for (i, w) in labels.attributes.iter().enumerate() {
            lookup.insert(w.clone(), TokenClass::Attr(i));
        }
        for (i, w) in labels.relations.iter().enumerate() {
            lookup.insert(w.clone(), TokenClass::Rel(i));
        }
        for (i, w) in labels.objects.iter().enumerate() {
            lookup.insert(w.clone(), TokenClass::Obj(i));
        }
        Self {
            labels,
            determiner: Self::DETERMINER.to_string(),
            conjunction: Self::CONJUNCTION.to_string(),
            lookup,
        }
    }

    fn classify(&self, position: usize, token: &str) -> Result<TokenClass, ParseError> {
        self.lookup
            .get(token)
            .copied()
            .ok_or_else(|| ParseError::UnknownToken {
                position,
                token: token.to_string(),
            })
    }

    /// Object label of an object word, if it is one.
    pub fn object_of(&self, token: &str) -> Option<usize> {
        match self.lookup.get(token) {
            Some(TokenClass::Obj(i)) => Some(*i),
            _ => None,
        }
    }

    /// Parses a conforming token sequence into a language scene graph.
    pub fn parse_caption<S: AsRef<str>>(&self, tokens: &[S]) -> Result<SceneGraph, ParseError> {
        if tokens.is_empty() {
            return Err(ParseError::Empty);
        }
        let classes = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| self.classify(i, t.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut graph = SceneGraph::language();
        let mut pos = 0;
        loop {
            let subject = self.parse_np(tokens, &classes, &mut pos, &mut graph)?;
            if pos < classes.len() {
                if let TokenClass::Rel(rel) = classes[pos] {
                    let rel_pos = pos;
                    pos += 1;
                    if pos == classes.len() {
                        return Err(ParseError::DanglingRelation {
                            position: rel_pos,
                            token: tokens[rel_pos].as_ref().to_string(),
                        });
                    }
                    let object = self.parse_np(tokens, &classes, &mut pos, &mut graph)?;
                    graph.add_relation(rel, subject, object);
                }
            }
            if pos == classes.len() {
                return Ok(graph);
            }
            match classes[pos] {
                TokenClass::Conj if pos + 1 < classes.len() => pos += 1,
                TokenClass::Conj => return Err(ParseError::Truncated),
                TokenClass::Rel(_) => {
                    // a relation directly after a completed triplet has no object
                    let at_end = pos + 1 == classes.len();
                    return Err(if at_end {
                        ParseError::DanglingRelation {
                            position: pos,
                            token: tokens[pos].as_ref().to_string(),
                        }
                    } else {
                        ParseError::Unexpected {
                            position: pos,
                            token: tokens[pos].as_ref().to_string(),
                            expected: "\"and\" or end of sentence",
                        }
                    });
                }
                _ => {
                    return Err(ParseError::Unexpected {
                        position: pos,
                        token: tokens[pos].as_ref().to_string(),
                        expected: "\"and\" or end of sentence",
                    })
                }
            }
        }
    }

    /// `(the)? ATTR* OBJ`; returns the new object index.
    fn parse_np<S: AsRef<str>>(
        &self,
        tokens: &[S],
        classes: &[TokenClass],
        pos: &mut usize,
        graph: &mut SceneGraph,
    ) -> Result<usize, ParseError> {
        if *pos < classes.len() && classes[*pos] == TokenClass::Det {
            *pos += 1;
        }
        let mut attrs = Vec::new();
        while *pos < classes.len() {
            match classes[*pos] {
                TokenClass::Attr(a) => {
                    attrs.push(a);
                    *pos += 1;
                }
                TokenClass::Obj(o) => {
                    *pos += 1;
                    let idx = graph.add_object(o, None);
                    for a in attrs {
                        graph.add_attribute(a, idx);
                    }
                    return Ok(idx);
                }
                _ => {
                    return Err(ParseError::Unexpected {
                        position: *pos,
                        token: tokens[*pos].as_ref().to_string(),
                        expected: "attribute or object word",
                    })
                }
            }
        }
        Err(ParseError::Truncated)
    }

    /// Renders a graph as a caption: one clause per relation, in order,
    /// followed by the objects that take part in no relation.
    pub fn render(&self, graph: &SceneGraph) -> Result<Vec<String>, RenderError> {
        let violations = graph.validate(&self.labels, None);
        let structural: Vec<_> = violations
            .iter()
            .filter(|v| {
                !matches!(
                    v.kind,
                    ViolationKind::MissingFrameIndex | ViolationKind::UnexpectedFrameIndex
                )
            })
            .collect();
        if let Some(v) = structural.first() {
            return Err(RenderError::Invalid(v.to_string()));
        }
        let mut uses = vec![0usize; graph.objects.len()];
        for r in &graph.relations {
            uses[r.subject] += 1;
            uses[r.object] += 1;
        }
        if let Some(i) = uses.iter().position(|&u| u > 1) {
            return Err(RenderError::SharedObject(i));
        }
        let mut clauses: Vec<Vec<String>> = Vec::new();
        for r in &graph.relations {
            let mut c = self.render_np(graph, r.subject);
            c.push(self.labels.relations[r.label].clone());
            c.extend(self.render_np(graph, r.object));
            clauses.push(c);
        }
        for (i, &u) in uses.iter().enumerate() {
            if u == 0 {
                clauses.push(self.render_np(graph, i));
            }
        }
        let mut out = Vec::new();
        for (k, c) in clauses.into_iter().enumerate() {
            if k > 0 {
                out.push(self.conjunction.clone());
            }
            out.extend(c);
        }
        Ok(out)
    }

    fn render_np(&self, graph: &SceneGraph, obj: usize) -> Vec<String> {
        let mut np = vec![self.determiner.clone()];
        np.extend(
            graph
                .attributes
                .iter()
                .filter(|a| a.owner == obj)
                .map(|a| self.labels.attributes[a.label].clone()),
        );
        np.push(self.labels.objects[graph.objects[obj].label].clone());
        np
    }
}

// JSON form: labels are strings, node references are positional indices.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectJson {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeJson {
    pub label: String,
    pub owner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationJson {
    pub label: String,
    pub subject: usize,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraphJson {
    pub source: GraphSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<usize>,
    pub objects: Vec<ObjectJson>,
    pub attributes: Vec<AttributeJson>,
    pub relations: Vec<RelationJson>,
}

/// Where a JSON label failed to resolve, relative to the graph object.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown {kind} label {label:?} at {path}")]
pub struct UnknownLabel {
    pub kind: &'static str,
    pub label: String,
    pub path: String,
}

impl SceneGraphJson {
    pub fn from_graph(graph: &SceneGraph, vocab: &LabelVocab) -> Self {
        Self {
            source: graph.source,
            frame_index: graph.frame_index,
            objects: graph
                .objects
                .iter()
                .map(|o| ObjectJson {
                    label: vocab.objects[o.label].clone(),
                    region: o.region,
                })
                .collect(),
            attributes: graph
                .attributes
                .iter()
                .map(|a| AttributeJson {
                    label: vocab.attributes[a.label].clone(),
                    owner: a.owner,
                })
                .collect(),
            relations: graph
                .relations
                .iter()
                .map(|r| RelationJson {
                    label: vocab.relations[r.label].clone(),
                    subject: r.subject,
                    object: r.object,
                })
                .collect(),
        }
    }

    pub fn to_graph(&self, vocab: &LabelVocab) -> Result<SceneGraph, UnknownLabel> {
        let unknown = |kind, label: &str, path: String| UnknownLabel {
            kind,
            label: label.to_string(),
            path,
        };
        let mut g = SceneGraph::empty(self.source, self.frame_index);
        for (i, o) in self.objects.iter().enumerate() {
            let id = vocab
                .object_id(&o.label)
                .ok_or_else(|| unknown("object", &o.label, format!("objects[{i}].label")))?;
            g.add_object(id, o.region);
        }
        for (i, a) in self.attributes.iter().enumerate() {
            let id = vocab
                .attribute_id(&a.label)
                .ok_or_else(|| unknown("attribute", &a.label, format!("attributes[{i}].label")))?;
            g.add_attribute(id, a.owner);
        }
        for (i, r) in self.relations.iter().enumerate() {
            let id = vocab
                .relation_id(&r.label)
                .ok_or_else(|| unknown("relation", &r.label, format!("relations[{i}].label")))?;
            g.add_relation(id, r.subject, r.object);
        }
        Ok(g)
    }
}
