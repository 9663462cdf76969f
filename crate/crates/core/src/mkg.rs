//! Modulation knowledge graph: ontology, triple parsing, validation, the
//! heterogeneous graph, and initial node features.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Curated default graph covering the ten synthesized classes.
pub const DEFAULT_MKG: &str = include_str!("../assets/default_mkg.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum NodeType {
    ModulationMethod,
    ModulationType,
    Base,
    BandwidthLevel,
    Situation,
    ModulationTheory,
    CarrierType,
    DataType,
}

impl NodeType {
    pub const ALL: [NodeType; 8] = [
        NodeType::ModulationMethod,
        NodeType::ModulationType,
        NodeType::Base,
        NodeType::BandwidthLevel,
        NodeType::Situation,
        NodeType::ModulationTheory,
        NodeType::CarrierType,
        NodeType::DataType,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::ModulationMethod => "modulationMethod",
            NodeType::ModulationType => "modulationType",
            NodeType::Base => "base",
            NodeType::BandwidthLevel => "bandwidthLevel",
            NodeType::Situation => "situation",
            NodeType::ModulationTheory => "modulationTheory",
            NodeType::CarrierType => "carrierType",
            NodeType::DataType => "dataType",
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NodeType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "modualtionMethod" {
            return Ok(NodeType::ModulationMethod);
        }
        NodeType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown node type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RelationType {
    Possesses,
    IsBaseOf,
    HasBandwidthIn,
    Adopts,
    Includes,
    IsUsedIn,
    IsModulatedBy,
}

impl RelationType {
    pub const ALL: [RelationType; 7] = [
        RelationType::Possesses,
        RelationType::IsBaseOf,
        RelationType::HasBandwidthIn,
        RelationType::Adopts,
        RelationType::Includes,
        RelationType::IsUsedIn,
        RelationType::IsModulatedBy,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Possesses => "possesses",
            RelationType::IsBaseOf => "isBaseOf",
            RelationType::HasBandwidthIn => "hasBandwidthIn",
            RelationType::Adopts => "adopts",
            RelationType::Includes => "includes",
            RelationType::IsUsedIn => "isUsedIn",
            RelationType::IsModulatedBy => "isModulatedBy",
        }
    }

    /// The (head type, tail type) this relation may connect.
    pub fn signature(self) -> (NodeType, NodeType) {
        use NodeType::*;
        match self {
            RelationType::Possesses => (ModulationType, ModulationMethod),
            RelationType::IsBaseOf => (Base, ModulationMethod),
            RelationType::HasBandwidthIn => (BandwidthLevel, ModulationMethod),
            RelationType::Adopts => (Situation, ModulationMethod),
            RelationType::Includes => (ModulationTheory, ModulationType),
            RelationType::IsUsedIn => (CarrierType, ModulationType),
            RelationType::IsModulatedBy => (DataType, ModulationType),
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        RelationType::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown relation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Triple {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Parsed triple file: deduplicated triples in file order plus node types.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleSet {
    pub triples: Vec<Triple>,
    pub types: BTreeMap<String, NodeType>,
}

impl TripleSet {
    /// Adds a triple unless it is already present.
    pub fn insert(&mut self, t: Triple) -> bool {
        if self.triples.contains(&t) {
            return false;
        }
        self.triples.push(t);
        true
    }
}

/// Parses the TSV triple format.
///
/// Declarations are `@node<TAB>name<TAB>NodeType`, triples are
/// `head<TAB>relation<TAB>tail`, and `#` starts a comment. Declarations may
/// appear anywhere in the file.
pub fn parse_triples(text: &str) -> Result<TripleSet> {
    let mut set = TripleSet::default();
    let mut pending = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0] == "@node" {
            let ty: NodeType = fields[2].parse().map_err(|msg| Error::Parse { line: line_no, msg })?;
            if let Some(prev) = set.types.insert(fields[1].to_string(), ty) {
                if prev != ty {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("node `{}` declared as both {prev} and {ty}", fields[1]),
                    });
                }
            }
        } else {
            let relation: RelationType = fields[1].parse().map_err(|msg| Error::Parse { line: line_no, msg })?;
            pending.push((
                line_no,
                Triple {
                    head: fields[0].to_string(),
                    relation,
                    tail: fields[2].to_string(),
                },
            ));
        }
    }
    for (line, t) in pending {
        for name in [&t.head, &t.tail] {
            if !set.types.contains_key(name) {
                return Err(Error::Declaration {
                    line,
                    name: name.clone(),
                });
            }
        }
        set.insert(t);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub index: usize,
    pub triple: Triple,
    pub expected: (NodeType, NodeType),
    pub found: (Option<NodeType>, Option<NodeType>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |t: Option<NodeType>| t.map_or("undeclared".to_string(), |t| t.to_string());
        write!(
            f,
            "triple #{} {}: `{}` needs {} -> {}, got {} -> {}",
            self.index,
            self.triple,
            self.triple.relation,
            self.expected.0,
            self.expected.1,
            show(self.found.0),
            show(self.found.1)
        )
    }
}

/// Every triple whose endpoint types disagree with its relation signature.
pub fn validate_ontology(set: &TripleSet) -> Vec<Violation> {
    set.triples
        .iter()
        .enumerate()
        .filter_map(|(index, t)| {
            let expected = t.relation.signature();
            let found = (set.types.get(&t.head).copied(), set.types.get(&t.tail).copied());
            (found != (Some(expected.0), Some(expected.1))).then(|| Violation {
                index,
                triple: t.clone(),
                expected,
                found,
            })
        })
        .collect()
}

/// Typed directed multigraph built from validated triples.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    names: Vec<String>,
    types: Vec<NodeType>,
    index: HashMap<String, usize>,
    /// Per relation, `(head, tail)` node indices.
    edges: Vec<Vec<(usize, usize)>>,
    /// Row-major `a x a`, 1 iff some edge i -> j exists.
    adjacency: Vec<u8>,
}

impl HeteroGraph {
    /// Builds the graph; nodes are numbered in order of first appearance.
    /// Fails if any triple violates the ontology.
    pub fn build(set: &TripleSet) -> Result<Self> {
        if let Some(v) = validate_ontology(set).first() {
            return Err(Error::Config(format!("ontology violation: {v}")));
        }
        let mut g = HeteroGraph {
            names: Vec::new(),
            types: Vec::new(),
            index: HashMap::new(),
            edges: vec![Vec::new(); RelationType::ALL.len()],
            adjacency: Vec::new(),
        };
        let mut seen = HashSet::new();
        let mut pairs = Vec::new();
        for t in &set.triples {
            let h = g.intern(&t.head, set.types[&t.head]);
            let tl = g.intern(&t.tail, set.types[&t.tail]);
            if seen.insert((h, t.relation, tl)) {
                g.edges[t.relation.index()].push((h, tl));
                pairs.push((h, tl));
            }
        }
        let a = g.names.len();
        g.adjacency = vec![0; a * a];
        for (h, t) in pairs {
            g.adjacency[h * a + t] = 1;
        }
        Ok(g)
    }

    fn intern(&mut self, name: &str, ty: NodeType) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.types.push(ty);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    /// Assembles a graph directly from typed nodes and per-relation edge
    /// lists, without ontology checks. Intended for synthetic graphs.
    pub fn from_parts(names: Vec<String>, types: Vec<NodeType>, edges: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        let a = names.len();
        if types.len() != a || edges.len() != RelationType::ALL.len() {
            return Err(Error::Config("node/type/relation counts disagree".into()));
        }
        let mut adjacency = vec![0u8; a * a];
        let mut dedup = Vec::with_capacity(edges.len());
        for list in edges {
            let mut seen = HashSet::new();
            let mut kept = Vec::new();
            for (h, t) in list {
                if h >= a || t >= a {
                    return Err(Error::OutOfRange(format!("edge {h}->{t} with {a} nodes")));
                }
                if seen.insert((h, t)) {
                    adjacency[h * a + t] = 1;
                    kept.push((h, t));
                }
            }
            dedup.push(kept);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(HeteroGraph {
            names,
            types,
            index,
            edges: dedup,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.types
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn edges(&self, r: RelationType) -> &[(usize, usize)] {
        &self.edges[r.index()]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.node_count() + to] == 1
    }

    pub fn adjacency_row(&self, i: usize) -> &[u8] {
        let a = self.node_count();
        &self.adjacency[i * a..(i + 1) * a]
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.edges.iter().flatten().filter(|(h, _)| *h == i).count()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.edges.iter().flatten().filter(|(_, t)| *t == i).count()
    }

    /// Sources of edges into `i` under relation `r`, in edge order.
    pub fn in_neighbors(&self, r: RelationType, i: usize) -> Vec<usize> {
        self.edges[r.index()]
            .iter()
            .filter(|(_, t)| *t == i)
            .map(|(h, _)| *h)
            .collect()
    }

    /// Direction-blind neighbor sets, self loops excluded.
    pub fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let a = self.node_count();
        let mut nb = vec![Vec::new(); a];
        for (i, row) in nb.iter_mut().enumerate() {
            for j in 0..a {
                if i != j && (self.has_edge(i, j) || self.has_edge(j, i)) {
                    row.push(j);
                }
            }
        }
        nb
    }

    pub fn type_counts(&self) -> BTreeMap<NodeType, usize> {
        let mut m = BTreeMap::new();
        for &t in &self.types {
            *m.entry(t).or_insert(0) += 1;
        }
        m
    }

    pub fn relation_counts(&self) -> BTreeMap<RelationType, usize> {
        RelationType::ALL
            .into_iter()
            .map(|r| (r, self.edges[r.index()].len()))
            .collect()
    }
}

/// Width of the node feature row for an `a`-node graph.
pub fn feature_width(node_count: usize) -> usize {
    4 + NodeType::ALL.len() + node_count
}

/// Node features before scaling: first-order and second-order undirected
/// neighbor counts, out-degree, in-degree, node-type one-hot, adjacency row.
pub fn raw_node_features(g: &HeteroGraph) -> Tensor<f64> {
    let a = g.node_count();
    let b = feature_width(a);
    let nb = g.undirected_neighbors();
    let mut m = Tensor::zeros(&[a, b]);
    for i in 0..a {
        // nodes at undirected distance exactly 2
        let mut dist = vec![usize::MAX; a];
        dist[i] = 0;
        let mut queue = VecDeque::from([i]);
        while let Some(u) = queue.pop_front() {
            if dist[u] >= 2 {
                continue;
            }
            for &v in &nb[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let row = &mut m.data_mut()[i * b..(i + 1) * b];
        row[0] = nb[i].len() as f64;
        row[1] = dist.iter().filter(|&&d| d == 2).count() as f64;
        row[2] = g.out_degree(i) as f64;
        row[3] = g.in_degree(i) as f64;
        row[4 + g.types[i].index()] = 1.0;
        for (j, &e) in g.adjacency_row(i).iter().enumerate() {
            row[12 + j] = e as f64;
        }
    }
    m
}

/// Initial node features: [`raw_node_features`] with each of the four degree
/// columns min-max scaled to [0, 1] across nodes (constant columns map to 0).
pub fn init_node_features(g: &HeteroGraph) -> Result<Tensor<f64>> {
    if g.node_count() == 0 {
        return Err(Error::Empty("graph has no nodes"));
    }
    let mut m = raw_node_features(g);
    let (a, b) = (m.shape()[0], m.shape()[1]);
    for c in 0..4 {
        let col: Vec<f64> = (0..a).map(|i| m.data()[i * b + c]).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in col.into_iter().enumerate() {
            m.data_mut()[i * b + c] = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Ok(m)
}

/// Maps each class name to its modulationMethod node.
pub fn anchors(g: &HeteroGraph, classes: &[String]) -> Result<Vec<usize>> {
    classes
        .iter()
        .map(|c| match g.node_index(c) {
            Some(i) if g.types[i] == NodeType::ModulationMethod => Ok(i),
            Some(i) => Err(Error::Config(format!(
                "class `{c}` maps to a {} node, not modulationMethod",
                g.types[i]
            ))),
            None => Err(Error::Config(format!(
                "class `{c}` has no modulationMethod node in the graph"
            ))),
        })
        .collect()
}

/// Parses, validates and builds the shipped default graph.
pub fn default_graph() -> Result<HeteroGraph> {
    HeteroGraph::build(&parse_triples(DEFAULT_MKG)?)
}
