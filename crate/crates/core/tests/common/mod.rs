//! Helpers shared by the integration test targets: random graphs, toy
//! models and independent reference implementations.
#![allow(dead_code)]

use std::collections::VecDeque;

use kgamc::mkg::{self, HeteroGraph, NodeType, RelationType};
use kgamc::msnet::{MsnetConfig, MsnetParams};
use kgamc::nn::{Tape, Tensor, Var};
use kgamc::rgcn::{RgcnConfig, RgcnParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar `sum_i w_i y_i` with fixed random weights, so every output element
/// contributes to the gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let n: usize = tape.shape(y).iter().product();
    let w = tape.constant(Tensor::from_fn(&[n, 1], |_| r.gen_range(-1.0..1.0)));
    let flat = tape.reshape(y, &[1, n]).unwrap();
    let s = tape.matmul(flat, w).unwrap();
    tape.sum(s)
}

/// Random typed multigraph with up to `max_nodes` nodes; each relation is
/// present with probability 1/2 and carries random edges (self loops allowed).
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize) -> HeteroGraph {
    let a = rng.gen_range(2..=max_nodes);
    let types = (0..a)
        .map(|_| NodeType::ALL[rng.gen_range(0..NodeType::ALL.len())])
        .collect();
    let density = rng.gen_range(0.1..0.5);
    let edges = RelationType::ALL
        .iter()
        .map(|_| {
            if !rng.gen_bool(0.5) {
                return Vec::new();
            }
            let mut e = Vec::new();
            for h in 0..a {
                for t in 0..a {
                    if rng.gen_bool(density) {
                        e.push((h, t));
                    }
                }
            }
            e
        })
        .collect();
    HeteroGraph::from_parts((0..a).map(|i| format!("v{i}")).collect(), types, edges).unwrap()
}

/// Five nodes: one type node, one base node and three method nodes.
pub fn toy_graph() -> HeteroGraph {
    let text = "\
@node\tT\tmodulationType
@node\tB\tbase
@node\tM0\tmodulationMethod
@node\tM1\tmodulationMethod
@node\tM2\tmodulationMethod
T\tpossesses\tM0
T\tpossesses\tM1
B\tisBaseOf\tM1
B\tisBaseOf\tM2
";
    HeteroGraph::build(&mkg::parse_triples(text).unwrap()).unwrap()
}

pub fn toy_classes() -> Vec<String> {
    vec!["M0".into(), "M1".into(), "M2".into()]
}

pub fn tiny_msnet(seed: u64, frame_len: usize, classes: usize, d: usize) -> MsnetParams<f64> {
    let cfg = MsnetConfig {
        frame_len,
        stem_channels: 2,
        branch_channels: 2,
        d,
        classes,
        ..MsnetConfig::default()
    };
    MsnetParams::init(cfg, &mut rng(seed)).unwrap()
}

pub fn tiny_rgcn(seed: u64, g: &HeteroGraph, d: usize) -> RgcnParams<f64> {
    let cfg = RgcnConfig {
        in_dim: mkg::feature_width(g.node_count()),
        hidden: 3,
        d,
        proj_hidden: 5,
    };
    RgcnParams::init(cfg, &mut rng(seed))
}

/// Reference GraphSAGE layer computed by iterating over edge lists:
/// `weights[r]` is `[2 b, out]` row-major.
pub fn brute_hetero_layer(g: &HeteroGraph, feats: &[Vec<f64>], weights: &[Vec<f64>], out: usize) -> Vec<Vec<f64>> {
    let a = g.node_count();
    let b = feats[0].len();
    let mut result = vec![vec![0.0; out]; a];
    for i in 0..a {
        let mut outputs = Vec::new();
        let mut fallback = Vec::new();
        for (ri, r) in RelationType::ALL.iter().enumerate() {
            let mut hn = vec![0.0; b];
            let mut count = 0;
            for &(h, t) in g.edges(*r) {
                if t == i {
                    for k in 0..b {
                        hn[k] += feats[h][k];
                    }
                    count += 1;
                }
            }
            if count > 0 {
                hn.iter_mut().for_each(|v| *v /= count as f64);
            }
            let cat: Vec<f64> = feats[i].iter().chain(&hn).copied().collect();
            let mut z = vec![0.0; out];
            for (o, zo) in z.iter_mut().enumerate() {
                for (k, c) in cat.iter().enumerate() {
                    *zo += c * weights[ri][k * out + o];
                }
                if *zo < 0.0 {
                    *zo *= 0.01;
                }
            }
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n >= 1e-12 {
                z.iter_mut().for_each(|v| *v /= n);
            }
            if count > 0 {
                outputs.push(z);
            } else {
                fallback.push(z);
            }
        }
        let pool = if outputs.is_empty() { &fallback } else { &outputs };
        for z in pool {
            for o in 0..out {
                result[i][o] += z[o] / pool.len() as f64;
            }
        }
    }
    result
}

/// Degree features recomputed with a full breadth-first search per node:
/// `[first-order, second-order, out-degree, in-degree]`, unscaled.
pub fn brute_degree_features(g: &HeteroGraph) -> Vec<[f64; 4]> {
    let a = g.node_count();
    let mut adj = vec![Vec::new(); a];
    let mut out_deg = vec![0.0; a];
    let mut in_deg = vec![0.0; a];
    for r in RelationType::ALL {
        for &(h, t) in g.edges(r) {
            out_deg[h] += 1.0;
            in_deg[t] += 1.0;
            if h != t {
                adj[h].push(t);
                adj[t].push(h);
            }
        }
    }
    (0..a)
        .map(|s| {
            let mut dist = vec![None; a];
            dist[s] = Some(0usize);
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(dist[u].unwrap() + 1);
                        q.push_back(v);
                    }
                }
            }
            let at = |k| dist.iter().filter(|d| **d == Some(k)).count() as f64;
            [at(1), at(2), out_deg[s], in_deg[s]]
        })
        .collect()
}
