//! Relational GraphSAGE encoder that embeds the knowledge graph nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mkg::{HeteroGraph, RelationType};
use crate::nn::{ParamId, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_SLOPE};

const RELATIONS: usize = RelationType::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgcnConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub proj_hidden: usize,
}

impl RgcnConfig {
    pub fn new(in_dim: usize, d: usize) -> Self {
        Self {
            in_dim,
            hidden: d,
            d,
            proj_hidden: 256,
        }
    }
}

/// Row-normalized in-adjacency per relation, as constants ready for the tape.
#[derive(Debug, Clone)]
pub struct GraphOperators<T> {
    nodes: usize,
    mean_in: Vec<Tensor<T>>,
    /// `active[r][i]` iff node `i` has an in-neighbor under relation `r`.
    active: Vec<Vec<bool>>,
}

impl<T: Scalar> GraphOperators<T> {
    pub fn new(g: &HeteroGraph) -> Self {
        let a = g.node_count();
        let mut mean_in = Vec::with_capacity(RELATIONS);
        let mut active = Vec::with_capacity(RELATIONS);
        for r in RelationType::ALL {
            let mut counts = vec![0usize; a];
            for &(_, t) in g.edges(r) {
                counts[t] += 1;
            }
            let mut m = Tensor::zeros(&[a, a]);
            for &(h, t) in g.edges(r) {
                m.data_mut()[t * a + h] = T::one() / T::of(counts[t] as f64);
            }
            mean_in.push(m);
            active.push(counts.iter().map(|&c| c > 0).collect());
        }
        Self {
            nodes: a,
            mean_in,
            active,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// Per-relation row weights that average over the relations reaching each
    /// node, or over all relations for nodes no relation reaches.
    fn combine_weights(&self) -> Vec<Vec<T>> {
        let counts: Vec<usize> = (0..self.nodes)
            .map(|i| self.active.iter().filter(|r| r[i]).count())
            .collect();
        self.active
            .iter()
            .map(|act| {
                (0..self.nodes)
                    .map(|i| match counts[i] {
                        0 => T::of(1.0 / RELATIONS as f64),
                        c if act[i] => T::of(1.0 / c as f64),
                        _ => T::zero(),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Parameters of the encoder. Weight matrices are stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct RgcnParams<T: Scalar> {
    pub config: RgcnConfig,
    pub store: ParamStore<T>,
    layer1: [ParamId; RELATIONS],
    layer2: [ParamId; RELATIONS],
    res_w: ParamId,
    res_b: ParamId,
    p1_w: ParamId,
    p1_b: ParamId,
    p2_w: ParamId,
    p2_b: ParamId,
}

impl<T: Scalar> RgcnParams<T> {
    pub fn init(config: RgcnConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let RgcnConfig {
            in_dim,
            hidden,
            d,
            proj_hidden,
        } = config;
        let mut unit_layer = |store: &mut ParamStore<T>, layer: usize, fan_in: usize, fan_out: usize| {
            RelationType::ALL.map(|r| {
                store.add_glorot(
                    format!("rgcn.l{layer}.{}", r.name()),
                    &[2 * fan_in, fan_out],
                    2 * fan_in,
                    fan_out,
                    rng,
                )
            })
        };
        let layer1 = unit_layer(&mut store, 1, in_dim, hidden);
        let layer2 = unit_layer(&mut store, 2, hidden, hidden);
        let res_w = store.add_glorot("rgcn.res.w", &[in_dim, hidden], in_dim, hidden, rng);
        let res_b = store.add_zeros("rgcn.res.b", &[hidden]);
        let p1_w = store.add_glorot("rgcn.proj1.w", &[hidden, proj_hidden], hidden, proj_hidden, rng);
        let p1_b = store.add_zeros("rgcn.proj1.b", &[proj_hidden]);
        let p2_w = store.add_glorot("rgcn.proj2.w", &[proj_hidden, d], proj_hidden, d, rng);
        let p2_b = store.add_zeros("rgcn.proj2.b", &[d]);
        Self {
            config,
            store,
            layer1,
            layer2,
            res_w,
            res_b,
            p1_w,
            p1_b,
            p2_w,
            p2_b,
        }
    }

    pub fn unit_weight(&self, layer: usize, r: RelationType) -> ParamId {
        match layer {
            1 => self.layer1[r.index()],
            _ => self.layer2[r.index()],
        }
    }

    /// Same parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> RgcnParams<U> {
        let mut store = ParamStore::new();
        for p in self.store.params() {
            store.add(p.name.clone(), p.value.cast());
        }
        RgcnParams {
            config: self.config,
            store,
            layer1: self.layer1,
            layer2: self.layer2,
            res_w: self.res_w,
            res_b: self.res_b,
            p1_w: self.p1_w,
            p1_b: self.p1_b,
            p2_w: self.p2_w,
            p2_b: self.p2_b,
        }
    }
}

/// One relation's GraphSAGE unit: `l2(leaky([h_i, mean_{j in N_r(i)} h_j] W))`.
pub fn sage_unit<T: Scalar>(tape: &mut Tape<T>, mean_in: &Tensor<T>, feats: Var, w: Var) -> Result<Var> {
    let adj = tape.constant(mean_in.clone());
    let hn = tape.matmul(adj, feats)?;
    let cat = tape.concat_cols(&[feats, hn])?;
    let z = tape.matmul(cat, w)?;
    let z = tape.leaky_relu(z, T::of(LEAKY_SLOPE));
    tape.l2_normalize(z)
}

/// Averages the relation units over the relations active at each node.
pub fn hetero_layer<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &GraphOperators<T>,
    feats: Var,
    weights: &[Var],
) -> Result<Var> {
    if weights.len() != RELATIONS {
        return Err(Error::Config(format!(
            "hetero layer needs {RELATIONS} relation units, got {}",
            weights.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for ((mean_in, &w), scale) in ops.mean_in.iter().zip(weights).zip(ops.combine_weights()) {
        let u = sage_unit(tape, mean_in, feats, w)?;
        let u = tape.row_scale(u, scale)?;
        acc = Some(match acc {
            None => u,
            Some(a) => tape.add(a, u)?,
        });
    }
    Ok(acc.expect("at least one relation"))
}

/// Full encoder: two hetero layers plus a residual branch, then the
/// projection head. Returns the `a x d` node embedding matrix.
pub fn rgcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &GraphOperators<T>,
    feats: &Tensor<T>,
    params: &RgcnParams<T>,
) -> Result<Var> {
    rgcn_forward_with_store(tape, ops, feats, params, &params.store)
}

/// As [`rgcn_forward`], reading parameter values from `store`, which must
/// share the layout of `params.store`.
pub fn rgcn_forward_with_store<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &GraphOperators<T>,
    feats: &Tensor<T>,
    params: &RgcnParams<T>,
    s: &ParamStore<T>,
) -> Result<Var> {
    if feats.shape() != [ops.node_count(), params.config.in_dim] {
        return Err(Error::shape(
            "rgcn_forward",
            feats.shape(),
            &[ops.node_count(), params.config.in_dim],
        ));
    }
    let m = tape.constant(feats.clone());
    let w1: Vec<Var> = params.layer1.iter().map(|&id| tape.param(s, id)).collect();
    let w2: Vec<Var> = params.layer2.iter().map(|&id| tape.param(s, id)).collect();
    let h1 = hetero_layer(tape, ops, m, &w1)?;
    let h2 = hetero_layer(tape, ops, h1, &w2)?;
    let (rw, rb) = (tape.param(s, params.res_w), tape.param(s, params.res_b));
    let res = tape.linear(m, rw, rb)?;
    let z = tape.add(h2, res)?;
    let (p1w, p1b) = (tape.param(s, params.p1_w), tape.param(s, params.p1_b));
    let p = tape.linear(z, p1w, p1b)?;
    let p = tape.leaky_relu(p, T::of(LEAKY_SLOPE));
    let (p2w, p2b) = (tape.param(s, params.p2_w), tape.param(s, params.p2_b));
    tape.linear(p, p2w, p2b)
}

/// Rows of the node embedding at the class anchor nodes, in class order.
pub fn semantic_anchors<T: Scalar>(tape: &mut Tape<T>, embedding: Var, anchor_nodes: &[usize]) -> Result<Var> {
    tape.gather_rows(embedding, anchor_nodes)
}

/// Evaluates the encoder without keeping a tape around.
pub fn embed<T: Scalar>(g: &HeteroGraph, feats: &Tensor<T>, params: &RgcnParams<T>) -> Result<Tensor<T>> {
    let ops = GraphOperators::new(g);
    let mut tape = Tape::new();
    let n = rgcn_forward(&mut tape, &ops, feats, params)?;
    Ok(tape.value(n).clone())
}
