//! Joint training of the graph encoder, signal encoder and classifier, and
//! signal-only inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SignalFrame};
use crate::error::{Error, Result};
use crate::loss::{joint_loss, LossBreakdown};
use crate::mkg::{self, HeteroGraph};
use crate::msnet::{self, MsnetConfig, MsnetParams};
use crate::nn::{softmax_in_place, ParamStore, Scalar, Tape, Tensor};
use crate::rgcn::{self, GraphOperators, RgcnConfig, RgcnParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Frames per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_msnet: f64,
    pub lr_rgcn: f64,
    pub weight_decay: f64,
    pub step_epochs: usize,
    pub step_factor: f64,
    pub lambda: f64,
    pub d: usize,
    pub seed: u64,
    pub stem_channels: usize,
    pub branch_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 1024,
            lr_msnet: 1e-3,
            lr_rgcn: 1e-6,
            weight_decay: 5e-4,
            step_epochs: 5,
            step_factor: 0.8,
            lambda: 0.2,
            d: 128,
            seed: 0,
            stem_channels: 32,
            branch_channels: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_msnet > 0.0 && self.lr_rgcn > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.lr_rgcn > self.lr_msnet {
            return bad("lr_rgcn must not exceed lr_msnet");
        }
        if self.batch_size == 0 || self.d == 0 || self.step_epochs == 0 {
            return bad("batch_size, d and step_epochs must be positive");
        }
        if !(self.step_factor > 0.0 && self.step_factor <= 1.0) {
            return bad("step_factor must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn msnet_config(&self, frame_len: usize, classes: usize) -> MsnetConfig {
        MsnetConfig {
            frame_len,
            stem_channels: self.stem_channels,
            branch_channels: self.branch_channels,
            d: self.d,
            classes,
            ..MsnetConfig::default()
        }
    }
}

/// Learning-rate multiplier for `epoch` (0-based).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.step_factor.powi((epoch / cfg.step_epochs) as i32)
}

/// One Adam update with bias correction and decoupled weight decay.
/// `t` is the 1-based step number.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    weight_decay: f64,
    t: u64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        let mi = ADAM_BETA1 * m[i].as_f64() + (1.0 - ADAM_BETA1) * g;
        let vi = ADAM_BETA2 * v[i].as_f64() + (1.0 - ADAM_BETA2) * g * g;
        let p = params[i].as_f64();
        let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS) + lr * weight_decay * p;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        params[i] = T::of(p - update);
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one step to every parameter of `store` using its gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, weight_decay: f64) {
        self.t += 1;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            adam_step(
                p.value.data_mut(),
                &grad,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                lr,
                weight_decay,
                self.t,
            );
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    pub train_config: TrainConfig,
    pub class_names: Vec<String>,
    /// Graph node index of each class's anchor.
    pub anchor_nodes: Vec<usize>,
    pub msnet: MsnetParams<T>,
    pub rgcn: RgcnParams<T>,
    pub opt_msnet: AdamState<T>,
    pub opt_classifier: AdamState<T>,
    pub opt_rgcn: AdamState<T>,
    pub epoch: usize,
    /// Class anchors captured from the last training forward pass.
    pub anchors: Option<Tensor<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Freshly initialized model for `graph` and the given class table.
    pub fn init(cfg: &TrainConfig, graph: &HeteroGraph, class_names: &[String], frame_len: usize) -> Result<Self> {
        cfg.validate()?;
        let anchor_nodes = mkg::anchors(graph, class_names)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let msnet = MsnetParams::init(cfg.msnet_config(frame_len, class_names.len()), &mut rng)?;
        let rgcn = RgcnParams::init(RgcnConfig::new(mkg::feature_width(graph.node_count()), cfg.d), &mut rng);
        Ok(Self {
            train_config: cfg.clone(),
            class_names: class_names.to_vec(),
            anchor_nodes,
            opt_msnet: AdamState::new(&msnet.features),
            opt_classifier: AdamState::new(&msnet.classifier),
            opt_rgcn: AdamState::new(&rgcn.store),
            msnet,
            rgcn,
            epoch: 0,
            anchors: None,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.msnet.config.frame_len
    }
}

/// Per-epoch summary. Loss fields are means over the epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_npair: f64,
    pub l_p: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub anchor_mean_cos: f64,
    pub lr_factor: f64,
    /// Largest `|l_total - (l_ce + lambda (l_npair + l_p))|` over the steps.
    pub max_identity_gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean cosine over ordered pairs of distinct rows.
pub fn mean_pairwise_cosine<T: Scalar>(rows: &Tensor<T>) -> f64 {
    let m = rows.shape()[0];
    if m < 2 {
        return 0.0;
    }
    let unit: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let r: Vec<f64> = rows.row(i).iter().map(|v| v.as_f64()).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < crate::nn::NORM_EPS {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect();
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                s += unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    s / (m * (m - 1)) as f64
}

fn check_classes(ds: &Dataset, state_classes: &[String], frame_len: usize) -> Result<()> {
    if ds.classes != state_classes {
        return Err(Error::Config(format!(
            "dataset classes {:?} differ from model classes {:?}",
            ds.classes, state_classes
        )));
    }
    if ds.frame_len != frame_len {
        return Err(Error::Config(format!(
            "dataset frame length {} differs from model frame length {frame_len}",
            ds.frame_len
        )));
    }
    Ok(())
}

/// Trains from scratch. `on_epoch` sees each record as soon as it is final.
pub fn train<T: Scalar>(
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    graph: &HeteroGraph,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelState<T>, TrainHistory)> {
    if train_ds.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut state = ModelState::init(cfg, graph, &train_ds.classes, train_ds.frame_len)?;
    if let Some(t) = test_ds {
        check_classes(t, &state.class_names, state.frame_len())?;
    }
    let feats: Tensor<T> = mkg::init_node_features(graph)?.cast();
    let ops = GraphOperators::<T>::new(graph);
    let mut history = TrainHistory::default();
    let frame_len = state.frame_len();

    for epoch in 0..cfg.epochs {
        let factor = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = LossBreakdown::default();
        let mut weight = 0.0;
        let mut correct = 0usize;
        let mut max_gap = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let frames = msnet::batch_frames::<T>(batch.iter().map(|&i| train_ds.frames[i].iq.as_slice()), frame_len)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_ds.frames[i].label as usize).collect();

            let mut tape = Tape::new();
            let nodes = rgcn::rgcn_forward(&mut tape, &ops, &feats, &state.rgcn)?;
            let anchors = rgcn::semantic_anchors(&mut tape, nodes, &state.anchor_nodes)?;
            let x = msnet::msnet_forward(&mut tape, &frames, &state.msnet)?;
            let logits = msnet::classify(&mut tape, x, &state.msnet)?;
            let (loss, parts) = joint_loss(&mut tape, x, anchors, logits, &labels, cfg.lambda)?;
            if !parts.is_finite() {
                return Err(Error::State(format!("non-finite loss at epoch {epoch}: {parts:?}")));
            }
            tape.backward(loss)?;

            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            state.anchors = Some(tape.value(anchors).clone());

            for store in [
                &mut state.msnet.features,
                &mut state.msnet.classifier,
                &mut state.rgcn.store,
            ] {
                store.zero_grad();
                tape.grads_into(store);
            }
            let lr_m = cfg.lr_msnet * factor;
            state.opt_msnet.step(&mut state.msnet.features, lr_m, cfg.weight_decay);
            state
                .opt_classifier
                .step(&mut state.msnet.classifier, lr_m, cfg.weight_decay);
            state
                .opt_rgcn
                .step(&mut state.rgcn.store, cfg.lr_rgcn * factor, cfg.weight_decay);

            let w = labels.len() as f64;
            sums.l_ce += parts.l_ce * w;
            sums.l_npair += parts.l_npair * w;
            sums.l_penalty += parts.l_penalty * w;
            sums.l_total += parts.l_total * w;
            weight += w;
            max_gap = max_gap.max(parts.identity_gap());
        }
        state.epoch = epoch + 1;

        let test_acc = match test_ds {
            Some(t) if !t.is_empty() => {
                let inf = infer(&t.frames, &state, InferMode::Classifier)?;
                Some(accuracy(&inf.labels, &t.labels()))
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            l_ce: sums.l_ce / weight,
            l_npair: sums.l_npair / weight,
            l_p: sums.l_penalty / weight,
            l_total: sums.l_total / weight,
            train_acc: correct as f64 / weight,
            test_acc,
            anchor_mean_cos: state.anchors.as_ref().map_or(0.0, mean_pairwise_cosine),
            lr_factor: factor,
            max_identity_gap: max_gap,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} test {:?} anchor cos {:.4}",
            record.l_total,
            record.train_acc,
            record.test_acc,
            record.anchor_mean_cos
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((state, history))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    /// Argmax of the classifier head.
    #[default]
    Classifier,
    /// Nearest frozen anchor by cosine.
    Anchor,
}

impl std::str::FromStr for InferMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classifier" => Ok(InferMode::Classifier),
            "anchor" => Ok(InferMode::Anchor),
            _ => Err(format!("unknown inference mode `{s}` (classifier|anchor)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub labels: Vec<usize>,
    /// `[N, d]` signal features.
    pub features: Tensor<T>,
    /// `[N, M]` softmax scores over classifier logits or anchor cosines.
    pub scores: Tensor<T>,
}

/// Classifies frames with the signal encoder only; the graph encoder is
/// never evaluated.
pub fn infer<T: Scalar>(frames: &[SignalFrame], state: &ModelState<T>, mode: InferMode) -> Result<Inference<T>> {
    let l = state.frame_len();
    let arr: Vec<&[f32]> = frames.iter().map(|f| f.iq.as_slice()).collect();
    infer_raw(&arr, l, state, mode)
}

/// As [`infer`], for frames given as `2 * L` sample slices.
pub fn infer_raw<T: Scalar>(
    frames: &[&[f32]],
    frame_len: usize,
    state: &ModelState<T>,
    mode: InferMode,
) -> Result<Inference<T>> {
    if frame_len != state.frame_len() {
        return Err(Error::shape("infer", &[2, frame_len], &[2, state.frame_len()]));
    }
    let anchors = match mode {
        InferMode::Anchor => Some(
            state
                .anchors
                .as_ref()
                .ok_or_else(|| Error::State("model has no frozen anchors".into()))?,
        ),
        InferMode::Classifier => None,
    };
    let d = state.msnet.config.d;
    let m = state.class_names.len();
    let mut features = Vec::with_capacity(frames.len() * d);
    let mut scores = Vec::with_capacity(frames.len() * m);
    for chunk in frames.chunks(EVAL_CHUNK) {
        let batch = msnet::batch_frames::<T>(chunk.iter().copied(), frame_len)?;
        let mut tape = Tape::new();
        let x = msnet::msnet_forward(&mut tape, &batch, &state.msnet)?;
        let s = match anchors {
            None => msnet::classify(&mut tape, x, &state.msnet)?,
            Some(a) => {
                let a = tape.constant(a.clone());
                tape.cosine_matrix(x, a)?
            }
        };
        features.extend_from_slice(tape.value(x).data());
        scores.extend_from_slice(tape.value(s).data());
    }
    let mut scores = Tensor::from_vec(&[frames.len(), m], scores)?;
    let labels = argmax_rows(&scores);
    for row in scores.data_mut().chunks_mut(m) {
        softmax_in_place(row);
    }
    Ok(Inference {
        labels,
        features: Tensor::from_vec(&[frames.len(), d], features)?,
        scores,
    })
}
