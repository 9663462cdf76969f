//! Multi-scale 1-D CNN signal encoder and the linear classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsnetConfig {
    pub frame_len: usize,
    pub stem_channels: usize,
    pub branch_channels: usize,
    pub kernels: Vec<usize>,
    pub blocks: usize,
    pub d: usize,
    pub classes: usize,
}

impl Default for MsnetConfig {
    fn default() -> Self {
        Self {
            frame_len: 128,
            stem_channels: 32,
            branch_channels: 16,
            kernels: vec![1, 3, 5, 7, 9],
            blocks: 2,
            d: 128,
            classes: 10,
        }
    }
}

impl MsnetConfig {
    pub fn concat_channels(&self) -> usize {
        self.kernels.len() * self.branch_channels
    }

    pub fn validate(&self) -> Result<()> {
        let min_len = 1usize << (self.blocks + 1);
        if self.blocks == 0 || self.kernels.is_empty() || self.kernels.contains(&0) {
            return Err(Error::Config("need at least one block and non-zero kernels".into()));
        }
        if self.frame_len < min_len {
            return Err(Error::Config(format!(
                "frame length {} too short for {} blocks (need {min_len})",
                self.frame_len, self.blocks
            )));
        }
        if [self.stem_channels, self.branch_channels, self.d, self.classes].contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    stem: ConvIds,
    branches: Vec<(ConvIds, ConvIds, usize)>,
}

/// Encoder parameters (`features`) and classifier parameters (`classifier`)
/// live in separate stores so each can be optimized and inspected alone.
#[derive(Debug, Clone)]
pub struct MsnetParams<T: Scalar> {
    pub config: MsnetConfig,
    pub features: ParamStore<T>,
    pub classifier: ParamStore<T>,
    blocks: Vec<BlockIds>,
    fc_w: ParamId,
    fc_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> ConvIds {
    ConvIds {
        w: store.add_glorot(format!("{name}.w"), &[c_out, c_in, k], c_in * k, c_out * k, rng),
        b: store.add_zeros(format!("{name}.b"), &[c_out]),
    }
}

impl<T: Scalar> MsnetParams<T> {
    pub fn init(config: MsnetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut features = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut c_in = 2;
        for bi in 0..config.blocks {
            let stem = add_conv(
                &mut features,
                &format!("msnet.b{bi}.stem"),
                config.stem_channels,
                c_in,
                3,
                rng,
            );
            let branches = config
                .kernels
                .iter()
                .map(|&k| {
                    let reduce = add_conv(
                        &mut features,
                        &format!("msnet.b{bi}.k{k}.reduce"),
                        config.branch_channels,
                        config.stem_channels,
                        1,
                        rng,
                    );
                    let conv = add_conv(
                        &mut features,
                        &format!("msnet.b{bi}.k{k}.conv"),
                        config.branch_channels,
                        config.branch_channels,
                        k,
                        rng,
                    );
                    (reduce, conv, k)
                })
                .collect();
            blocks.push(BlockIds { stem, branches });
            c_in = config.concat_channels();
        }
        let fc_w = features.add_glorot("msnet.fc.w", &[c_in, config.d], c_in, config.d, rng);
        let fc_b = features.add_zeros("msnet.fc.b", &[config.d]);
        let mut classifier = ParamStore::new();
        let cls_w = classifier.add_glorot("cls.w", &[config.d, config.classes], config.d, config.classes, rng);
        let cls_b = classifier.add_zeros("cls.b", &[config.classes]);
        Ok(Self {
            config,
            features,
            classifier,
            blocks,
            fc_w,
            fc_b,
            cls_w,
            cls_b,
        })
    }

    pub fn classifier_ids(&self) -> (ParamId, ParamId) {
        (self.cls_w, self.cls_b)
    }

    pub fn numel(&self) -> usize {
        self.features.numel() + self.classifier.numel()
    }

    pub fn cast<U: Scalar>(&self) -> MsnetParams<U> {
        let recast = |s: &ParamStore<T>| {
            let mut out = ParamStore::new();
            for p in s.params() {
                out.add(p.name.clone(), p.value.cast());
            }
            out
        };
        MsnetParams {
            config: self.config.clone(),
            features: recast(&self.features),
            classifier: recast(&self.classifier),
            blocks: self.blocks.clone(),
            fc_w: self.fc_w,
            fc_b: self.fc_b,
            cls_w: self.cls_w,
            cls_b: self.cls_b,
        }
    }
}

fn conv_act<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: ConvIds, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = (tape.param(store, ids.w), tape.param(store, ids.b));
    let y = tape.conv1d(x, w, Some(b), stride, true)?;
    Ok(tape.leaky_relu(y, T::of(LEAKY_SLOPE)))
}

/// Applies block `index`: `[C_in, N, T] -> [C_cat, N, ceil(T/2)]`.
pub fn multiscale_block<T: Scalar>(tape: &mut Tape<T>, params: &MsnetParams<T>, index: usize, x: Var) -> Result<Var> {
    block_with_store(tape, params, &params.features, index, x)
}

fn block_with_store<T: Scalar>(
    tape: &mut Tape<T>,
    params: &MsnetParams<T>,
    store: &ParamStore<T>,
    index: usize,
    x: Var,
) -> Result<Var> {
    let t = *tape.shape(x).last().unwrap_or(&0);
    if t < 4 {
        return Err(Error::shape("multiscale_block", tape.shape(x), &[0, 4]));
    }
    let block = params
        .blocks
        .get(index)
        .ok_or_else(|| Error::OutOfRange(format!("block {index}")))?;
    let stem = conv_act(tape, store, block.stem, x, 2)?;
    let mut outs = Vec::with_capacity(block.branches.len());
    for &(reduce, conv, _) in &block.branches {
        let r = conv_act(tape, store, reduce, stem, 1)?;
        outs.push(conv_act(tape, store, conv, r, 1)?);
    }
    tape.concat_dim0(&outs)
}

/// Encodes frames `[N, 2, L]` to features `[N, d]`.
pub fn msnet_forward<T: Scalar>(tape: &mut Tape<T>, frames: &Tensor<T>, params: &MsnetParams<T>) -> Result<Var> {
    msnet_forward_with_store(tape, frames, params, &params.features)
}

/// As [`msnet_forward`], reading encoder weights from `store`, which must
/// share the layout of `params.features`.
pub fn msnet_forward_with_store<T: Scalar>(
    tape: &mut Tape<T>,
    frames: &Tensor<T>,
    params: &MsnetParams<T>,
    store: &ParamStore<T>,
) -> Result<Var> {
    let l = params.config.frame_len;
    let n = match frames.shape() {
        [n, 2, len] if *len == l && *n > 0 => *n,
        s => return Err(Error::shape("msnet_forward", s, &[0, 2, l])),
    };
    // channel-major layout for the convolutions
    let mut cm = vec![T::zero(); frames.len()];
    for i in 0..n {
        for c in 0..2 {
            cm[(c * n + i) * l..][..l].copy_from_slice(&frames.data()[(i * 2 + c) * l..][..l]);
        }
    }
    let mut x = tape.constant(Tensor::from_vec(&[2, n, l], cm)?);
    for b in 0..params.blocks.len() {
        x = block_with_store(tape, params, store, b, x)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let (w, b) = (tape.param(store, params.fc_w), tape.param(store, params.fc_b));
    tape.linear(pooled, w, b)
}

/// Affine classifier head `[N, d] -> [N, M]`.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, features: Var, params: &MsnetParams<T>) -> Result<Var> {
    classify_with_store(tape, features, params, &params.classifier)
}

/// As [`classify`], reading the head from `store`.
pub fn classify_with_store<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    params: &MsnetParams<T>,
    store: &ParamStore<T>,
) -> Result<Var> {
    let (w, b) = (tape.param(store, params.cls_w), tape.param(store, params.cls_b));
    tape.linear(features, w, b)
}

/// Stacks frames given as `2 * L` slices into a `[N, 2, L]` tensor.
pub fn batch_frames<'a, T: Scalar>(frames: impl IntoIterator<Item = &'a [f32]>, frame_len: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    for f in frames {
        if f.len() != 2 * frame_len {
            return Err(Error::Length {
                needed: 2 * frame_len,
                got: f.len(),
            });
        }
        data.extend(f.iter().map(|&v| T::of(v as f64)));
        n += 1;
    }
    Tensor::from_vec(&[n, 2, frame_len], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_model_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MsnetParams::<f32>::init(MsnetConfig::default(), &mut rng).unwrap();
        assert!(p.numel() <= 200_000, "{}", p.numel());
        assert_eq!(p.config.concat_channels(), 80);
    }

    #[test]
    fn config_validation() {
        let mut c = MsnetConfig {
            frame_len: 6,
            ..MsnetConfig::default()
        };
        assert!(c.validate().is_err());
        c.frame_len = 8;
        assert!(c.validate().is_ok());
        c.kernels.clear();
        assert!(c.validate().is_err());
    }
}
