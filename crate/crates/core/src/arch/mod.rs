//! MRRN and U-Net segmentation graphs over the tape engine.
//!
//! The MRRN keeps one residual feature stream per resolution level. Stream
//! R0 comes from a CNN block on the input image. Each encoder level k ≥ 1
//! max-pools the running feature map and passes it through an RCU block with
//! one RCU per higher-resolution stream R0..R(k-1), in that order. Each RCU
//! reads its stream (pooled down to level k) and writes a residual back into
//! it. The block's final regular output becomes stream Rk.
//!
//! The upsampling side mirrors this: level r = L-2 down to 0 upsamples the
//! features and runs one RCU per stream R0..Rr. An RCU whose stream is never
//! read again has no residual conv. A 1×1 conv on R0 gives the logits.

mod blocks;
mod checkpoint;
mod config;

pub use blocks::{cnn_block, rcu_forward, stream_update, CnnBlockVars, FeatureStreamState, RcuVars};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader,
    CHECKPOINT_VERSION,
};
pub use config::{ArchConfig, ModelKind, PAPER_PARAM_COUNT};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{BnMode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    conv: ConvSpec,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct RcuSpec {
    name: String,
    stream: usize,
    blocks: Vec<BlockSpec>,
    /// Absent when nothing reads the stream after this unit.
    residual: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
enum Graph {
    Mrrn {
        stem: BlockSpec,
        /// `levels[k - 1]` holds the RCUs of level k.
        levels: Vec<Vec<RcuSpec>>,
        /// Upsampling levels in execution order, from resolution L-2 up to 0.
        up: Vec<Vec<RcuSpec>>,
        head: ConvSpec,
    },
    Unet {
        encoder: Vec<BlockSpec>,
        /// `decoder[k]` produces level k from level k + 1.
        decoder: Vec<BlockSpec>,
        head: ConvSpec,
    },
}

/// What one MRRN level read and the stream shapes after it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    /// Resolution level: spatial size is `input_size / 2^level`.
    pub level: usize,
    /// True on the upsampling side.
    pub upsampling: bool,
    pub streams_read: Vec<usize>,
    pub stream_shapes: Vec<Shape>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Per-level stream usage; empty for the U-Net baseline.
    pub levels: Vec<LevelTrace>,
}

/// Parameters, batch-norm statistics, and graph of a built network.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ArchConfig,
    params: Vec<Param<T>>,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats<T>>,
    graph: Graph,
    mode: BnMode,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats<T>>,
}

impl<T: Real> Builder<T> {
    fn new(seed: u64) -> Self {
        Builder { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new(), bn_names: Vec::new(), bn_stats: Vec::new() }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    /// He-normal weights, zero bias.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> ConvSpec {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let shape = Shape::new(c_out, c_in, k, k);
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::of(z * std)
            })
            .collect();
        let weight = self.push(format!("{name}.weight"), Tensor::from_vec(shape, data).expect("shape"));
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        ConvSpec { weight, bias }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize) -> BlockSpec {
        let conv = self.conv(&format!("{name}.conv"), c_in, c_out, 3);
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(Shape::new(1, c_out, 1, 1), T::one()));
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        self.bn_names.push(format!("{name}.bn"));
        self.bn_stats.push(RunningStats::new(c_out));
        BlockSpec { conv, gamma, beta, stats: self.bn_stats.len() - 1 }
    }

    fn finish(self, config: &ArchConfig, graph: Graph) -> Model<T> {
        Model {
            config: config.clone(),
            params: self.params,
            bn_names: self.bn_names,
            bn_stats: self.bn_stats,
            graph,
            mode: BnMode::Train,
        }
    }
}

/// Builds the MRRN graph with weights drawn from `seed`.
pub fn build_mrrn<T: Real>(config: &ArchConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let ch = &config.channels;
    let mut b = Builder::new(seed);
    let stem = b.block("stem", 1, ch[0]);
    let rcu_block = |b: &mut Builder<T>, prefix: &str, level: usize, streams: usize, c_in: usize, residual: &dyn Fn(usize) -> bool| {
        let mut c_prev = c_in;
        (0..streams)
            .map(|j| {
                let name = format!("{prefix}.rcu{j}");
                let blocks = (0..config.rcus_per_block)
                    .map(|i| b.block(&format!("{name}.block{i}"), if i == 0 { ch[j] + c_prev } else { ch[level] }, ch[level]))
                    .collect();
                c_prev = ch[level];
                let residual = residual(j).then(|| b.conv(&format!("{name}.residual"), ch[level], ch[j], 1));
                RcuSpec { name, stream: j, blocks, residual }
            })
            .collect::<Vec<_>>()
    };
    let levels = (1..config.num_streams).map(|k| rcu_block(&mut b, &format!("level{k}"), k, k, ch[k - 1], &|_| true)).collect();
    let up = (0..config.num_streams.saturating_sub(1))
        .rev()
        .map(|r| rcu_block(&mut b, &format!("up{r}"), r, r + 1, ch[r + 1], &|j| j < r || r == 0))
        .collect();
    let head = b.conv("head", ch[0], config.num_classes, 1);
    Ok(b.finish(config, Graph::Mrrn { stem, levels, up, head }))
}

/// Builds the encoder–decoder baseline: one CNN block per stage, max-pool
/// down, nearest upsample up, and a single concatenation skip per level.
pub fn build_unet_baseline<T: Real>(config: &ArchConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let ch = &config.channels;
    let mut b = Builder::new(seed);
    let encoder = (0..config.num_streams)
        .map(|k| b.block(&format!("encoder{k}"), if k == 0 { 1 } else { ch[k - 1] }, ch[k]))
        .collect();
    let decoder = (0..config.num_streams.saturating_sub(1))
        .map(|k| b.block(&format!("decoder{k}"), ch[k] + ch[k + 1], ch[k]))
        .collect();
    let head = b.conv("head", ch[0], config.num_classes, 1);
    Ok(b.finish(config, Graph::Unet { encoder, decoder, head }))
}

/// Builds whichever network `config.model` names.
pub fn build_model<T: Real>(config: &ArchConfig, seed: u64) -> Result<Model<T>> {
    match config.model {
        ModelKind::Mrrn => build_mrrn(config, seed),
        ModelKind::Unet => build_unet_baseline(config, seed),
    }
}

/// Total element count of all trainable tensors (conv weights and biases,
/// batch-norm gamma and beta). Running statistics are excluded.
pub fn count_params<T: Real>(model: &Model<T>) -> u64 {
    model.params.iter().map(|p| p.tensor.numel() as u64).sum()
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.bn_names.iter().map(String::as_str).zip(&self.bn_stats)
    }

    pub(crate) fn running_stats_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.bn_names.iter().map(String::as_str).zip(self.bn_stats.iter_mut())
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    pub fn count_params(&self) -> u64 {
        count_params(self)
    }

    /// Records every parameter as a tape leaf, in build order.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.requires_grad = requires_grad;
                tape.leaf(t)
            })
            .collect()
    }

    /// Copies gradients of registered parameters off the tape into `Param::tensor.grad`.
    pub fn store_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.tensor.grad = Some(match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.numel()],
            });
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Bitwise equality of parameters and running statistics.
    pub fn same_state(&self, other: &Model<T>) -> bool {
        let bits = |a: &[T], b: &[T]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits());
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
            && self.bn_names == other.bn_names
            && self.bn_stats.iter().zip(&other.bn_stats).all(|(a, b)| {
                a.updates == b.updates && bits(&a.mean, &b.mean) && bits(&a.var, &b.var)
            })
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let s = self.config.input_size;
        if shape.c != 1 || shape.h != s || shape.w != s || shape.n == 0 {
            return Err(Error::shape("forward", format!("input {shape}, expected (n, 1, {s}, {s})")));
        }
        Ok(())
    }

    /// Runs the network on `input` using parameters previously recorded with
    /// [`Model::register`]. Batch norm follows the model's mode; in train
    /// mode its running statistics are updated.
    pub fn forward_with(&mut self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<ForwardOutput> {
        self.check_input(tape.shape(input))?;
        if params.len() != self.params.len() {
            return Err(Error::shape("forward", format!("{} parameter vars for {} parameters", params.len(), self.params.len())));
        }
        let mode = self.mode;
        let stats = &mut self.bn_stats;
        let names = &self.bn_names;
        let block_vars = |b: &BlockSpec| CnnBlockVars {
            weight: params[b.conv.weight],
            bias: params[b.conv.bias],
            gamma: params[b.gamma],
            beta: params[b.beta],
        };
        let run_block = |tape: &mut Tape<T>, stats: &mut Vec<RunningStats<T>>, x: Var, b: &BlockSpec| {
            cnn_block(tape, x, &block_vars(b), &mut stats[b.stats], mode, &names[b.stats])
        };

        match &self.graph {
            Graph::Mrrn { stem, levels, up, head } => {
                let mut streams = FeatureStreamState::new(self.config.input_size, self.config.channels.clone());
                let mut features = run_block(tape, stats, input, stem)?;
                streams.push(tape, features)?;
                let mut trace = Vec::with_capacity(levels.len() + up.len());
                // Runs the RCUs of one level in stream order, each writing its
                // residual back to its stream.
                let mut rcu_level = |tape: &mut Tape<T>, streams: &mut FeatureStreamState, mut features: Var, level: usize, rcus: &[RcuSpec]| -> Result<(Var, Vec<usize>)> {
                    let mut read = Vec::with_capacity(rcus.len());
                    for rcu in rcus {
                        let j = rcu.stream;
                        let mut pooled = streams.get(j);
                        for _ in j..level {
                            pooled = tape.maxpool2x2(pooled)?;
                        }
                        read.push(j);
                        let first = rcu.blocks[0].stats;
                        let rcu_stats = &mut stats[first..first + rcu.blocks.len()];
                        match rcu.residual {
                            Some(residual) => {
                                let vars = RcuVars {
                                    blocks: rcu.blocks.iter().map(block_vars).collect(),
                                    residual_weight: params[residual.weight],
                                    residual_bias: params[residual.bias],
                                };
                                let (regular, res) = rcu_forward(tape, pooled, features, &vars, rcu_stats, level - j, mode, &rcu.name)?;
                                streams.update(tape, j, res)?;
                                features = regular;
                            }
                            None => {
                                let mut x = tape.concat(pooled, features)?;
                                for (b, st) in rcu.blocks.iter().zip(rcu_stats.iter_mut()) {
                                    x = cnn_block(tape, x, &block_vars(b), st, mode, &names[b.stats])?;
                                }
                                features = x;
                            }
                        }
                    }
                    Ok((features, read))
                };
                for (li, rcus) in levels.iter().enumerate() {
                    let k = li + 1;
                    features = tape.maxpool2x2(features)?;
                    let (regular, read) = rcu_level(tape, &mut streams, features, k, rcus)?;
                    features = regular;
                    streams.push(tape, features)?;
                    streams.check_resolution(tape)?;
                    let stream_shapes = streams.streams().iter().map(|&v| tape.shape(v)).collect();
                    trace.push(LevelTrace { level: k, upsampling: false, streams_read: read, stream_shapes });
                }
                for (i, rcus) in up.iter().enumerate() {
                    let r = up.len() - 1 - i;
                    features = tape.upsample2x(features)?;
                    let (regular, read) = rcu_level(tape, &mut streams, features, r, rcus)?;
                    features = regular;
                    streams.check_resolution(tape)?;
                    let stream_shapes = streams.streams().iter().map(|&v| tape.shape(v)).collect();
                    trace.push(LevelTrace { level: r, upsampling: true, streams_read: read, stream_shapes });
                }
                let logits = tape.conv2d(streams.get(0), params[head.weight], params[head.bias])?;
                Ok(ForwardOutput { logits, levels: trace })
            }
            Graph::Unet { encoder, decoder, head } => {
                let mut skips = Vec::with_capacity(encoder.len());
                let mut features = input;
                for (k, block) in encoder.iter().enumerate() {
                    if k > 0 {
                        features = tape.maxpool2x2(features)?;
                    }
                    features = run_block(tape, stats, features, block)?;
                    skips.push(features);
                }
                for (k, block) in decoder.iter().enumerate().rev() {
                    let up = tape.upsample2x(features)?;
                    let joined = tape.concat(skips[k], up)?;
                    features = run_block(tape, stats, joined, block)?;
                }
                let logits = tape.conv2d(features, params[head.weight], params[head.bias])?;
                Ok(ForwardOutput { logits, levels: Vec::new() })
            }
        }
    }

    /// Forward pass without gradient tracking; returns the logits tensor.
    pub fn logits(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let mut input = batch.clone();
        input.requires_grad = false;
        let x = tape.leaf(input);
        let out = self.forward_with(&mut tape, &params, x)?;
        Ok(tape.take(out.logits))
    }
}
