//! Graph building blocks shared by the MRRN and U-Net builders.

use crate::error::{Error, Result};
use crate::kernels::{BnMode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape};

/// Tape handles of one conv3×3 → BN → ReLU block.
#[derive(Debug, Clone, Copy)]
pub struct CnnBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles of one residual connection unit.
#[derive(Debug, Clone)]
pub struct RcuVars {
    pub blocks: Vec<CnnBlockVars>,
    /// 1×1 conv mapping the regular output to the stream's channel count.
    pub residual_weight: Var,
    pub residual_bias: Var,
}

pub fn cnn_block<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    block: &CnnBlockVars,
    stats: &mut RunningStats<T>,
    mode: BnMode,
    name: &str,
) -> Result<Var> {
    let conv = tape.conv2d(input, block.weight, block.bias)?;
    let norm = tape.batch_norm(conv, block.gamma, block.beta, stats, mode, name)?;
    tape.relu(norm)
}

/// Residual connection unit.
///
/// `stream_input` must already be pooled to the resolution of
/// `prev_features`. The two are concatenated (stream first) and run through
/// the CNN blocks, giving the regular output. The residual output is a 1×1
/// conv of the regular output, upsampled `upsample_steps` times back to the
/// source stream's resolution.
#[allow(clippy::too_many_arguments)]
pub fn rcu_forward<T: Real>(
    tape: &mut Tape<T>,
    stream_input: Var,
    prev_features: Var,
    rcu: &RcuVars,
    stats: &mut [RunningStats<T>],
    upsample_steps: usize,
    mode: BnMode,
    name: &str,
) -> Result<(Var, Var)> {
    let (s, p) = (tape.shape(stream_input), tape.shape(prev_features));
    if (s.n, s.h, s.w) != (p.n, p.h, p.w) {
        return Err(Error::shape("rcu_forward", format!("stream input {s} vs previous features {p}")));
    }
    if stats.len() != rcu.blocks.len() {
        return Err(Error::shape(
            "rcu_forward",
            format!("{} CNN blocks but {} batch-norm statistics", rcu.blocks.len(), stats.len()),
        ));
    }
    let mut x = tape.concat(stream_input, prev_features)?;
    for (i, (block, st)) in rcu.blocks.iter().zip(stats.iter_mut()).enumerate() {
        x = cnn_block(tape, x, block, st, mode, &format!("{name}.block{i}"))?;
    }
    let mut residual = tape.conv2d(x, rcu.residual_weight, rcu.residual_bias)?;
    for _ in 0..upsample_steps {
        residual = tape.upsample2x(residual)?;
    }
    Ok((x, residual))
}

/// Additive stream update `stream + residual`.
pub fn stream_update<T: Real>(tape: &mut Tape<T>, stream: Var, residual: Var) -> Result<Var> {
    let (s, r) = (tape.shape(stream), tape.shape(residual));
    if s != r {
        return Err(Error::shape("stream_update", format!("stream {s} vs residual {r}")));
    }
    tape.add(stream, residual)
}

/// Live residual streams R0..R(L-1) during a forward pass.
#[derive(Debug, Clone)]
pub struct FeatureStreamState {
    input_size: usize,
    channels: Vec<usize>,
    streams: Vec<Var>,
}

impl FeatureStreamState {
    pub fn new(input_size: usize, channels: Vec<usize>) -> Self {
        FeatureStreamState { input_size, channels, streams: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn get(&self, k: usize) -> Var {
        self.streams[k]
    }

    pub fn streams(&self) -> &[Var] {
        &self.streams
    }

    /// Appends the next stream. It must have the next level's resolution.
    pub fn push<T: Real>(&mut self, tape: &Tape<T>, stream: Var) -> Result<()> {
        self.streams.push(stream);
        self.check_one(tape, self.streams.len() - 1)
    }

    pub fn update<T: Real>(&mut self, tape: &mut Tape<T>, k: usize, residual: Var) -> Result<()> {
        self.streams[k] = stream_update(tape, self.streams[k], residual)?;
        self.check_one(tape, k)
    }

    fn expected(&self, k: usize, n: usize) -> Shape {
        let size = self.input_size >> k;
        Shape::new(n, self.channels[k], size, size)
    }

    fn check_one<T: Real>(&self, tape: &Tape<T>, k: usize) -> Result<()> {
        let got = tape.shape(self.streams[k]);
        let want = self.expected(k, got.n);
        if got != want {
            return Err(Error::shape("feature stream", format!("R{k} is {got}, expected {want}")));
        }
        Ok(())
    }

    /// Checks every stream Rk against spatial size `input_size / 2^k`.
    pub fn check_resolution<T: Real>(&self, tape: &Tape<T>) -> Result<()> {
        (0..self.streams.len()).try_for_each(|k| self.check_one(tape, k))
    }
}
