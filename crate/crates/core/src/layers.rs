//! Layers built from tape primitives: affine maps, embeddings, LSTM cells,
//! a bidirectional LSTM, a 1-D convolution with max-over-time pooling, and
//! inverted dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Binding, NodeId, Tape};
use crate::tensor::Tensor;

/// `W x + b`.
pub fn linear(tape: &mut Tape, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    let wx = tape.matvec(w, x)?;
    tape.add(wx, b)
}

pub fn embedding_lookup(tape: &mut Tape, table: NodeId, id: usize) -> Result<NodeId> {
    tape.row(table, id)
}

/// Weights of one LSTM direction. `w` has shape `[4h, input + h]` with gate
/// blocks ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, seed: u64, prefix: &str, input: usize, hidden: usize) {
        let fan_in = input + hidden;
        store.init_uniform(seed, &format!("{prefix}w"), &[4 * hidden, fan_in], fan_in);
        store.init_uniform(seed, &format!("{prefix}b"), &[4 * hidden], fan_in);
    }

    pub fn bind(binding: &Binding, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(Self {
            w: binding.get(&format!("{prefix}w"))?,
            b: binding.get(&format!("{prefix}b"))?,
            hidden,
        })
    }
}

/// One LSTM step. Returns `(h', c')`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    p: &LstmParams,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hs = p.hidden;
    for (name, id) in [("h", h), ("c", c)] {
        if tape.value(id).len() != hs {
            return Err(Error::Dimension {
                op: if name == "h" { "lstm hidden state" } else { "lstm cell state" },
                left: tape.value(id).shape().to_vec(),
                right: vec![hs],
            });
        }
    }
    let xh = tape.concat(&[x, h])?;
    let z = linear(tape, p.w, p.b, xh)?;
    let zi = tape.slice(z, 0, hs)?;
    let zf = tape.slice(z, hs, hs)?;
    let zg = tape.slice(z, 2 * hs, hs)?;
    let zo = tape.slice(z, 3 * hs, hs)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    if !tape.value(h_next).is_finite() || !tape.value(c_next).is_finite() {
        return Err(Error::NumericOverflow("lstm_cell_step"));
    }
    Ok((h_next, c_next))
}

/// Runs one direction over `seq` from zero state, returning every hidden state.
pub fn lstm_run(tape: &mut Tape, p: &LstmParams, seq: &[NodeId]) -> Result<Vec<NodeId>> {
    let mut h = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[p.hidden]));
    let mut out = Vec::with_capacity(seq.len());
    for &x in seq {
        (h, c) = lstm_cell_step(tape, p, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Bidirectional LSTM: `output[t] = concat(forward[t], backward[t])`.
pub fn bilstm_encode(
    tape: &mut Tape,
    fwd: &LstmParams,
    bwd: &LstmParams,
    seq: &[NodeId],
) -> Result<Vec<NodeId>> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("bilstm_encode"));
    }
    let forward = lstm_run(tape, fwd, seq)?;
    let reversed: Vec<NodeId> = seq.iter().rev().copied().collect();
    let mut backward = lstm_run(tape, bwd, &reversed)?;
    backward.reverse();
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect()
}

/// A bank of `channels` filters spanning `width` consecutive positions.
/// `w` has shape `[channels, width * dim]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvFilter {
    pub width: usize,
    pub w: NodeId,
    pub b: NodeId,
}

/// Convolves each filter bank over `seq`, takes the maximum response over
/// time and concatenates the results. Sequences shorter than a filter are
/// padded with zero vectors.
pub fn conv1d_maxpool(tape: &mut Tape, seq: &[NodeId], filters: &[ConvFilter]) -> Result<NodeId> {
    let dim = match seq.first() {
        Some(&x) => tape.value(x).len(),
        None => {
            // All-padding input: every window is zero, so each bank yields its bias.
            let pooled: Vec<NodeId> = filters.iter().map(|f| f.b).collect();
            return tape.concat(&pooled);
        }
    };
    let longest = filters.iter().map(|f| f.width).max().unwrap_or(1);
    let mut padded = seq.to_vec();
    if padded.len() < longest {
        let zero = tape.constant(Tensor::zeros(&[dim]));
        padded.resize(longest, zero);
    }
    let mut pooled = Vec::with_capacity(filters.len());
    for f in filters {
        let mut responses = Vec::with_capacity(padded.len() + 1 - f.width);
        for window in padded.windows(f.width) {
            let x = tape.concat(window)?;
            responses.push(linear(tape, f.w, f.b, x)?);
        }
        pooled.push(tape.max_over(&responses)?);
    }
    tape.concat(&pooled)
}

/// Inverted dropout mask: each entry is `1/(1-p)` with probability `1-p`,
/// else zero. Evaluation mode returns all ones.
pub fn dropout_mask<R: Rng>(shape: &[usize], p: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} must be in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(Tensor::filled(shape, 1.0));
    }
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Applies a freshly drawn dropout mask to `x`. A no-op outside training.
pub fn dropout<R: Rng>(tape: &mut Tape, x: NodeId, p: f64, rng: &mut R, training: bool) -> Result<NodeId> {
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).shape(), p, rng, true)?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}
