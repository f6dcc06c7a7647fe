//! Bidirectional GRU encoders.
//!
//! The utterance encoder and the knowledge encoder are structurally
//! identical but parameter-disjoint. Each produces per-token hidden
//! states `[fwd_t; bwd_t]` and a summary `[fwd_last; bwd_first]`; the
//! summary of the utterance encoder doubles as the decoder's initial
//! state source.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::BoundParams;
use crate::tensor::{Graph, TensorId};

/// Graph ids of one GRU cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruCellIds {
    pub weight_update: TensorId,
    pub recur_update: TensorId,
    pub bias_update: TensorId,
    pub weight_reset: TensorId,
    pub recur_reset: TensorId,
    pub bias_reset: TensorId,
    pub weight_candidate: TensorId,
    pub recur_candidate: TensorId,
    pub bias_candidate: TensorId,
}

impl GruCellIds {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Self {
        GruCellIds {
            weight_update: bound.id(&format!("{prefix}.weight_update")),
            recur_update: bound.id(&format!("{prefix}.recur_update")),
            bias_update: bound.id(&format!("{prefix}.bias_update")),
            weight_reset: bound.id(&format!("{prefix}.weight_reset")),
            recur_reset: bound.id(&format!("{prefix}.recur_reset")),
            bias_reset: bound.id(&format!("{prefix}.bias_reset")),
            weight_candidate: bound.id(&format!("{prefix}.weight_candidate")),
            recur_candidate: bound.id(&format!("{prefix}.recur_candidate")),
            bias_candidate: bound.id(&format!("{prefix}.bias_candidate")),
        }
    }
}

/// One GRU step:
/// `update = sigmoid(W_u i + U_u s + b_u)`,
/// `reset = sigmoid(W_r i + U_r s + b_r)`,
/// `cand = tanh(W_c i + U_c (reset * s) + b_c)`,
/// `s' = (1 - update) * s + update * cand`.
pub fn gru_step(
    g: &mut Graph,
    cell: &GruCellIds,
    input: TensorId,
    state: TensorId,
) -> Result<TensorId> {
    let gate = |g: &mut Graph, w, u, b| -> Result<TensorId> {
        let wi = g.matmul(w, input)?;
        let us = g.matmul(u, state)?;
        let sum = g.add(wi, us)?;
        g.add(sum, b)
    };
    let update_pre = gate(g, cell.weight_update, cell.recur_update, cell.bias_update)?;
    let update = g.sigmoid(update_pre);
    let reset_pre = gate(g, cell.weight_reset, cell.recur_reset, cell.bias_reset)?;
    let reset = g.sigmoid(reset_pre);

    let gated_state = g.mul(reset, state)?;
    let wi = g.matmul(cell.weight_candidate, input)?;
    let us = g.matmul(cell.recur_candidate, gated_state)?;
    let pre = g.add(wi, us)?;
    let pre = g.add(pre, cell.bias_candidate)?;
    let candidate = g.tanh(pre);

    let keep = g.one_minus(update);
    let kept = g.mul(keep, state)?;
    let new = g.mul(update, candidate)?;
    g.add(kept, new)
}

/// Per-token hidden states (dimension `2 * hidden`) and the sequence
/// summary `[fwd_last; bwd_first]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden_states: Vec<TensorId>,
    pub summary: TensorId,
}

/// Bound ids for a stacked bidirectional encoder.
#[derive(Debug)]
pub struct EncoderIds {
    layers: Vec<(GruCellIds, GruCellIds)>,
    embedding: TensorId,
}

impl EncoderIds {
    /// `name` is `enc_utt` or `enc_kn`; `embedding_name` selects the
    /// (possibly shared) embedding table.
    pub fn bind(bound: &BoundParams, name: &str, embedding_name: &str, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                (
                    GruCellIds::bind(bound, &format!("{name}.l{l}.fwd")),
                    GruCellIds::bind(bound, &format!("{name}.l{l}.bwd")),
                )
            })
            .collect();
        EncoderIds {
            layers,
            embedding: bound.id(embedding_name),
        }
    }
}

/// Run the encoder over a token sequence.
pub fn encode_sequence(
    g: &mut Graph,
    ids: &EncoderIds,
    config: &ModelConfig,
    tokens: &[u32],
) -> Result<EncoderOutput> {
    if tokens.is_empty() {
        return Err(Error::Contract("encoder: empty input sequence".into()));
    }
    let hidden = config.hidden_dim;
    let mut inputs: Vec<TensorId> = tokens
        .iter()
        .map(|&t| g.row(ids.embedding, t as usize))
        .collect::<Result<_>>()?;

    let mut summary = None;
    let mut states = Vec::new();
    for (fwd_cell, bwd_cell) in &ids.layers {
        let n = inputs.len();
        let mut fwd = Vec::with_capacity(n);
        let mut state = g.leaf(vec![0.0; hidden], vec![hidden])?;
        for &input in &inputs {
            state = gru_step(g, fwd_cell, input, state)?;
            fwd.push(state);
        }
        let mut bwd = vec![fwd[0]; n];
        let mut state = g.leaf(vec![0.0; hidden], vec![hidden])?;
        for t in (0..n).rev() {
            state = gru_step(g, bwd_cell, inputs[t], state)?;
            bwd[t] = state;
        }
        states = (0..n)
            .map(|t| g.concat(&[fwd[t], bwd[t]], 0))
            .collect::<Result<_>>()?;
        summary = Some(g.concat(&[fwd[n - 1], bwd[0]], 0)?);
        inputs = states.clone();
    }
    Ok(EncoderOutput {
        hidden_states: states,
        summary: summary.expect("at least one layer"),
    })
}
