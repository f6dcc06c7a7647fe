//! Response decoder: attention over encoder states, three knowledge
//! incorporation modes, teacher-forced unrolling and greedy/beam search.
//!
//! The three-argument recurrence `GRU(input, state, context)` is realized
//! as a standard GRU whose input is the concatenation `[input; context]`;
//! in concat mode the knowledge vector joins that concatenation, in
//! fusion mode an utterance GRU and a knowledge GRU run side by side and
//! a learned sigmoid gate blends their states.

use crate::corpus::{BOS, EOS};
use crate::encoder::{gru_step, EncoderOutput, GruCellIds};
use crate::error::{Error, Result};
use crate::knowledge::argmax;
use crate::model::{DecoderMode, ModelConfig};
use crate::params::BoundParams;
use crate::tensor::{Graph, TensorId};

/// Attention weights and the context vector they produce.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext {
    /// Weights over encoder positions, length n, summing to 1.
    pub weights: TensorId,
    /// Convex combination of encoder hidden states, dimension `2 * hidden`.
    pub context: TensorId,
}

/// Decoder hidden state, one tensor per layer.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<TensorId>,
    pub step: usize,
}

impl DecoderState {
    pub fn top(&self) -> TensorId {
        *self.layers.last().expect("at least one layer")
    }
}

#[derive(Debug)]
enum DecoderKind {
    /// Concat and no-knowledge modes share one GRU stack.
    Single { gru: Vec<GruCellIds> },
    Fusion {
        utterance_gru: Vec<GruCellIds>,
        knowledge_gru: Vec<GruCellIds>,
        fuse: Vec<FuseIds>,
    },
}

#[derive(Debug, Clone, Copy)]
struct FuseIds {
    weight_utt: TensorId,
    weight_kn: TensorId,
    weight_gate: TensorId,
    bias_gate: TensorId,
}

/// Bound graph ids for the whole decoder.
#[derive(Debug)]
pub struct DecoderIds {
    pub mode: DecoderMode,
    kind: DecoderKind,
    init: Vec<(TensorId, TensorId)>,
    attn_weight: TensorId,
    output_weight: TensorId,
    output_bias: TensorId,
    embedding: TensorId,
}

impl DecoderIds {
    pub fn bind(bound: &BoundParams, config: &ModelConfig) -> Self {
        let layers = config.num_layers;
        let kind = match config.mode {
            DecoderMode::Concat | DecoderMode::NoKnowledge => DecoderKind::Single {
                gru: (0..layers)
                    .map(|l| GruCellIds::bind(bound, &format!("dec.gru.l{l}")))
                    .collect(),
            },
            DecoderMode::Fusion => DecoderKind::Fusion {
                utterance_gru: (0..layers)
                    .map(|l| GruCellIds::bind(bound, &format!("dec.utt_gru.l{l}")))
                    .collect(),
                knowledge_gru: (0..layers)
                    .map(|l| GruCellIds::bind(bound, &format!("dec.kn_gru.l{l}")))
                    .collect(),
                fuse: (0..layers)
                    .map(|l| FuseIds {
                        weight_utt: bound.id(&format!("dec.fuse.l{l}.weight_utt")),
                        weight_kn: bound.id(&format!("dec.fuse.l{l}.weight_kn")),
                        weight_gate: bound.id(&format!("dec.fuse.l{l}.weight_gate")),
                        bias_gate: bound.id(&format!("dec.fuse.l{l}.bias_gate")),
                    })
                    .collect(),
            },
        };
        DecoderIds {
            mode: config.mode,
            kind,
            init: (0..layers)
                .map(|l| {
                    (
                        bound.id(&format!("dec.init.l{l}.weight")),
                        bound.id(&format!("dec.init.l{l}.bias")),
                    )
                })
                .collect(),
            attn_weight: bound.id("dec.attn.weight"),
            output_weight: bound.id("output.weight"),
            output_bias: bound.id("output.bias"),
            embedding: bound.id("embedding"),
        }
    }

    pub fn embed(&self, g: &mut Graph, token: u32) -> Result<TensorId> {
        g.row(self.embedding, token as usize)
    }

    /// Initial state from the utterance summary: one learned affine +
    /// tanh per layer, mapping `2 * hidden` down to `hidden`.
    pub fn init_state(&self, g: &mut Graph, summary: TensorId) -> Result<DecoderState> {
        let layers = self
            .init
            .iter()
            .map(|&(w, b)| {
                let proj = g.matmul(w, summary)?;
                let proj = g.add(proj, b)?;
                Ok(g.tanh(proj))
            })
            .collect::<Result<_>>()?;
        Ok(DecoderState { layers, step: 0 })
    }
}

/// Attention: scores the previous top-layer state against every encoder
/// hidden state (`score_i = (W s_prev) . h_i`) and mixes the states by
/// the softmax of those scores.
pub fn attend(
    g: &mut Graph,
    ids: &DecoderIds,
    s_prev: TensorId,
    hidden_matrix: TensorId,
) -> Result<AttentionContext> {
    let query = g.matmul(ids.attn_weight, s_prev)?;
    let scores = g.matmul(hidden_matrix, query)?;
    let weights = g.softmax(scores)?;
    let context = g.matmul(weights, hidden_matrix)?;
    Ok(AttentionContext { weights, context })
}

/// One decoder step in concat mode: a single GRU whose input is
/// `[previous token embedding; knowledge vector; context]`.
pub fn step_concat(
    g: &mut Graph,
    ids: &DecoderIds,
    state: &DecoderState,
    prev_embedding: TensorId,
    knowledge_vector: TensorId,
    ctx: &AttentionContext,
) -> Result<DecoderState> {
    if ids.mode != DecoderMode::Concat {
        return Err(Error::Contract(format!(
            "step_concat called on a {} decoder",
            ids.mode.as_str()
        )));
    }
    let DecoderKind::Single { gru } = &ids.kind else {
        unreachable!()
    };
    let mut lower = prev_embedding;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (cell, &prev_state) in gru.iter().zip(&state.layers) {
        let input = g.concat(&[lower, knowledge_vector, ctx.context], 0)?;
        let next = gru_step(g, cell, input, prev_state)?;
        layers.push(next);
        lower = next;
    }
    Ok(DecoderState {
        layers,
        step: state.step + 1,
    })
}

/// One decoder step without knowledge: a single GRU over
/// `[previous token embedding; context]` (the plain attention seq2seq).
pub fn step_no_knowledge(
    g: &mut Graph,
    ids: &DecoderIds,
    state: &DecoderState,
    prev_embedding: TensorId,
    ctx: &AttentionContext,
) -> Result<DecoderState> {
    if ids.mode != DecoderMode::NoKnowledge {
        return Err(Error::Contract(format!(
            "step_no_knowledge called on a {} decoder",
            ids.mode.as_str()
        )));
    }
    let DecoderKind::Single { gru } = &ids.kind else {
        unreachable!()
    };
    let mut lower = prev_embedding;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (cell, &prev_state) in gru.iter().zip(&state.layers) {
        let input = g.concat(&[lower, ctx.context], 0)?;
        let next = gru_step(g, cell, input, prev_state)?;
        layers.push(next);
        lower = next;
    }
    Ok(DecoderState {
        layers,
        step: state.step + 1,
    })
}

/// One decoder step through the gated fusion unit: an utterance GRU and
/// a knowledge GRU produce candidate states, and
/// `gate = sigmoid(W_g [tanh(W_u s_u); tanh(W_k s_k)] + b_g)` blends them
/// as `gate * s_u + (1 - gate) * s_k`.
pub fn step_fusion(
    g: &mut Graph,
    ids: &DecoderIds,
    state: &DecoderState,
    prev_embedding: TensorId,
    knowledge_vector: TensorId,
    ctx: &AttentionContext,
) -> Result<DecoderState> {
    if ids.mode != DecoderMode::Fusion {
        return Err(Error::Contract(format!(
            "step_fusion called on a {} decoder",
            ids.mode.as_str()
        )));
    }
    let DecoderKind::Fusion {
        utterance_gru,
        knowledge_gru,
        fuse,
    } = &ids.kind
    else {
        unreachable!()
    };
    let mut lower = prev_embedding;
    let mut layers = Vec::with_capacity(state.layers.len());
    for l in 0..state.layers.len() {
        let prev_state = state.layers[l];
        let utt_input = g.concat(&[lower, ctx.context], 0)?;
        let state_utt = gru_step(g, &utterance_gru[l], utt_input, prev_state)?;
        let kn_input = g.concat(&[knowledge_vector, ctx.context], 0)?;
        let state_kn = gru_step(g, &knowledge_gru[l], kn_input, prev_state)?;

        let f = &fuse[l];
        let proj_utt = g.matmul(f.weight_utt, state_utt)?;
        let proj_utt = g.tanh(proj_utt);
        let proj_kn = g.matmul(f.weight_kn, state_kn)?;
        let proj_kn = g.tanh(proj_kn);
        let joint = g.concat(&[proj_utt, proj_kn], 0)?;
        let gate_pre = g.matmul(f.weight_gate, joint)?;
        let gate_pre = g.add(gate_pre, f.bias_gate)?;
        let gate = g.sigmoid(gate_pre);

        let from_utt = g.mul(gate, state_utt)?;
        let inverse = g.one_minus(gate);
        let from_kn = g.mul(inverse, state_kn)?;
        let next = g.add(from_utt, from_kn)?;
        layers.push(next);
        lower = next;
    }
    Ok(DecoderState {
        layers,
        step: state.step + 1,
    })
}

/// Dispatch to the step matching the decoder's mode.
pub fn step(
    g: &mut Graph,
    ids: &DecoderIds,
    state: &DecoderState,
    prev_embedding: TensorId,
    knowledge_vector: Option<TensorId>,
    ctx: &AttentionContext,
) -> Result<DecoderState> {
    match ids.mode {
        DecoderMode::Concat => {
            let k = knowledge_vector
                .ok_or_else(|| Error::Contract("concat decoder needs a knowledge vector".into()))?;
            step_concat(g, ids, state, prev_embedding, k, ctx)
        }
        DecoderMode::Fusion => {
            let k = knowledge_vector
                .ok_or_else(|| Error::Contract("fusion decoder needs a knowledge vector".into()))?;
            step_fusion(g, ids, state, prev_embedding, k, ctx)
        }
        DecoderMode::NoKnowledge => step_no_knowledge(g, ids, state, prev_embedding, ctx),
    }
}

/// Output distribution `softmax(W_o [s_t; c_t] + b_o)` over the vocabulary.
pub fn output_distribution(
    g: &mut Graph,
    ids: &DecoderIds,
    state: &DecoderState,
    ctx: &AttentionContext,
) -> Result<TensorId> {
    let joint = g.concat(&[state.top(), ctx.context], 0)?;
    let logits = g.matmul(ids.output_weight, joint)?;
    let logits = g.add(logits, ids.output_bias)?;
    g.softmax(logits)
}

/// Stack the encoder's hidden states into the `[n, 2 * hidden]` matrix
/// attention works over.
pub fn hidden_matrix(g: &mut Graph, encoder: &EncoderOutput) -> Result<TensorId> {
    g.stack_rows(&encoder.hidden_states)
}

/// Teacher-forced unroll: feeds BOS then the gold response tokens and
/// returns one probability vector per position of `response + EOS`
/// (`m + 1` vectors in total).
pub fn decode_teacher_forced(
    g: &mut Graph,
    ids: &DecoderIds,
    encoder: &EncoderOutput,
    response: &[u32],
    knowledge_vector: Option<TensorId>,
) -> Result<Vec<TensorId>> {
    let matrix = hidden_matrix(g, encoder)?;
    let mut state = ids.init_state(g, encoder.summary)?;
    let mut prev_token = BOS;
    let mut distributions = Vec::with_capacity(response.len() + 1);
    for t in 0..=response.len() {
        let ctx = attend(g, ids, state.top(), matrix)?;
        let prev_embedding = ids.embed(g, prev_token)?;
        state = step(g, ids, &state, prev_embedding, knowledge_vector, &ctx)?;
        distributions.push(output_distribution(g, ids, &state, &ctx)?);
        if t < response.len() {
            prev_token = response[t];
        }
    }
    Ok(distributions)
}

/// Decoding strategy for generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// Generate a response. Greedy takes the argmax each step; beam search
/// keeps `b` hypotheses scored by summed log probability and picks the
/// best length-normalized finished hypothesis. EOS terminates a
/// hypothesis and is not part of the returned sequence.
pub fn decode_generate(
    g: &mut Graph,
    ids: &DecoderIds,
    encoder: &EncoderOutput,
    knowledge_vector: Option<TensorId>,
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<u32>> {
    match strategy {
        DecodeStrategy::Greedy => {
            let matrix = hidden_matrix(g, encoder)?;
            let mut state = ids.init_state(g, encoder.summary)?;
            let mut prev_token = BOS;
            let mut out = Vec::new();
            for _ in 0..max_len {
                let ctx = attend(g, ids, state.top(), matrix)?;
                let prev_embedding = ids.embed(g, prev_token)?;
                state = step(g, ids, &state, prev_embedding, knowledge_vector, &ctx)?;
                let probs = output_distribution(g, ids, &state, &ctx)?;
                let next = argmax(g.values(probs)) as u32;
                if next == EOS {
                    break;
                }
                out.push(next);
                prev_token = next;
            }
            Ok(out)
        }
        DecodeStrategy::Beam(width) => {
            beam_search(g, ids, encoder, knowledge_vector, width, max_len)
        }
    }
}

struct Hypothesis {
    tokens: Vec<u32>,
    state: DecoderState,
    log_prob: f64,
}

fn beam_search(
    g: &mut Graph,
    ids: &DecoderIds,
    encoder: &EncoderOutput,
    knowledge_vector: Option<TensorId>,
    width: usize,
    max_len: usize,
) -> Result<Vec<u32>> {
    if width < 1 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let matrix = hidden_matrix(g, encoder)?;
    let init = ids.init_state(g, encoder.summary)?;
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        state: init,
        log_prob: 0.0,
    }];
    // finished: (tokens, normalized score)
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let normalize = |log_prob: f64, len: usize| log_prob / len.max(1) as f64;

    for _ in 0..max_len {
        if beams.is_empty() {
            break;
        }
        // (score, beam index, token) candidates, deterministically ordered
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        let mut stepped_states = Vec::with_capacity(beams.len());
        for (bi, hyp) in beams.iter().enumerate() {
            let prev_token = hyp.tokens.last().copied().unwrap_or(BOS);
            let ctx = attend(g, ids, hyp.state.top(), matrix)?;
            let prev_embedding = ids.embed(g, prev_token)?;
            let next_state = step(g, ids, &hyp.state, prev_embedding, knowledge_vector, &ctx)?;
            let probs = output_distribution(g, ids, &next_state, &ctx)?;
            let values = g.values(probs);
            let mut ranked: Vec<(usize, f64)> = values.iter().cloned().enumerate().collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(token, p) in ranked.iter().take(width) {
                candidates.push((hyp.log_prob + p.ln(), bi, token as u32));
            }
            stepped_states.push(next_state);
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_beams = Vec::with_capacity(width);
        for &(score, bi, token) in candidates.iter() {
            if next_beams.len() >= width {
                break;
            }
            if token == EOS {
                finished.push((
                    beams[bi].tokens.clone(),
                    normalize(score, beams[bi].tokens.len()),
                ));
            } else {
                let mut tokens = beams[bi].tokens.clone();
                tokens.push(token);
                next_beams.push(Hypothesis {
                    tokens,
                    state: stepped_states[bi].clone(),
                    log_prob: score,
                });
            }
        }
        beams = next_beams;
        if finished.len() >= width {
            break;
        }
    }
    for hyp in beams {
        finished.push((
            hyp.tokens.clone(),
            normalize(hyp.log_prob, hyp.tokens.len()),
        ));
    }
    finished.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(finished
        .into_iter()
        .next()
        .map(|(t, _)| t)
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_sequence, EncoderIds};
    use crate::model::{DecoderMode, ModelConfig};
    use crate::params::ParamStore;

    fn config(mode: DecoderMode) -> ModelConfig {
        let mut c = ModelConfig::desk_scale(10, mode);
        c.embed_dim = 4;
        c.hidden_dim = 3;
        c
    }

    fn setup(mode: DecoderMode, seed: u64) -> (ModelConfig, ParamStore) {
        let c = config(mode);
        let store = ParamStore::init(&c.param_specs(), seed);
        (c, store)
    }

    #[test]
    fn attention_single_state_is_identity() {
        let (c, store) = setup(DecoderMode::NoKnowledge, 1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let h = g
            .leaf(vec![0.3, -0.9, 1.2, 0.1, 0.0, 2.0], vec![1, 6])
            .unwrap();
        let s = g.leaf(vec![0.5, 0.5, 0.5], vec![3]).unwrap();
        let ctx = attend(&mut g, &ids, s, h).unwrap();
        assert_eq!(g.values(ctx.weights), &[1.0]);
        assert_eq!(g.values(ctx.context), g.values(h));
    }

    #[test]
    fn attention_identical_states_give_that_state() {
        let (c, store) = setup(DecoderMode::NoKnowledge, 2);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let row = [0.4, -0.1, 0.7, 0.2, -0.6, 1.0];
        let mut both = row.to_vec();
        both.extend_from_slice(&row);
        let h = g.leaf(both, vec![2, 6]).unwrap();
        let s = g.leaf(vec![1.0, -2.0, 0.5], vec![3]).unwrap();
        let ctx = attend(&mut g, &ids, s, h).unwrap();
        let w = g.values(ctx.weights);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
        for (c_v, r) in g.values(ctx.context).iter().zip(&row) {
            assert!((c_v - r).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_hand_computed_two_state_case() {
        // hidden 1 (2d = 2). Attention weight fixed to the identity-ish
        // map [1; 0] so the query is (s, 0) and score_i = s * h_i[0].
        let (c, mut store) = {
            let mut c = ModelConfig::desk_scale(10, DecoderMode::NoKnowledge);
            c.embed_dim = 2;
            c.hidden_dim = 1;
            let store = ParamStore::init(&c.param_specs(), 3);
            (c, store)
        };
        let w = store.get_mut("dec.attn.weight");
        w.values = vec![1.0, 0.0]; // shape [2, 1]
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        // states h1 = (ln 2, 5), h2 = (0, -1); s_prev = 1
        let h = g.leaf(vec![2f64.ln(), 5.0, 0.0, -1.0], vec![2, 2]).unwrap();
        let s = g.leaf(vec![1.0], vec![1]).unwrap();
        let ctx = attend(&mut g, &ids, s, h).unwrap();
        // scores (ln 2, 0) -> weights (2/3, 1/3)
        let w = g.values(ctx.weights);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        let expect = [2.0 / 3.0 * 2f64.ln(), 2.0 / 3.0 * 5.0 - 1.0 / 3.0];
        for (a, e) in g.values(ctx.context).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn step_mode_mismatch_is_contract_error() {
        let (c, store) = setup(DecoderMode::Fusion, 4);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let state = DecoderState {
            layers: vec![g.leaf(vec![0.0; 3], vec![3]).unwrap()],
            step: 0,
        };
        let emb = g.leaf(vec![0.0; 4], vec![4]).unwrap();
        let k = g.leaf(vec![0.0; 6], vec![6]).unwrap();
        let ctx = AttentionContext {
            weights: g.leaf(vec![1.0], vec![1]).unwrap(),
            context: g.leaf(vec![0.0; 6], vec![6]).unwrap(),
        };
        assert!(step_concat(&mut g, &ids, &state, emb, k, &ctx).is_err());
        assert!(step_no_knowledge(&mut g, &ids, &state, emb, &ctx).is_err());
        assert!(step_fusion(&mut g, &ids, &state, emb, k, &ctx).is_ok());
    }

    #[test]
    fn zero_param_concat_step_halves_state() {
        let (c, mut store) = setup(DecoderMode::Concat, 5);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            if name.starts_with("dec.gru") {
                store
                    .get_mut(&name)
                    .values
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let prev = g.leaf(vec![0.8, -0.2, 1.4], vec![3]).unwrap();
        let state = DecoderState {
            layers: vec![prev],
            step: 3,
        };
        let emb = g.leaf(vec![0.1; 4], vec![4]).unwrap();
        let k = g.leaf(vec![0.2; 6], vec![6]).unwrap();
        let ctx = AttentionContext {
            weights: g.leaf(vec![1.0], vec![1]).unwrap(),
            context: g.leaf(vec![-0.3; 6], vec![6]).unwrap(),
        };
        let next = step_concat(&mut g, &ids, &state, emb, k, &ctx).unwrap();
        for (n, p) in g.values(next.layers[0]).iter().zip(g.values(prev)) {
            assert!((n - 0.5 * p).abs() < 1e-15);
        }
        assert_eq!(next.step, 4);
    }

    #[test]
    fn concat_step_reacts_to_knowledge_vector() {
        let (c, store) = setup(DecoderMode::Concat, 6);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let state = DecoderState {
            layers: vec![g.leaf(vec![0.1, 0.2, 0.3], vec![3]).unwrap()],
            step: 0,
        };
        let emb = g.leaf(vec![0.5; 4], vec![4]).unwrap();
        let ctx = AttentionContext {
            weights: g.leaf(vec![1.0], vec![1]).unwrap(),
            context: g.leaf(vec![0.4; 6], vec![6]).unwrap(),
        };
        let k1 = g.leaf(vec![0.0; 6], vec![6]).unwrap();
        let k2 = g.leaf(vec![0.9; 6], vec![6]).unwrap();
        let out1 = step_concat(&mut g, &ids, &state, emb, k1, &ctx).unwrap();
        let out2 = step_concat(&mut g, &ids, &state, emb, k2, &ctx).unwrap();
        let delta: f64 = g
            .values(out1.layers[0])
            .iter()
            .zip(g.values(out2.layers[0]))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn fusion_blend_stays_between_candidate_states() {
        let (c, store) = setup(DecoderMode::Fusion, 7);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let prev = g.leaf(vec![0.2, -0.4, 0.6], vec![3]).unwrap();
        let state = DecoderState {
            layers: vec![prev],
            step: 0,
        };
        let emb = g.leaf(vec![0.3, 0.1, -0.2, 0.8], vec![4]).unwrap();
        let k = g
            .leaf(vec![0.5, -0.5, 0.25, 0.0, 1.0, -1.0], vec![6])
            .unwrap();
        let ctx = AttentionContext {
            weights: g.leaf(vec![1.0], vec![1]).unwrap(),
            context: g.leaf(vec![0.1; 6], vec![6]).unwrap(),
        };
        // independent candidate states through the same cells
        let utt_cell = GruCellIds::bind(&bound, "dec.utt_gru.l0");
        let kn_cell = GruCellIds::bind(&bound, "dec.kn_gru.l0");
        let utt_input = g.concat(&[emb, ctx.context], 0).unwrap();
        let s_utt = gru_step(&mut g, &utt_cell, utt_input, prev).unwrap();
        let kn_input = g.concat(&[k, ctx.context], 0).unwrap();
        let s_kn = gru_step(&mut g, &kn_cell, kn_input, prev).unwrap();

        let fused = step_fusion(&mut g, &ids, &state, emb, k, &ctx).unwrap();
        for i in 0..3 {
            let lo = g.values(s_utt)[i].min(g.values(s_kn)[i]);
            let hi = g.values(s_utt)[i].max(g.values(s_kn)[i]);
            let v = g.values(fused.layers[0])[i];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            // the sigmoid gate never saturates exactly for finite logits
            assert!(v > lo - 1e-12 || v < hi + 1e-12);
        }
    }

    #[test]
    fn fusion_equal_candidates_pass_through() {
        // Make the knowledge GRU identical to the utterance GRU and feed
        // it the same input: the gate then blends two equal states.
        let mut c = ModelConfig::desk_scale(10, DecoderMode::Fusion);
        c.embed_dim = 6; // equals 2 * hidden so the inputs line up
        c.hidden_dim = 3;
        let mut store = ParamStore::init(&c.param_specs(), 8);
        for gate in ["update", "reset", "candidate"] {
            for kind in ["weight", "recur", "bias"] {
                let src = store
                    .get(&format!("dec.utt_gru.l0.{kind}_{gate}"))
                    .values
                    .clone();
                store
                    .get_mut(&format!("dec.kn_gru.l0.{kind}_{gate}"))
                    .values = src;
            }
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let prev = g.leaf(vec![0.3, -0.1, 0.9], vec![3]).unwrap();
        let state = DecoderState {
            layers: vec![prev],
            step: 0,
        };
        let shared_vals = vec![0.4, -0.7, 0.2, 0.0, 0.5, -0.3];
        let emb = g.leaf(shared_vals.clone(), vec![6]).unwrap();
        let k = g.leaf(shared_vals, vec![6]).unwrap();
        let ctx = AttentionContext {
            weights: g.leaf(vec![1.0], vec![1]).unwrap(),
            context: g.leaf(vec![0.2; 6], vec![6]).unwrap(),
        };
        let utt_cell = GruCellIds::bind(&bound, "dec.utt_gru.l0");
        let input = g.concat(&[emb, ctx.context], 0).unwrap();
        let s_utt = gru_step(&mut g, &utt_cell, input, prev).unwrap();
        let fused = step_fusion(&mut g, &ids, &state, emb, k, &ctx).unwrap();
        for (f, u) in g.values(fused.layers[0]).iter().zip(g.values(s_utt)) {
            assert!((f - u).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_gate_bias_drives_state_toward_utterance_branch() {
        // Zero the knowledge GRU and raise the gate bias: the fused state
        // approaches the utterance branch monotonically.
        let (c, mut store) = setup(DecoderMode::Fusion, 9);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            if name.starts_with("dec.kn_gru") {
                store
                    .get_mut(&name)
                    .values
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let mut prev_dist = f64::INFINITY;
        for bias in [0.0, 2.0, 4.0, 8.0, 16.0] {
            let mut biased = store.clone();
            biased
                .get_mut("dec.fuse.l0.bias_gate")
                .values
                .iter_mut()
                .for_each(|v| *v = bias);
            let mut g = Graph::new();
            let bound = biased.bind(&mut g).unwrap();
            let ids = DecoderIds::bind(&bound, &c);
            let prev = g.leaf(vec![0.2, -0.4, 0.6], vec![3]).unwrap();
            let state = DecoderState {
                layers: vec![prev],
                step: 0,
            };
            let emb = g.leaf(vec![0.3, 0.1, -0.2, 0.8], vec![4]).unwrap();
            let k = g.leaf(vec![0.5; 6], vec![6]).unwrap();
            let ctx = AttentionContext {
                weights: g.leaf(vec![1.0], vec![1]).unwrap(),
                context: g.leaf(vec![0.1; 6], vec![6]).unwrap(),
            };
            let utt_cell = GruCellIds::bind(&bound, "dec.utt_gru.l0");
            let input = g.concat(&[emb, ctx.context], 0).unwrap();
            let s_utt = gru_step(&mut g, &utt_cell, input, prev).unwrap();
            let fused = step_fusion(&mut g, &ids, &state, emb, k, &ctx).unwrap();
            let dist: f64 = g
                .values(fused.layers[0])
                .iter()
                .zip(g.values(s_utt))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                dist <= prev_dist + 1e-15,
                "bias {bias}: {dist} > {prev_dist}"
            );
            prev_dist = dist;
        }
        assert!(prev_dist < 1e-6);
    }

    #[test]
    fn zero_output_projection_is_uniform_and_shift_invariant() {
        let (c, mut store) = setup(DecoderMode::NoKnowledge, 10);
        store
            .get_mut("output.weight")
            .values
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let ids = DecoderIds::bind(&bound, &c);
        let state = DecoderState {
            layers: vec![g.leaf(vec![0.4, 0.4, 0.4], vec![3]).unwrap()],
            step: 0,
        };
        let ctx = AttentionContext {
            weights: g.leaf(vec![1.0], vec![1]).unwrap(),
            context: g.leaf(vec![0.7; 6], vec![6]).unwrap(),
        };
        let probs = output_distribution(&mut g, &ids, &state, &ctx).unwrap();
        let v = g.values(probs);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for p in v {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    fn encode_fixture(
        g: &mut Graph,
        store: &ParamStore,
        c: &ModelConfig,
        tokens: &[u32],
    ) -> (BoundParams, EncoderOutput) {
        let bound = store.bind(g).unwrap();
        let enc_ids = EncoderIds::bind(&bound, "enc_utt", "embedding", c.num_layers);
        let out = encode_sequence(g, &enc_ids, c, tokens).unwrap();
        (bound, out)
    }

    use crate::params::BoundParams;

    #[test]
    fn teacher_forcing_emits_m_plus_one_distributions() {
        let (c, store) = setup(DecoderMode::NoKnowledge, 11);
        let mut g = Graph::new();
        let (bound, enc) = encode_fixture(&mut g, &store, &c, &[4, 5, 6]);
        let ids = DecoderIds::bind(&bound, &c);
        let response = [7u32, 8, 4];
        let dists = decode_teacher_forced(&mut g, &ids, &enc, &response, None).unwrap();
        assert_eq!(dists.len(), response.len() + 1);
        for d in &dists {
            let s: f64 = g.values(*d).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_forcing_matches_manual_unroll() {
        let (c, store) = setup(DecoderMode::Concat, 12);
        let mut g = Graph::new();
        let (bound, enc) = encode_fixture(&mut g, &store, &c, &[4, 9]);
        let ids = DecoderIds::bind(&bound, &c);
        let k = g
            .leaf(vec![0.3, -0.2, 0.8, 0.0, 0.1, 0.6], vec![6])
            .unwrap();
        let response = [5u32, 6];
        let auto = decode_teacher_forced(&mut g, &ids, &enc, &response, Some(k)).unwrap();

        // manual unroll, step by step
        let matrix = hidden_matrix(&mut g, &enc).unwrap();
        let mut state = ids.init_state(&mut g, enc.summary).unwrap();
        let mut manual = Vec::new();
        let mut prev = BOS;
        for t in 0..=response.len() {
            let ctx = attend(&mut g, &ids, state.top(), matrix).unwrap();
            let emb = ids.embed(&mut g, prev).unwrap();
            state = step_concat(&mut g, &ids, &state, emb, k, &ctx).unwrap();
            manual.push(output_distribution(&mut g, &ids, &state, &ctx).unwrap());
            if t < response.len() {
                prev = response[t];
            }
        }
        for (a, m) in auto.iter().zip(&manual) {
            assert_eq!(g.values(*a), g.values(*m));
        }
    }

    #[test]
    fn rigged_parameters_emit_fixed_chain() {
        // hidden 1, zero GRU and attention parameters: the state decays
        // as s_t = 0.5^t * s_0 with s_0 = tanh(bias). Output weights read
        // only the state coordinate, so logits are w_j * s_t + b_j and we
        // can schedule argmaxes by hand: token 4, then 5, then EOS.
        let mut c = ModelConfig::desk_scale(6, DecoderMode::NoKnowledge);
        c.embed_dim = 2;
        c.hidden_dim = 1;
        let mut store = ParamStore::init(&c.param_specs(), 13);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let keep_bias = name == "dec.init.l0.bias";
            if name.starts_with("dec.") && !keep_bias {
                store
                    .get_mut(&name)
                    .values
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        store.get_mut("dec.init.l0.bias").values = vec![5.0]; // s_0 ~ 1
        let w = store.get_mut("output.weight"); // shape [6, 3]: [s; c]
        w.values.iter_mut().for_each(|v| *v = 0.0);
        w.values[3 * 3] = -48.0; // EOS row reads state
        w.values[4 * 3] = 40.0; // token 4
        w.values[5 * 3] = 0.0; // token 5
        store.get_mut("output.bias").values = vec![-100.0, -100.0, -100.0, 9.0, -14.0, 2.5];

        let mut g = Graph::new();
        let (bound, enc) = encode_fixture(&mut g, &store, &c, &[4, 5]);
        let ids = DecoderIds::bind(&bound, &c);
        let out = decode_generate(&mut g, &ids, &enc, None, DecodeStrategy::Greedy, 10).unwrap();
        assert_eq!(out, vec![4, 5]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for mode in [DecoderMode::NoKnowledge, DecoderMode::Concat] {
            let (c, store) = setup(mode, 14);
            let k_needed = mode != DecoderMode::NoKnowledge;
            let mut g = Graph::new();
            let (bound, enc) = encode_fixture(&mut g, &store, &c, &[4, 7, 5]);
            let ids = DecoderIds::bind(&bound, &c);
            let k = if k_needed {
                Some(g.leaf(vec![0.2; 6], vec![6]).unwrap())
            } else {
                None
            };
            let greedy = decode_generate(&mut g, &ids, &enc, k, DecodeStrategy::Greedy, 8).unwrap();
            let beam = decode_generate(&mut g, &ids, &enc, k, DecodeStrategy::Beam(1), 8).unwrap();
            assert_eq!(greedy, beam);
            assert!(greedy.len() <= 8);
        }
    }

    #[test]
    fn beam_zero_is_rejected() {
        let (c, store) = setup(DecoderMode::NoKnowledge, 15);
        let mut g = Graph::new();
        let (bound, enc) = encode_fixture(&mut g, &store, &c, &[4]);
        let ids = DecoderIds::bind(&bound, &c);
        assert!(decode_generate(&mut g, &ids, &enc, None, DecodeStrategy::Beam(0), 8).is_err());
    }
}
