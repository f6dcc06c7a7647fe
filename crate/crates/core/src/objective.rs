//! Loss terms and the per-example training objective.
//!
//! The full objective is `kl + nll + bow`: the KL divergence pulls the
//! prior knowledge distribution toward the posterior, the NLL scores the
//! teacher-forced response, and the bag-of-words term makes the sampled
//! knowledge vector predict the response tokens position-independently.
//! During the pretraining phase only the bag-of-words term is optimized.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{DialogueTurn, EOS};
use crate::decoder::{decode_teacher_forced, DecoderIds};
use crate::encoder::{encode_sequence, EncoderIds, EncoderOutput};
use crate::error::{Error, Result};
use crate::knowledge::{gumbel_sample, posterior, prior, KnowledgeDistribution, SampledKnowledge};
use crate::model::{DecoderMode, ModelConfig};
use crate::params::BoundParams;
use crate::tensor::{Graph, TensorId};

/// Training schedule phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BowPretrain,
    Full,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BowPretrain => "bow-pretrain",
            Phase::Full => "full",
        }
    }
}

/// Scalar loss components of one example. In the full phase
/// `total = kl + nll + bow` exactly (same summation order as the graph);
/// in the pretraining phase `total = bow` and the other components are
/// zero contributions.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub kl: f64,
    pub nll: f64,
    pub bow: f64,
    pub total: f64,
    pub phase: Phase,
}

/// A built loss graph: the bundle of values plus the node to backprop.
#[derive(Debug)]
pub struct ForwardLoss {
    pub bundle: LossBundle,
    pub total_id: TensorId,
    /// Number of scored response positions (response length + EOS).
    pub nll_positions: usize,
}

/// Negative log-likelihood of the targets under per-step distributions,
/// summed over steps.
pub fn nll_loss(g: &mut Graph, distributions: &[TensorId], targets: &[u32]) -> Result<TensorId> {
    if distributions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "nll: {} distributions vs {} targets",
            distributions.len(),
            targets.len()
        )));
    }
    let picks: Vec<TensorId> = distributions
        .iter()
        .zip(targets)
        .map(|(&d, &t)| g.pick(d, t as usize))
        .collect::<Result<_>>()?;
    let stacked = g.concat(&picks, 0)?;
    let logs = g.log(stacked);
    let total = g.sum(logs);
    Ok(g.scale(total, -1.0))
}

/// Bag-of-words loss: project the sampled knowledge vector to vocabulary
/// logits once, then score every response token against that single
/// distribution.
pub fn bow_loss(
    g: &mut Graph,
    bound: &BoundParams,
    knowledge_vector: TensorId,
    response: &[u32],
) -> Result<TensorId> {
    let logits = g.matmul(bound.id("bow.weight"), knowledge_vector)?;
    let logits = g.add(logits, bound.id("bow.bias"))?;
    let probs = g.softmax(logits)?;
    let picks: Vec<TensorId> = response
        .iter()
        .map(|&t| g.pick(probs, t as usize))
        .collect::<Result<_>>()?;
    let stacked = g.concat(&picks, 0)?;
    let logs = g.log(stacked);
    let total = g.sum(logs);
    Ok(g.scale(total, -1.0))
}

/// Knowledge-side forward pass shared by training and evaluation:
/// encoded knowledge vectors, the prior, and (when a response is used)
/// the posterior.
pub struct KnowledgeForward {
    pub encoder: EncoderOutput,
    pub knowledge_vectors: Vec<TensorId>,
    pub prior: KnowledgeDistribution,
    pub posterior: Option<KnowledgeDistribution>,
}

/// Encode the utterance and knowledge and compute the selection
/// distributions. The posterior is computed only when `with_response`.
pub fn knowledge_forward(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    turn: &DialogueTurn,
    with_response: bool,
) -> Result<KnowledgeForward> {
    if !config.mode.uses_knowledge() {
        return Err(Error::Contract(
            "knowledge pathways are disabled in no-knowledge mode".into(),
        ));
    }
    let utt_ids = EncoderIds::bind(bound, "enc_utt", "embedding", config.num_layers);
    let kn_ids = EncoderIds::bind(
        bound,
        "enc_kn",
        config.knowledge_embedding_name(),
        config.num_layers,
    );
    let encoder = encode_sequence(g, &utt_ids, config, &turn.utterance)?;
    let knowledge_vectors: Vec<TensorId> = turn
        .knowledge
        .iter()
        .map(|k| Ok(encode_sequence(g, &kn_ids, config, k)?.summary))
        .collect::<Result<_>>()?;
    let prior_dist = prior(g, encoder.summary, &knowledge_vectors)?;
    let posterior_dist = if with_response {
        let response_summary = encode_sequence(g, &kn_ids, config, &turn.response)?.summary;
        Some(posterior(
            g,
            bound,
            encoder.summary,
            response_summary,
            &knowledge_vectors,
        )?)
    } else {
        None
    };
    Ok(KnowledgeForward {
        encoder,
        knowledge_vectors,
        prior: prior_dist,
        posterior: posterior_dist,
    })
}

fn targets_with_eos(response: &[u32]) -> Vec<u32> {
    let mut t = response.to_vec();
    t.push(EOS);
    t
}

/// Build the complete per-example loss graph.
///
/// Full phase runs encoders, knowledge selection (posterior sampling,
/// prior for the KL), the teacher-forced decoder and all three loss
/// terms. The pretraining phase stops after the bag-of-words term. In
/// no-knowledge mode the KL and BOW terms are zero and selection is
/// skipped entirely.
pub fn total_loss(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    turn: &DialogueTurn,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardLoss> {
    let nll_positions = turn.response.len() + 1;
    if config.mode == DecoderMode::NoKnowledge {
        return match phase {
            Phase::BowPretrain => {
                let total_id = g.scalar(0.0);
                Ok(ForwardLoss {
                    bundle: LossBundle {
                        kl: 0.0,
                        nll: 0.0,
                        bow: 0.0,
                        total: 0.0,
                        phase,
                    },
                    total_id,
                    nll_positions,
                })
            }
            Phase::Full => {
                let utt_ids = EncoderIds::bind(bound, "enc_utt", "embedding", config.num_layers);
                let encoder = encode_sequence(g, &utt_ids, config, &turn.utterance)?;
                let dec_ids = DecoderIds::bind(bound, config);
                let dists = decode_teacher_forced(g, &dec_ids, &encoder, &turn.response, None)?;
                let nll_id = nll_loss(g, &dists, &targets_with_eos(&turn.response))?;
                let nll = g.scalar_value(nll_id);
                Ok(ForwardLoss {
                    bundle: LossBundle {
                        kl: 0.0,
                        nll,
                        bow: 0.0,
                        total: nll,
                        phase,
                    },
                    total_id: nll_id,
                    nll_positions,
                })
            }
        };
    }

    let forward = knowledge_forward(g, bound, config, turn, true)?;
    let posterior_dist = forward.posterior.as_ref().expect("posterior requested");
    let sampled: SampledKnowledge = gumbel_sample(
        g,
        posterior_dist,
        &forward.knowledge_vectors,
        config.temperature,
        rng,
    )?;
    let bow_id = bow_loss(g, bound, sampled.vector, &turn.response)?;
    match phase {
        Phase::BowPretrain => {
            let bow = g.scalar_value(bow_id);
            Ok(ForwardLoss {
                bundle: LossBundle {
                    kl: 0.0,
                    nll: 0.0,
                    bow,
                    total: bow,
                    phase,
                },
                total_id: bow_id,
                nll_positions,
            })
        }
        Phase::Full => {
            let kl_id = crate::knowledge::kl_div(
                g,
                posterior_dist,
                &forward.prior,
                config.kl_train_posterior,
            )?;
            let dec_ids = DecoderIds::bind(bound, config);
            let dists = decode_teacher_forced(
                g,
                &dec_ids,
                &forward.encoder,
                &turn.response,
                Some(sampled.vector),
            )?;
            let nll_id = nll_loss(g, &dists, &targets_with_eos(&turn.response))?;
            let partial = g.add(kl_id, nll_id)?;
            let total_id = g.add(partial, bow_id)?;
            Ok(ForwardLoss {
                bundle: LossBundle {
                    kl: g.scalar_value(kl_id),
                    nll: g.scalar_value(nll_id),
                    bow: g.scalar_value(bow_id),
                    total: g.scalar_value(total_id),
                    phase,
                },
                total_id,
                nll_positions,
            })
        }
    }
}
