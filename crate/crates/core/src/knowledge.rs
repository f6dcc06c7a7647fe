//! Knowledge selection: prior and posterior distributions over a turn's
//! knowledge collection, Gumbel-Softmax sampling, and the KL divergence
//! pulling the prior toward the posterior.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    Prior,
    Posterior,
}

/// A probability distribution over the turn's knowledge entries.
#[derive(Debug, Clone)]
pub struct KnowledgeDistribution {
    pub kind: DistributionKind,
    /// Pre-softmax scores, length N.
    pub logits: TensorId,
    /// Softmax of the logits, length N.
    pub probs: TensorId,
}

impl KnowledgeDistribution {
    pub fn len(&self, g: &Graph) -> usize {
        g.values(self.probs).len()
    }

    pub fn argmax(&self, g: &Graph) -> usize {
        argmax(g.values(self.probs))
    }
}

/// Knowledge representation handed to the decoder.
#[derive(Debug, Clone)]
pub struct SampledKnowledge {
    /// Selection weights over the collection, length N, summing to 1.
    pub weights: TensorId,
    /// Weighted mixture of the knowledge vectors, dimension `2 * hidden`.
    pub vector: TensorId,
    pub source: DistributionKind,
    /// Argmax of the weights.
    pub hard_index: usize,
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn knowledge_matrix(g: &mut Graph, knowledge: &[TensorId]) -> Result<TensorId> {
    if knowledge.is_empty() {
        return Err(Error::Contract("knowledge collection is empty".into()));
    }
    g.stack_rows(knowledge)
}

/// Prior p(k | x): softmax over dot products between each knowledge
/// vector and the utterance summary.
pub fn prior(
    g: &mut Graph,
    utterance_summary: TensorId,
    knowledge: &[TensorId],
) -> Result<KnowledgeDistribution> {
    let matrix = knowledge_matrix(g, knowledge)?;
    let logits = g.matmul(matrix, utterance_summary)?;
    let probs = g.softmax(logits)?;
    Ok(KnowledgeDistribution {
        kind: DistributionKind::Prior,
        logits,
        probs,
    })
}

/// Posterior p(k | x, y): the concatenated `[x; y]` goes through a
/// single affine layer with tanh, and the result is scored against each
/// knowledge vector by dot product.
pub fn posterior(
    g: &mut Graph,
    bound: &BoundParams,
    utterance_summary: TensorId,
    response_summary: TensorId,
    knowledge: &[TensorId],
) -> Result<KnowledgeDistribution> {
    let matrix = knowledge_matrix(g, knowledge)?;
    let joint = g.concat(&[utterance_summary, response_summary], 0)?;
    let projected = g.matmul(bound.id("posterior.weight"), joint)?;
    let projected = g.add(projected, bound.id("posterior.bias"))?;
    let query = g.tanh(projected);
    let logits = g.matmul(matrix, query)?;
    let probs = g.softmax(logits)?;
    Ok(KnowledgeDistribution {
        kind: DistributionKind::Posterior,
        logits,
        probs,
    })
}

/// Draw a Gumbel-Softmax sample: `weights = softmax((logits + g) / temperature)`
/// with standard Gumbel noise `g`. Gradients flow through the weights to
/// the logits; the noise is a constant. The mixture vector is
/// `sum_i weights_i * k_i`.
pub fn gumbel_sample(
    g: &mut Graph,
    dist: &KnowledgeDistribution,
    knowledge: &[TensorId],
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<SampledKnowledge> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Contract(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let n = g.values(dist.logits).len();
    if knowledge.len() != n {
        return Err(Error::Contract(format!(
            "distribution over {n} entries but {} knowledge vectors",
            knowledge.len()
        )));
    }
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect();
    let noise_leaf = g.leaf(noise, vec![n])?;
    let perturbed = g.add(dist.logits, noise_leaf)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let weights = g.softmax(scaled)?;
    let hard_index = argmax(g.values(perturbed));
    let matrix = knowledge_matrix(g, knowledge)?;
    let vector = g.matmul(weights, matrix)?;
    Ok(SampledKnowledge {
        weights,
        vector,
        source: dist.kind,
        hard_index,
    })
}

/// Deterministic hard selection: one-hot weights at the distribution's
/// argmax, vector equal to that knowledge entry exactly.
pub fn hard_select(
    g: &mut Graph,
    dist: &KnowledgeDistribution,
    knowledge: &[TensorId],
) -> Result<SampledKnowledge> {
    let n = g.values(dist.probs).len();
    if knowledge.len() != n {
        return Err(Error::Contract(format!(
            "distribution over {n} entries but {} knowledge vectors",
            knowledge.len()
        )));
    }
    let hard_index = dist.argmax(g);
    let mut one_hot = vec![0.0; n];
    one_hot[hard_index] = 1.0;
    let weights = g.leaf(one_hot, vec![n])?;
    Ok(SampledKnowledge {
        weights,
        vector: knowledge[hard_index],
        source: dist.kind,
        hard_index,
    })
}

/// Train/inference selection switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Train,
    Infer,
}

/// Training samples from the posterior via Gumbel-Softmax; inference
/// takes the prior's argmax (or a stochastic draw when `sample_at_infer`
/// is set).
#[allow(clippy::too_many_arguments)]
pub fn select_for_mode(
    g: &mut Graph,
    mode: SelectionMode,
    prior: &KnowledgeDistribution,
    posterior: Option<&KnowledgeDistribution>,
    knowledge: &[TensorId],
    temperature: f64,
    rng: &mut impl Rng,
    sample_at_infer: bool,
) -> Result<SampledKnowledge> {
    match mode {
        SelectionMode::Train => {
            let posterior = posterior.ok_or_else(|| {
                Error::Contract("train-mode selection requires a response".into())
            })?;
            gumbel_sample(g, posterior, knowledge, temperature, rng)
        }
        SelectionMode::Infer => {
            if sample_at_infer {
                // Gumbel-max draw, then commit to the drawn entry.
                let sampled = gumbel_sample(g, prior, knowledge, temperature, rng)?;
                let mut one_hot = vec![0.0; knowledge.len()];
                one_hot[sampled.hard_index] = 1.0;
                let weights = g.leaf(one_hot, vec![knowledge.len()])?;
                Ok(SampledKnowledge {
                    weights,
                    vector: knowledge[sampled.hard_index],
                    source: DistributionKind::Prior,
                    hard_index: sampled.hard_index,
                })
            } else {
                hard_select(g, prior, knowledge)
            }
        }
    }
}

/// KL divergence `sum_i post_i * ln(post_i / prior_i)`.
///
/// By default the posterior operand is a fixed target: its probabilities
/// enter as constants and receive no gradient. `train_posterior` keeps
/// the live posterior nodes in the graph instead.
pub fn kl_div(
    g: &mut Graph,
    posterior: &KnowledgeDistribution,
    prior: &KnowledgeDistribution,
    train_posterior: bool,
) -> Result<TensorId> {
    let n = g.values(posterior.probs).len();
    if g.values(prior.probs).len() != n {
        return Err(Error::DimensionMismatch {
            op: "kl_div",
            lhs: g.shape(posterior.probs).to_vec(),
            rhs: g.shape(prior.probs).to_vec(),
        });
    }
    let post = if train_posterior {
        posterior.probs
    } else {
        let frozen = g.values(posterior.probs).to_vec();
        g.leaf(frozen, vec![n])?
    };
    let log_post = g.log(post);
    let log_prior = g.log(prior.probs);
    let diff = g.sub(log_post, log_prior)?;
    let terms = g.mul(post, diff)?;
    Ok(g.sum(terms))
}
