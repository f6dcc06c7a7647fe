//! Model evaluation: generate responses for a split, score them with
//! the corpus metrics, and report knowledge-selection accuracy against
//! gold indices when the data carries them.

use std::io::Write;
use std::path::Path;

use crate::corpus::{DialogueTurn, Vocabulary, EOS};
use crate::decoder::{decode_generate, decode_teacher_forced, DecodeStrategy, DecoderIds};
use crate::encoder::{encode_sequence, EncoderIds};
use crate::error::{Error, Result};
use crate::knowledge::{select_for_mode, SelectionMode};
use crate::metrics::{score_corpus, MetricsReport};
use crate::model::PostSelModel;
use crate::objective::{knowledge_forward, nll_loss};
use crate::rng::derive_rng;
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
    /// Sample the knowledge index from the prior instead of taking its
    /// argmax.
    pub sample_at_infer: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            strategy: DecodeStrategy::Greedy,
            max_len: 50,
            sample_at_infer: false,
            seed: 0,
        }
    }
}

/// One generated example, as written to the generations file.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub utterance: String,
    pub reference: String,
    pub generated: String,
    pub selected_index: Option<usize>,
    pub prior: Option<Vec<f64>>,
    pub posterior: Option<Vec<f64>>,
}

impl GenerationRecord {
    pub const TSV_HEADER: &'static str =
        "utterance\treference\tgenerated\tselected_index\tprior\tposterior";

    pub fn to_tsv(&self) -> String {
        let probs = |p: &Option<Vec<f64>>| match p {
            Some(v) => v
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
            None => "-".to_string(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.utterance,
            self.reference,
            self.generated,
            self.selected_index
                .map_or("-".to_string(), |i| i.to_string()),
            probs(&self.prior),
            probs(&self.posterior),
        )
    }
}

/// Evaluation result: corpus metrics, per-example generations, and
/// selection accuracy over turns carrying a gold knowledge index.
#[derive(Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub generations: Vec<GenerationRecord>,
    pub prior_accuracy: Option<f64>,
    pub posterior_accuracy: Option<f64>,
}

/// Generate and score every turn of the split.
pub fn evaluate(
    model: &PostSelModel,
    vocab: &Vocabulary,
    turns: &[DialogueTurn],
    options: &EvalOptions,
) -> Result<EvalOutput> {
    if turns.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let config = &model.config;
    let uses_knowledge = config.mode.uses_knowledge();

    let mut graph = Graph::new();
    let mut hyps: Vec<Vec<String>> = Vec::with_capacity(turns.len());
    let mut refs: Vec<Vec<String>> = Vec::with_capacity(turns.len());
    let mut knowledge_text: Vec<Vec<Vec<String>>> = Vec::with_capacity(turns.len());
    let mut generations = Vec::with_capacity(turns.len());
    let mut nll_sum = 0.0;
    let mut nll_positions = 0usize;
    let mut gold_turns = 0usize;
    let mut prior_hits = 0usize;
    let mut posterior_hits = 0usize;

    for (i, turn) in turns.iter().enumerate() {
        graph.clear();
        let bound = model.params.bind(&mut graph)?;
        let dec_ids = DecoderIds::bind(&bound, config);

        let (encoder, knowledge_vector, record_sel) = if uses_knowledge {
            let fwd = knowledge_forward(&mut graph, &bound, config, turn, true)?;
            let mut rng = derive_rng(options.seed, &format!("infer/{i}"));
            let selected = select_for_mode(
                &mut graph,
                SelectionMode::Infer,
                &fwd.prior,
                fwd.posterior.as_ref(),
                &fwd.knowledge_vectors,
                config.temperature,
                &mut rng,
                options.sample_at_infer,
            )?;
            if let Some(gold) = turn.gold_knowledge_idx {
                gold_turns += 1;
                if fwd.prior.argmax(&graph) == gold {
                    prior_hits += 1;
                }
                if let Some(post) = &fwd.posterior {
                    if post.argmax(&graph) == gold {
                        posterior_hits += 1;
                    }
                }
            }
            let prior_probs = graph.values(fwd.prior.probs).to_vec();
            let posterior_probs = fwd
                .posterior
                .as_ref()
                .map(|p| graph.values(p.probs).to_vec());
            (
                fwd.encoder,
                Some(selected.vector),
                (
                    Some(selected.hard_index),
                    Some(prior_probs),
                    posterior_probs,
                ),
            )
        } else {
            let utt_ids = EncoderIds::bind(&bound, "enc_utt", "embedding", config.num_layers);
            let encoder = encode_sequence(&mut graph, &utt_ids, config, &turn.utterance)?;
            (encoder, None, (None, None, None))
        };

        let generated = decode_generate(
            &mut graph,
            &dec_ids,
            &encoder,
            knowledge_vector,
            options.strategy,
            options.max_len,
        )?;

        // teacher-forced NLL with the same selected knowledge
        let dists = decode_teacher_forced(
            &mut graph,
            &dec_ids,
            &encoder,
            &turn.response,
            knowledge_vector,
        )?;
        let mut targets = turn.response.clone();
        targets.push(EOS);
        let nll_id = nll_loss(&mut graph, &dists, &targets)?;
        nll_sum += graph.scalar_value(nll_id);
        nll_positions += targets.len();

        let hyp_tokens = vocab.decode(&generated);
        let ref_tokens = vocab.decode(&turn.response);
        let (selected_index, prior, posterior) = record_sel;
        generations.push(GenerationRecord {
            utterance: vocab.decode_joined(&turn.utterance),
            reference: ref_tokens.join(" "),
            generated: hyp_tokens.join(" "),
            selected_index,
            prior,
            posterior,
        });
        hyps.push(hyp_tokens);
        refs.push(ref_tokens);
        knowledge_text.push(turn.knowledge.iter().map(|k| vocab.decode(k)).collect());
    }

    // knowledge metrics are a property of the data: the ablation is
    // scored against the collections it never saw
    let has_knowledge = knowledge_text.iter().any(|k| !k.is_empty());
    let mut report = score_corpus(
        &hyps,
        &refs,
        has_knowledge.then_some(knowledge_text.as_slice()),
    )?;
    let nll_per_token = nll_sum / nll_positions as f64;
    report.nll_per_token = Some(nll_per_token);
    report.perplexity = Some(nll_per_token.exp());

    let accuracy = |hits: usize| -> Option<f64> {
        (uses_knowledge && gold_turns > 0).then(|| hits as f64 / gold_turns as f64)
    };
    Ok(EvalOutput {
        report,
        generations,
        prior_accuracy: accuracy(prior_hits),
        posterior_accuracy: accuracy(posterior_hits),
    })
}

/// Write the generations file (tab-separated, one record per example).
pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(file, "{}", GenerationRecord::TSV_HEADER)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in records {
        writeln!(file, "{}", r.to_tsv()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
