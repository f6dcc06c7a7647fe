//! Model configuration and the full parameter inventory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamStore};

/// How the decoder incorporates the selected knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    /// Knowledge vector concatenated into the decoder GRU input.
    Concat,
    /// Gated fusion of an utterance GRU and a knowledge GRU.
    Fusion,
    /// Plain attention seq2seq; knowledge pathways disabled.
    NoKnowledge,
}

impl DecoderMode {
    pub fn uses_knowledge(self) -> bool {
        !matches!(self, DecoderMode::NoKnowledge)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::Concat => "concat",
            DecoderMode::Fusion => "fusion",
            DecoderMode::NoKnowledge => "no-knowledge",
        }
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(DecoderMode::Concat),
            "fusion" => Ok(DecoderMode::Fusion),
            "no-knowledge" | "no_knowledge" | "none" => Ok(DecoderMode::NoKnowledge),
            other => Err(Error::Config(format!(
                "unknown decoder mode '{other}' (expected concat, fusion or no-knowledge)"
            ))),
        }
    }
}

/// Model dimensions and switches. Defaults are desk-scale; the values
/// used by the original full-scale setup (embedding 300, hidden 800,
/// 2 layers, vocabulary 20,000) remain selectable through config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub mode: DecoderMode,
    /// Gumbel-Softmax temperature.
    pub temperature: f64,
    /// Share the embedding table between utterance and knowledge
    /// encoders (disable to give the knowledge encoder its own table).
    pub share_embeddings: bool,
    /// Let gradients flow through the posterior inside the KL term
    /// instead of treating it as a fixed target.
    pub kl_train_posterior: bool,
}

impl ModelConfig {
    pub fn desk_scale(vocab_size: usize, mode: DecoderMode) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 32,
            num_layers: 1,
            mode,
            temperature: 1.0,
            share_embeddings: true,
            kl_train_posterior: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size {} too small (4 ids are reserved)",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Hash of the serialized config; stored in checkpoints so loads can
    /// refuse mismatched architectures.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Name of the embedding table used by the knowledge encoder.
    pub fn knowledge_embedding_name(&self) -> &'static str {
        if self.share_embeddings {
            "embedding"
        } else {
            "embedding_knowledge"
        }
    }

    /// Every trainable tensor for this configuration.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let embed = self.embed_dim;
        let hidden = self.hidden_dim;
        let vocab = self.vocab_size;
        let twice = 2 * hidden;
        let mut specs = Vec::new();

        specs.push(ParamSpec::uniform("embedding", vec![vocab, embed]));
        if self.mode.uses_knowledge() && !self.share_embeddings {
            specs.push(ParamSpec::uniform(
                "embedding_knowledge",
                vec![vocab, embed],
            ));
        }

        let encoder = |specs: &mut Vec<ParamSpec>, name: &str| {
            for layer in 0..self.num_layers {
                let input = if layer == 0 { embed } else { twice };
                for dir in ["fwd", "bwd"] {
                    gru_specs(specs, &format!("{name}.l{layer}.{dir}"), input, hidden);
                }
            }
        };
        encoder(&mut specs, "enc_utt");
        if self.mode.uses_knowledge() {
            encoder(&mut specs, "enc_kn");
            specs.push(ParamSpec::uniform(
                "posterior.weight",
                vec![twice, 4 * hidden],
            ));
            specs.push(ParamSpec::zeros("posterior.bias", vec![twice]));
        }

        for layer in 0..self.num_layers {
            specs.push(ParamSpec::uniform(
                format!("dec.init.l{layer}.weight"),
                vec![hidden, twice],
            ));
            specs.push(ParamSpec::zeros(
                format!("dec.init.l{layer}.bias"),
                vec![hidden],
            ));
        }
        specs.push(ParamSpec::uniform("dec.attn.weight", vec![twice, hidden]));

        for layer in 0..self.num_layers {
            let lower = if layer == 0 { embed } else { hidden };
            match self.mode {
                DecoderMode::Concat => {
                    gru_specs(
                        &mut specs,
                        &format!("dec.gru.l{layer}"),
                        lower + twice + twice,
                        hidden,
                    );
                }
                DecoderMode::NoKnowledge => {
                    gru_specs(
                        &mut specs,
                        &format!("dec.gru.l{layer}"),
                        lower + twice,
                        hidden,
                    );
                }
                DecoderMode::Fusion => {
                    gru_specs(
                        &mut specs,
                        &format!("dec.utt_gru.l{layer}"),
                        lower + twice,
                        hidden,
                    );
                    gru_specs(
                        &mut specs,
                        &format!("dec.kn_gru.l{layer}"),
                        twice + twice,
                        hidden,
                    );
                    specs.push(ParamSpec::uniform(
                        format!("dec.fuse.l{layer}.weight_utt"),
                        vec![hidden, hidden],
                    ));
                    specs.push(ParamSpec::uniform(
                        format!("dec.fuse.l{layer}.weight_kn"),
                        vec![hidden, hidden],
                    ));
                    specs.push(ParamSpec::uniform(
                        format!("dec.fuse.l{layer}.weight_gate"),
                        vec![hidden, twice],
                    ));
                    specs.push(ParamSpec::zeros(
                        format!("dec.fuse.l{layer}.bias_gate"),
                        vec![hidden],
                    ));
                }
            }
        }

        specs.push(ParamSpec::uniform(
            "output.weight",
            vec![vocab, hidden + twice],
        ));
        specs.push(ParamSpec::zeros("output.bias", vec![vocab]));
        if self.mode.uses_knowledge() {
            specs.push(ParamSpec::uniform("bow.weight", vec![vocab, twice]));
            specs.push(ParamSpec::zeros("bow.bias", vec![vocab]));
        }
        specs
    }
}

fn gru_specs(specs: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    for gate in ["update", "reset", "candidate"] {
        specs.push(ParamSpec::uniform(
            format!("{prefix}.weight_{gate}"),
            vec![hidden, input],
        ));
        specs.push(ParamSpec::uniform(
            format!("{prefix}.recur_{gate}"),
            vec![hidden, hidden],
        ));
        specs.push(ParamSpec::zeros(
            format!("{prefix}.bias_{gate}"),
            vec![hidden],
        ));
    }
}

/// A configuration together with its trainable parameters.
#[derive(Debug, Clone)]
pub struct PostSelModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl PostSelModel {
    /// Fresh model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.param_specs(), seed);
        Ok(PostSelModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Self {
        PostSelModel { config, params }
    }

    /// Overwrite embedding rows from a pretrained-vector file
    /// (`token v1 v2 ... v_e`, one line per token). Tokens missing from
    /// the vocabulary are skipped; returns the number of rows loaded.
    /// Applies to every embedding table the model owns.
    pub fn load_embedding_file(
        &mut self,
        vocab: &crate::corpus::Vocabulary,
        path: &std::path::Path,
    ) -> Result<usize> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let embed = self.config.embed_dim;
        let tables: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("embedding"))
            .map(String::from)
            .collect();
        let mut loaded = 0usize;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line has a token");
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse().map_err(|e| {
                        Error::Config(format!(
                            "{}:{}: bad embedding value '{p}': {e}",
                            path.display(),
                            i + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != embed {
                return Err(Error::Config(format!(
                    "{}:{}: {} values for embedding dimension {embed}",
                    path.display(),
                    i + 1,
                    values.len()
                )));
            }
            if !vocab.contains(token) {
                continue;
            }
            let row = vocab.id(token) as usize;
            for table in &tables {
                let param = self.params.get_mut(table);
                param.values[row * embed..(row + 1) * embed].copy_from_slice(&values);
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}
