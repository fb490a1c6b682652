//! Per-utterance episodic adaptation. Every utterance starts from the
//! source snapshot with fresh optimizer state; the snapshot itself is never
//! mutated, so the reset is structural rather than procedural.


use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{contract, Error, Result};
use crate::eval::{greedy_ctc_decode, wer, Transcript};
use crate::losses::{self, EntropyNorm};
use crate::model::{ModelState, ParamPartition, BLANK_INDEX};
use crate::optim::{adamw_step, AdamWParams, OptState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMethod {
    /// Plain evaluation of the source model.
    None,
    /// Entropy minimization + class confusion with temperature smoothing.
    Suta,
    /// Dynamic pseudo-labeling: greedy decode, then minimize CTC loss
    /// against the decoded label, refreshed every iteration.
    Sdpl,
}

impl AdaptMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptMethod::None => "none",
            AdaptMethod::Suta => "suta",
            AdaptMethod::Sdpl => "sdpl",
        }
    }
}

impl std::str::FromStr for AdaptMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AdaptMethod::None),
            "suta" => Ok(AdaptMethod::Suta),
            "sdpl" => Ok(AdaptMethod::Sdpl),
            other => Err(Error::Contract(format!("unknown method '{other}'"))),
        }
    }
}

/// Adaptation hyperparameters. The defaults are the best reported
/// configuration: alpha 0.3, temperature 2.5, 10 iterations, LN+Feat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: AdaptMethod,
    pub alpha: f64,
    pub temperature: f64,
    pub iterations: usize,
    pub partition: ParamPartition,
    /// Overrides the per-partition default learning rate when set.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub entropy_norm: EntropyNorm,
    /// SDPL is only reported for LN; other selections are refused unless
    /// this is set.
    pub allow_sdpl_any_partition: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: AdaptMethod::Suta,
            alpha: 0.3,
            temperature: 2.5,
            iterations: 10,
            partition: ParamPartition::LnFeat,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            entropy_norm: EntropyNorm::RetainedFrames,
            allow_sdpl_any_partition: false,
            seed: 0,
        }
    }
}

/// Per-selection default learning rates.
pub fn default_lr(partition: ParamPartition) -> f64 {
    match partition {
        ParamPartition::Ln => 2e-4,
        ParamPartition::Feat => 2e-5,
        ParamPartition::LnFeat => 2e-5,
        ParamPartition::All => 1e-6,
    }
}

impl AdaptConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| default_lr(self.partition))
    }

    fn optimizer_params(&self) -> AdamWParams {
        AdamWParams {
            lr: self.effective_lr(),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!((0.0..=1.0).contains(&self.alpha), "alpha must be in [0, 1]");
        contract!(self.temperature > 0.0, "temperature must be positive");
        Ok(())
    }
}

/// State of the model after `iteration` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub entropy: f64,
    pub class_confusion: f64,
    pub loss: f64,
    pub retained_frames: usize,
    pub hypothesis: String,
    /// Against the utterance transcript, when one is present.
    pub wer: Option<f64>,
    /// True when the update leading into this record was skipped
    /// (SDPL with an empty or infeasible pseudo label).
    pub update_skipped: bool,
}

/// N+1 records: index 0 is the unadapted state, index N the final one.
/// The hashes witness the episodic contract: `start_hash` must equal the
/// source snapshot's hash (fresh copy per utterance) and the frozen-group
/// hash must be bit-identical before and after adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub utterance_id: String,
    pub records: Vec<IterRecord>,
    pub start_hash: u64,
    pub final_hash: u64,
    pub frozen_start_hash: u64,
    pub frozen_final_hash: u64,
}

impl AdaptTrace {
    pub fn final_record(&self) -> &IterRecord {
        self.records.last().expect("trace always has record 0")
    }
}

/// SUTA: N iterations of forward, temperature-smoothed entropy + class
/// confusion, backward into the adaptable groups, AdamW. The source
/// snapshot is untouched.
pub fn suta_adapt(
    source: &ModelState,
    utterance: &Utterance,
    config: &AdaptConfig,
) -> Result<(Transcript, AdaptTrace)> {
    contract!(config.method == AdaptMethod::Suta, "suta_adapt requires method=suta");
    adapt_loop(source, utterance, config, config.partition, UpdateRule::Suta)
}

/// SDPL baseline: greedy pseudo label refreshed every iteration, CTC loss
/// against it. Restricted to the LN selection unless explicitly overridden.
pub fn sdpl_adapt(
    source: &ModelState,
    utterance: &Utterance,
    config: &AdaptConfig,
) -> Result<(Transcript, AdaptTrace)> {
    contract!(config.method == AdaptMethod::Sdpl, "sdpl_adapt requires method=sdpl");
    if config.partition != ParamPartition::Ln && !config.allow_sdpl_any_partition {
        return Err(Error::Contract(format!(
            "sdpl is only supported with the ln selection (got {}); \
             adapting more parameters is known to deteriorate accuracy — \
             set allow_sdpl_any_partition to override",
            config.partition.as_str()
        )));
    }
    adapt_loop(source, utterance, config, config.partition, UpdateRule::Sdpl)
}

/// Dispatch on the configured method; `None` evaluates without updates.
pub fn run_adaptation(
    source: &ModelState,
    utterance: &Utterance,
    config: &AdaptConfig,
) -> Result<(Transcript, AdaptTrace)> {
    match config.method {
        AdaptMethod::Suta => suta_adapt(source, utterance, config),
        AdaptMethod::Sdpl => sdpl_adapt(source, utterance, config),
        AdaptMethod::None => {
            let mut cfg = config.clone();
            cfg.method = AdaptMethod::Suta;
            cfg.iterations = 0;
            suta_adapt(source, utterance, &cfg)
        }
    }
}

enum UpdateRule {
    Suta,
    Sdpl,
}

fn adapt_loop(
    source: &ModelState,
    utterance: &Utterance,
    config: &AdaptConfig,
    partition: ParamPartition,
    rule: UpdateRule,
) -> Result<(Transcript, AdaptTrace)> {
    config.validate()?;
    if utterance.features.rows() == 0 {
        return Err(Error::Data(format!("utterance {}: empty feature sequence", utterance.id)));
    }

    let mut model = source.snapshot();
    model.apply_partition(partition);
    let start_hash = model.param_hash();
    let frozen_start_hash = model.param_hash_where(|n| !model.is_trainable(n));
    let mut opt = OptState::new();
    let hp = config.optimizer_params();
    let reference = (!utterance.transcript.is_empty()).then_some(&utterance.transcript);

    let mut records = Vec::with_capacity(config.iterations + 1);
    let mut skipped_last_update = false;

    for t in 0..=config.iterations {
        let mut fw = model.forward(&utterance.features)?;
        let logits = fw.logits_matrix().clone();
        let hypothesis = greedy_ctc_decode(&logits, BLANK_INDEX);
        let hyp_wer = match reference {
            Some(r) => Some(wer(r, &hypothesis)?.wer),
            None => None,
        };
        let diag = losses::combined_loss(
            &logits,
            config.alpha,
            config.temperature,
            BLANK_INDEX,
            config.entropy_norm,
        )?;
        records.push(IterRecord {
            iteration: t,
            entropy: diag.entropy,
            class_confusion: diag.class_confusion,
            loss: diag.loss,
            retained_frames: diag.retained_frames,
            hypothesis: hypothesis.text(),
            wer: hyp_wer,
            update_skipped: skipped_last_update,
        });
        skipped_last_update = false;

        if t == config.iterations {
            break;
        }

        let loss_node = match rule {
            UpdateRule::Suta => {
                let (node, _) = losses::build_combined_loss(
                    &mut fw.graph,
                    fw.logits,
                    config.alpha,
                    config.temperature,
                    BLANK_INDEX,
                    config.entropy_norm,
                )?;
                Some(node)
            }
            UpdateRule::Sdpl => {
                let pseudo = hypothesis.to_classes();
                if pseudo.is_empty() {
                    None
                } else {
                    let log_probs = losses::build_log_softmax(&mut fw.graph, fw.logits)?;
                    match fw.graph.ctc_loss(log_probs, &pseudo, BLANK_INDEX) {
                        Ok(node) => Some(node),
                        // Pseudo label too long for the frame count: skip.
                        Err(Error::Data(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
            }
        };

        match loss_node {
            Some(node) => {
                let grads = fw.graph.backward(node)?;
                let named = fw.trainable_grads(&grads);
                adamw_step(&mut model, &named, &mut opt, &hp)?;
            }
            None => skipped_last_update = true,
        }
    }

    let final_text = records.last().expect("record 0 always exists").hypothesis.clone();
    let trace = AdaptTrace {
        utterance_id: utterance.id.clone(),
        records,
        start_hash,
        final_hash: model.param_hash(),
        frozen_start_hash,
        frozen_final_hash: model.param_hash_where(|n| !model.is_trainable(n)),
    };
    Ok((Transcript::from_text(&final_text), trace))
}
