//! The toy CTC acoustic model: a stack of 1-D convolutions over the feature
//! sequence, feed-forward encoder blocks with pre-block layer normalization
//! and residual connections, and a linear classifier head.
//!
//! Parameters live in named groups (`feat.*`, `enc.k.*`, `enc.k.ln.*`,
//! `head.*`); each group carries a trainable flag so the adaptable subset
//! can be selected without touching the rest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{contract, Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::losses;
use crate::matrix::Matrix;
use crate::optim::{adamw_step, AdamWParams, OptState};
use crate::vocab;

/// The CTC blank class index. Fixed by convention.
pub const BLANK_INDEX: usize = vocab::BLANK;

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SUTACKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub conv_layers: usize,
    pub kernel_width: usize,
    pub conv_channels: usize,
    pub conv_stride: usize,
    pub encoder_blocks: usize,
    pub encoder_hidden: usize,
    /// Character classes plus one CTC blank.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            conv_layers: 2,
            kernel_width: 3,
            conv_channels: 32,
            conv_stride: 1,
            encoder_blocks: 2,
            encoder_hidden: 64,
            vocab_size: vocab::VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.vocab_size >= 2, "vocab_size must be >= 2");
        contract!(self.kernel_width >= 1, "kernel_width must be >= 1");
        contract!(self.encoder_blocks >= 1, "encoder_blocks must be >= 1");
        contract!(self.conv_layers >= 1, "conv_layers must be >= 1");
        contract!(self.conv_stride >= 1, "conv_stride must be >= 1");
        contract!(self.feature_dim >= 1, "feature_dim must be >= 1");
        contract!(self.conv_channels >= 1, "conv_channels must be >= 1");
        contract!(self.encoder_hidden >= 1, "encoder_hidden must be >= 1");
        Ok(())
    }

    /// Output frames for an input of `t_in` frames: each conv layer maps
    /// T to ceil(T / stride).
    pub fn output_frames(&self, t_in: usize) -> usize {
        let mut t = t_in;
        for _ in 0..self.conv_layers {
            t = (t + self.conv_stride - 1) / self.conv_stride;
        }
        t
    }
}

/// Which parameter groups are adaptable at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamPartition {
    /// Layer-norm affine parameters only (enc.*.ln.*).
    Ln,
    /// Feature extractor only (feat.*).
    Feat,
    /// Union of the two.
    LnFeat,
    /// Every parameter including the classifier head.
    All,
}

impl ParamPartition {
    pub fn selects(&self, name: &str) -> bool {
        let is_ln = name.starts_with("enc.") && name.contains(".ln.");
        let is_feat = name.starts_with("feat.");
        match self {
            ParamPartition::Ln => is_ln,
            ParamPartition::Feat => is_feat,
            ParamPartition::LnFeat => is_ln || is_feat,
            ParamPartition::All => true,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamPartition::Ln => "ln",
            ParamPartition::Feat => "feat",
            ParamPartition::LnFeat => "ln+feat",
            ParamPartition::All => "all",
        }
    }
}

impl std::str::FromStr for ParamPartition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ln" => Ok(ParamPartition::Ln),
            "feat" => Ok(ParamPartition::Feat),
            "ln+feat" | "lnfeat" | "ln_feat" => Ok(ParamPartition::LnFeat),
            "all" => Ok(ParamPartition::All),
            other => Err(Error::Contract(format!("unknown parameter selection '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Matrix,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: BTreeMap<String, Param>,
}

/// One recorded forward pass: the tape, the logits node, and the graph
/// leaves holding each parameter, so gradients can be read back by name.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: NodeId,
    param_nodes: BTreeMap<String, NodeId>,
}

impl ForwardPass {
    pub fn logits_matrix(&self) -> &Matrix {
        self.graph.value(self.logits)
    }

    /// Gradients of the trainable parameters present in `grads`, by name.
    pub fn trainable_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.param_nodes
            .iter()
            .filter_map(|(name, &node)| grads.get(node).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

impl ModelState {
    /// Seeded initialization: scaled uniform fan-in for weights, zeros for
    /// biases, identity affine for layer norms. All groups start trainable.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let add = |params: &mut BTreeMap<String, Param>, name: String, value: Matrix| {
            params.insert(name, Param { value, trainable: true });
        };

        let mut in_ch = config.feature_dim;
        for layer in 0..config.conv_layers {
            let fan_in = config.kernel_width * in_ch;
            let limit = 1.0 / (fan_in as f64).sqrt();
            add(
                &mut params,
                format!("feat.{layer}.weight"),
                Matrix::uniform(fan_in, config.conv_channels, limit, &mut rng),
            );
            add(&mut params, format!("feat.{layer}.bias"), Matrix::zeros(1, config.conv_channels));
            in_ch = config.conv_channels;
        }

        let w = config.conv_channels;
        let h = config.encoder_hidden;
        for block in 0..config.encoder_blocks {
            add(&mut params, format!("enc.{block}.ln.gamma"), Matrix::filled(1, w, 1.0));
            add(&mut params, format!("enc.{block}.ln.beta"), Matrix::zeros(1, w));
            let limit1 = 1.0 / (w as f64).sqrt();
            add(&mut params, format!("enc.{block}.w1"), Matrix::uniform(w, h, limit1, &mut rng));
            add(&mut params, format!("enc.{block}.b1"), Matrix::zeros(1, h));
            let limit2 = 1.0 / (h as f64).sqrt();
            add(&mut params, format!("enc.{block}.w2"), Matrix::uniform(h, w, limit2, &mut rng));
            add(&mut params, format!("enc.{block}.b2"), Matrix::zeros(1, w));
        }

        let limit = 1.0 / (w as f64).sqrt();
        add(&mut params, "head.weight".to_string(), Matrix::uniform(w, config.vocab_size, limit, &mut rng));
        add(&mut params, "head.bias".to_string(), Matrix::zeros(1, config.vocab_size));

        Ok(ModelState { config: config.clone(), params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    /// Marks exactly the selected groups trainable and freezes the rest.
    pub fn apply_partition(&mut self, partition: ParamPartition) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = partition.selects(name);
        }
    }

    pub fn snapshot(&self) -> ModelState {
        self.clone()
    }

    /// Makes this model bit-identical to the snapshot.
    pub fn restore(&mut self, snapshot: &ModelState) -> Result<()> {
        contract!(
            self.params.len() == snapshot.params.len()
                && self.params.keys().eq(snapshot.params.keys()),
            "restore: parameter group names differ"
        );
        for (name, p) in snapshot.params.iter() {
            let mine = self.params.get(name).expect("names checked");
            contract!(
                mine.value.shape() == p.value.shape(),
                "restore: shape mismatch for {name}"
            );
        }
        self.params = snapshot.params.clone();
        self.config = snapshot.config.clone();
        Ok(())
    }

    /// FNV-1a over parameter names, shapes, and raw value bits. Trainable
    /// flags are not hashed; this identifies the weights only.
    pub fn param_hash(&self) -> u64 {
        self.param_hash_where(|_| true)
    }

    /// Like `param_hash`, restricted to the groups whose name matches
    /// `select` (e.g. the frozen subset).
    pub fn param_hash_where(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for (name, p) in self.params.iter().filter(|(name, _)| select(name)) {
            for b in name.bytes() {
                eat(b);
            }
            for b in (p.value.rows() as u64).to_le_bytes() {
                eat(b);
            }
            for bits in p.value.bits() {
                for b in bits.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Records the full forward computation on a fresh graph. Only trainable
    /// parameter leaves request gradients.
    pub fn forward(&self, features: &Matrix) -> Result<ForwardPass> {
        contract!(
            features.cols() == self.config.feature_dim,
            "forward: feature dim {} does not match config {}",
            features.cols(),
            self.config.feature_dim
        );
        contract!(features.rows() >= 1, "forward: empty feature sequence");

        let mut graph = Graph::new();
        let mut param_nodes = BTreeMap::new();
        let leaf = |graph: &mut Graph, nodes: &mut BTreeMap<String, NodeId>, name: &str| {
            let p = &self.params[name];
            let id = graph.leaf(p.value.clone(), p.trainable);
            nodes.insert(name.to_string(), id);
            id
        };

        let mut x = graph.constant(features.clone());
        for layer in 0..self.config.conv_layers {
            let w = leaf(&mut graph, &mut param_nodes, &format!("feat.{layer}.weight"));
            let b = leaf(&mut graph, &mut param_nodes, &format!("feat.{layer}.bias"));
            let conv = graph.conv1d(x, w, self.config.kernel_width, self.config.conv_stride)?;
            let biased = graph.add(conv, b)?;
            x = graph.relu(biased);
        }

        for block in 0..self.config.encoder_blocks {
            let gamma = leaf(&mut graph, &mut param_nodes, &format!("enc.{block}.ln.gamma"));
            let beta = leaf(&mut graph, &mut param_nodes, &format!("enc.{block}.ln.beta"));
            let w1 = leaf(&mut graph, &mut param_nodes, &format!("enc.{block}.w1"));
            let b1 = leaf(&mut graph, &mut param_nodes, &format!("enc.{block}.b1"));
            let w2 = leaf(&mut graph, &mut param_nodes, &format!("enc.{block}.w2"));
            let b2 = leaf(&mut graph, &mut param_nodes, &format!("enc.{block}.b2"));

            let normed = graph.layer_norm(x, gamma, beta, LN_EPS)?;
            let h1 = graph.matmul(normed, w1)?;
            let h1 = graph.add(h1, b1)?;
            let act = graph.gelu(h1);
            let h2 = graph.matmul(act, w2)?;
            let h2 = graph.add(h2, b2)?;
            x = graph.add(x, h2)?;
        }

        let hw = leaf(&mut graph, &mut param_nodes, "head.weight");
        let hb = leaf(&mut graph, &mut param_nodes, "head.bias");
        let proj = graph.matmul(x, hw)?;
        let logits = graph.add(proj, hb)?;

        Ok(ForwardPass { graph, logits, param_nodes })
    }

    /// Convenience: logits only, no tape kept.
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward(features)?.logits_matrix().clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let config_json = serde_json::to_vec(&self.config)?;
        w.write_u32::<LittleEndian>(config_json.len() as u32)?;
        w.write_all(&config_json)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, p) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(p.value.rows() as u32)?;
            w.write_u32::<LittleEndian>(p.value.cols() as u32)?;
            w.write_u8(u8::from(p.trainable))?;
            for &v in p.value.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let fmt = |what: &str| Error::Format(format!("checkpoint {}: {what}", path.display()));

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let config_len = r.read_u32::<LittleEndian>().map_err(|_| fmt("truncated config"))? as usize;
        let mut config_json = vec![0u8; config_len];
        r.read_exact(&mut config_json).map_err(|_| fmt("truncated config"))?;
        let config: ModelConfig =
            serde_json::from_slice(&config_json).map_err(|_| fmt("unreadable config"))?;

        let count = r.read_u32::<LittleEndian>().map_err(|_| fmt("truncated group count"))?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(|_| fmt("truncated group"))? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| fmt("truncated group name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| fmt("group name not utf-8"))?;
            let rows = r.read_u32::<LittleEndian>().map_err(|_| fmt("truncated shape"))? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(|_| fmt("truncated shape"))? as usize;
            let trainable = r.read_u8().map_err(|_| fmt("truncated flags"))? != 0;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                *v = r
                    .read_f64::<LittleEndian>()
                    .map_err(|_| Error::Format(format!("checkpoint {}: truncated values in {name}", path.display())))?;
            }
            params.insert(name, Param { value: Matrix::from_vec(rows, cols, data), trainable });
        }
        Ok(ModelState { config, params })
    }
}

/// Returns the model with gradients enabled on exactly the selected groups.
pub fn partition_params(mut model: ModelState, partition: ParamPartition) -> ModelState {
    model.apply_partition(partition);
    model
}

/// Trains the model in place against the mean CTC loss over the corpus,
/// one AdamW update per utterance, orders reshuffled per epoch from the
/// model seed. Returns the per-epoch mean loss log.
pub fn train_source(
    model: &mut ModelState,
    corpus: &[Utterance],
    epochs: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    contract!(!corpus.is_empty(), "train_source: empty corpus");
    model.apply_partition(ParamPartition::All);

    // Validate transcripts up front so failures name the utterance.
    let mut targets = Vec::with_capacity(corpus.len());
    for utt in corpus {
        let classes = utt.transcript.to_classes();
        if let Some(&bad) = classes.iter().find(|&&c| c >= model.config.vocab_size) {
            return Err(Error::Data(format!(
                "utterance {}: transcript symbol class {bad} outside model vocabulary",
                utt.id
            )));
        }
        targets.push(classes);
    }

    let hp = AdamWParams { lr, ..Default::default() };
    let mut opt = OptState::new();
    let mut log = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x9e37_79b9_7f4a_7c15);

    for _epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let utt = &corpus[idx];
            let mut fw = model.forward(&utt.features)?;
            let log_probs = losses::build_log_softmax(&mut fw.graph, fw.logits)?;
            let loss = fw
                .graph
                .ctc_loss(log_probs, &targets[idx], BLANK_INDEX)
                .map_err(|e| Error::Data(format!("utterance {}: {e}", utt.id)))?;
            total += fw.graph.scalar(loss);
            let grads = fw.graph.backward(loss)?;
            let named = fw.trainable_grads(&grads);
            adamw_step(model, &named, &mut opt, &hp)?;
        }
        log.push(total / corpus.len() as f64);
    }
    Ok(log)
}
