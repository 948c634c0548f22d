//! The detector network: token and position embeddings, a plan of
//! transformer and adapter blocks, and a head that fuses the `[CLS]` state
//! with header context features.

mod checkpoint;
mod config;
mod count;
mod freeze;
mod surgery;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, BLOB_FILE, FORMAT_VERSION, MANIFEST_FILE};
pub use config::{format_plan, parse_plan, BlockKind, ClsReadout, ModelConfig};
pub use count::{count_params, ParamReport};
pub use freeze::{set_trainable, FreezeMask, PARTIAL_FINETUNE};
pub use surgery::{surgery_from_donor, Provenance, SurgeryRecord};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{AttentionShape, LAYER_NORM_EPS};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every parameter of `config` in storage order.
pub(crate) fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.hidden;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    let dense = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, i: usize, o: usize, zero: bool| {
        push(
            format!("{prefix}.weight"),
            vec![i, o],
            if zero { Init::Zeros } else { Init::Normal },
        );
        push(format!("{prefix}.bias"), vec![o], Init::Zeros);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        push(format!("{prefix}.gain"), vec![d], Init::Ones);
        push(format!("{prefix}.bias"), vec![d], Init::Zeros);
    };

    push("embeddings.token".into(), vec![config.vocab_size, d], Init::Normal);
    push("embeddings.position".into(), vec![config.max_positions, d], Init::Normal);
    norm(&mut push, "embeddings.norm");
    let (mut t, mut a) = (0, 0);
    for kind in &config.plan {
        match kind {
            BlockKind::Transformer => {
                let p = format!("transformer.{t}");
                for proj in ["query", "key", "value", "output"] {
                    dense(&mut push, &format!("{p}.attention.{proj}"), d, d, false);
                }
                norm(&mut push, &format!("{p}.attention_norm"));
                dense(&mut push, &format!("{p}.ffn.dense1"), d, config.ffn, false);
                dense(&mut push, &format!("{p}.ffn.dense2"), config.ffn, d, false);
                norm(&mut push, &format!("{p}.ffn_norm"));
                t += 1;
            }
            BlockKind::Adapter => {
                let p = format!("adapter.{a}");
                dense(&mut push, &format!("{p}.dense1"), d, d, false);
                dense(&mut push, &format!("{p}.dense2"), d, d, config.zero_adapter_output);
                a += 1;
            }
        }
    }
    let dh = config.classifier_dim();
    dense(&mut push, "classifier.fusion", d + config.context_dim, dh, false);
    dense(&mut push, "classifier.output", dh, 1, false);
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockIds {
    Transformer {
        query: Dense,
        key: Dense,
        value: Dense,
        output: Dense,
        attention_norm: Norm,
        dense1: Dense,
        dense2: Dense,
        ffn_norm: Norm,
    },
    Adapter {
        dense1: Dense,
        dense2: Dense,
    },
}

/// Parameter indices for each part of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    token: usize,
    position: usize,
    embedding_norm: Norm,
    blocks: Vec<BlockIds>,
    fusion: Dense,
    output: Dense,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let index: HashMap<String, usize> = param_specs(config)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.name, i))
            .collect();
        let id = |name: String| index[&name];
        let dense = |p: String| Dense {
            weight: id(format!("{p}.weight")),
            bias: id(format!("{p}.bias")),
        };
        let norm = |p: String| Norm {
            gain: id(format!("{p}.gain")),
            bias: id(format!("{p}.bias")),
        };
        let (mut t, mut a) = (0, 0);
        let blocks = config
            .plan
            .iter()
            .map(|kind| match kind {
                BlockKind::Transformer => {
                    let p = format!("transformer.{t}");
                    t += 1;
                    BlockIds::Transformer {
                        query: dense(format!("{p}.attention.query")),
                        key: dense(format!("{p}.attention.key")),
                        value: dense(format!("{p}.attention.value")),
                        output: dense(format!("{p}.attention.output")),
                        attention_norm: norm(format!("{p}.attention_norm")),
                        dense1: dense(format!("{p}.ffn.dense1")),
                        dense2: dense(format!("{p}.ffn.dense2")),
                        ffn_norm: norm(format!("{p}.ffn_norm")),
                    }
                }
                BlockKind::Adapter => {
                    let p = format!("adapter.{a}");
                    a += 1;
                    BlockIds::Adapter {
                        dense1: dense(format!("{p}.dense1")),
                        dense2: dense(format!("{p}.dense2")),
                    }
                }
            })
            .collect();
        Self {
            token: id("embeddings.token".into()),
            position: id("embeddings.position".into()),
            embedding_norm: norm("embeddings.norm".into()),
            blocks,
            fusion: dense("classifier.fusion".into()),
            output: dense("classifier.output".into()),
        }
    }
}

/// A batch of equally long id sequences with their context rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `batch * seq` token ids, row-major.
    pub ids: Vec<usize>,
    /// `batch * seq` flags, false at padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    /// `batch * context_dim` features.
    pub context: Vec<f64>,
}

impl ModelInput {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, batch: usize, seq: usize, context: Vec<f64>) -> Result<Self> {
        if ids.len() != batch * seq || mask.len() != batch * seq {
            return Err(Error::contract(format!(
                "input of {} ids and {} mask flags does not match batch {batch} x seq {seq}",
                ids.len(),
                mask.len()
            )));
        }
        Ok(Self {
            ids,
            mask,
            batch,
            seq,
            context,
        })
    }

    /// Stacks sequences, dropping trailing columns that are padding in every
    /// row. `context` holds one row per sequence, concatenated.
    pub fn from_sequences(seqs: &[&TokenSequence], context: Vec<f64>) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::contract("empty batch"));
        };
        let full = first.len();
        if let Some(bad) = seqs.iter().find(|s| s.len() != full || s.attention_mask.len() != full) {
            return Err(Error::contract(format!(
                "sequences in a batch must share one length: {full} vs {}",
                bad.len()
            )));
        }
        let seq = seqs
            .iter()
            .map(|s| s.attention_mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1)
            .max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(&s.ids[..seq]);
            mask.extend(s.attention_mask[..seq].iter().map(|&m| m == 1));
        }
        Self::new(ids, mask, seqs.len(), seq, context)
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `batch x 1` probabilities.
    pub probs: Var,
    /// `batch x d` state handed to the classifier.
    pub cls: Var,
    /// `(batch * seq) x d` after the embeddings and after every block.
    pub hidden: Vec<Var>,
}

/// Configuration plus the parameter index layout it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    config: ModelConfig,
    layout: Layout,
}

impl Architecture {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Records the network on `tape` reading weights from `params`.
    pub fn forward<'a, T: Scalar>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a ParamStore<T>,
        input: &ModelInput,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let l = &self.layout;
        if input.seq > c.max_positions {
            return Err(Error::contract(format!(
                "sequence length {} exceeds {} positions",
                input.seq, c.max_positions
            )));
        }
        if input.context.len() != input.batch * c.context_dim {
            return Err(Error::contract(format!(
                "expected {} context values for batch {}, got {}",
                input.batch * c.context_dim,
                input.batch,
                input.context.len()
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                len: c.vocab_size,
            });
        }
        let p = |tape: &mut Tape<'a, T>, id: usize| tape.param(id, params.get(id));

        let token_table = p(tape, l.token);
        let tokens = tape.gather(token_table, &input.ids)?;
        let position_table = p(tape, l.position);
        let positions: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.seq).collect();
        let pos = tape.gather(position_table, &positions)?;
        let h = tape.add(tokens, pos)?;
        let mut h = self.norm(tape, params, h, l.embedding_norm)?;

        let mut hidden = vec![h];
        let mut readout = h;
        let shape = AttentionShape {
            batch: input.batch,
            seq: input.seq,
            heads: c.heads,
        };
        for block in &l.blocks {
            h = match *block {
                BlockIds::Transformer {
                    query,
                    key,
                    value,
                    output,
                    attention_norm,
                    dense1,
                    dense2,
                    ffn_norm,
                } => {
                    let q = self.dense(tape, params, h, query)?;
                    let k = self.dense(tape, params, h, key)?;
                    let v = self.dense(tape, params, h, value)?;
                    let att = tape.attention(q, k, v, &input.mask, shape)?;
                    let att = self.dense(tape, params, att, output)?;
                    let x = tape.add(h, att)?;
                    let x = self.norm(tape, params, x, attention_norm)?;
                    let f = self.dense(tape, params, x, dense1)?;
                    let f = tape.gelu(f);
                    let f = self.dense(tape, params, f, dense2)?;
                    let y = tape.add(x, f)?;
                    let y = self.norm(tape, params, y, ffn_norm)?;
                    readout = y;
                    y
                }
                BlockIds::Adapter { dense1, dense2 } => {
                    let a = self.dense(tape, params, h, dense1)?;
                    let a = tape.relu(a);
                    let a = self.dense(tape, params, a, dense2)?;
                    tape.add(h, a)?
                }
            };
            hidden.push(h);
        }
        if c.cls_readout == ClsReadout::LastBlock {
            readout = h;
        }

        let cls_rows: Vec<usize> = (0..input.batch).map(|b| b * input.seq).collect();
        let cls = tape.gather(readout, &cls_rows)?;
        let features = if c.context_dim > 0 {
            let ctx = Tensor::new(
                vec![input.batch, c.context_dim],
                input.context.iter().map(|&v| T::lit(v)).collect(),
            )?;
            let ctx = tape.constant(ctx);
            tape.concat_cols(cls, ctx)?
        } else {
            cls
        };
        let z = self.dense(tape, params, features, l.fusion)?;
        let z = tape.relu(z);
        let logit = self.dense(tape, params, z, l.output)?;
        let probs = tape.sigmoid(logit);
        Ok(ForwardVars { probs, cls, hidden })
    }

    fn dense<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, params: &'a ParamStore<T>, x: Var, d: Dense) -> Result<Var> {
        let w = tape.param(d.weight, params.get(d.weight));
        let b = tape.param(d.bias, params.get(d.bias));
        tape.dense(x, w, b)
    }

    fn norm<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, params: &'a ParamStore<T>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(n.gain, params.get(n.gain));
        let b = tape.param(n.bias, params.get(n.bias));
        tape.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
    }
}

/// A configured network with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CatBertModel<T> {
    arch: Architecture,
    params: ParamStore<T>,
    provenance: Vec<Provenance>,
    surgery: Option<SurgeryRecord>,
}

impl<T: Scalar> CatBertModel<T> {
    /// Truncated-normal weights, zero biases, unit layer-norm gains.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(config) {
            let value = match spec.init {
                Init::Normal => Tensor::truncated_normal(spec.shape, config.init_std, &mut rng),
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::filled(spec.shape, T::one()),
            };
            params.push(spec.name, value)?;
        }
        let provenance = vec![Provenance::Fresh; params.len()];
        Ok(Self {
            arch,
            params,
            provenance,
            surgery: None,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore<T>,
        provenance: Vec<Provenance>,
        surgery: Option<SurgeryRecord>,
    ) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let specs = param_specs(arch.config());
        if specs.len() != params.len() || provenance.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Self {
            arch,
            params,
            provenance,
            surgery,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn surgery(&self) -> Option<&SurgeryRecord> {
        self.surgery.as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.by_name(name).map(|p| &p.value)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, input: &ModelInput) -> Result<ForwardVars> {
        self.arch.forward(tape, &self.params, input)
    }

    /// One probability per row of the batch.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out.probs).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Probabilities plus the hidden state after the embeddings and after
    /// each block.
    pub fn forward_with_hidden(&self, input: &ModelInput) -> Result<(Vec<f64>, Vec<Tensor<T>>)> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, input)?;
        let probs = tape.value(out.probs).data().iter().map(|v| v.as_f64()).collect();
        let hidden = out.hidden.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((probs, hidden))
    }

    /// The `[CLS]` rows handed to the classifier.
    pub fn cls_states(&self, input: &ModelInput) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out.cls).clone())
    }

    /// The same network with every adapter dropped from the plan.
    pub fn remove_adapters(&self) -> Result<Self> {
        let mut config = self.config().clone();
        config.plan.retain(|b| *b == BlockKind::Transformer);
        let mut params = ParamStore::new();
        let mut provenance = Vec::new();
        for (p, prov) in self.params.iter().zip(&self.provenance) {
            if p.name.starts_with("adapter.") {
                continue;
            }
            let id = params.push(p.name.clone(), p.value.clone())?;
            params.get_mut(id).trainable = p.trainable;
            provenance.push(prov.clone());
        }
        Self::from_parts(config, params, provenance, self.surgery.clone())
    }

    /// Zeroes the fusion weights that read the context features, making
    /// the output independent of them.
    pub fn zero_context_weights(&mut self) {
        let d = self.config().hidden;
        let c = self.config().context_dim;
        let id = self.arch.layout.fusion.weight;
        let w = &mut self.params.get_mut(id).value;
        let cols = w.cols();
        for row in d..d + c {
            w.data_mut()[row * cols..(row + 1) * cols].fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> CatBertModel<U> {
        CatBertModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
            provenance: self.provenance.clone(),
            surgery: self.surgery.clone(),
        }
    }
}
