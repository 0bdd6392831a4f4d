//! The full classifier: embedding, encoder, pair attention, memory query
//! and heads.
//!
//! A batch runs in two stages. Stage A builds one tape per instance that
//! ends at its pair representation `r`; these are independent and run on
//! the worker pool. Stage B stacks the `r` rows into one variable and runs
//! the memory query, heads and loss on a single batch tape. Backward goes
//! through stage B, then seeds every stage-A tape with its row of `dL/dR`.
//! Per-instance gradients are added in instance order, so the result does
//! not depend on the thread count.

use crate::attention::PairAttention;
use crate::autodiff::{Graph, GradStore, NodeId, ParamRegistry, Shape};
use crate::classifier::{ClassifierHeads, Dropouts, RelationLogits};
use crate::config::{AttentionMode, FixedQuery, KeyMode, TrainConfig};
use crate::corpus::{BpeModel, Instance, LabelSpace, Vocab};
use crate::embedding::{ContextualStore, Embedder, EmbeddingConfig, PreparedArg, Pretrained, SegmentCache, WordSource, WordTable};
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::memory::{self, BiaffineParams, MemoryStore, Retrieval, Scorer};
use crate::nn::Linear;
use crate::rng::{self, StreamRng};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInstance {
    pub id: String,
    pub arg1: PreparedArg,
    pub arg2: PreparedArg,
    pub relations: Vec<usize>,
    pub connective: Option<usize>,
    /// Averaged static vectors, fixed-key mode only.
    pub static_key: Option<Vec<f64>>,
    /// Memory slot holding this instance, if any.
    pub slot: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub labels: LabelSpace,
    pub params: ParamRegistry,
    pub embedder: Embedder,
    /// One stack when shared, otherwise Arg1 then Arg2.
    pub encoders: Vec<EncoderStack>,
    pub attention: PairAttention,
    pub heads: ClassifierHeads,
    pub scorer: Option<Scorer>,
    /// Maps `r` into the fixed-key space.
    pub query_projection: Option<Linear>,
    /// Word rows used for static keys (fixed-key mode).
    pub static_words: Option<Vec<f64>>,
}

/// Train: dropout streams keyed by epoch, batch and shuffled position.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'p> {
    Train {
        epoch: usize,
        batch: usize,
        positions: &'p [usize],
    },
    Eval,
}

#[derive(Clone, Debug, Default)]
pub struct StepOutput {
    /// Mean joint loss over the batch.
    pub loss: f64,
    pub grads: GradStore,
    /// `B x d_r` pair representations, row-major.
    pub reps: Vec<f64>,
    /// Argmax of the mixed relation output.
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Argmax of the mixed output.
    pub relation: usize,
    /// Argmax of `MLP_r(r)` alone.
    pub base_relation: usize,
    /// `(slot, softmax(w)_i * c_i)` pairs, strongest first.
    pub retrieved: Vec<(usize, f64)>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Vocabulary and subword model from `train`, then [`Model::new`].
    pub fn build(
        config: TrainConfig,
        labels: LabelSpace,
        train: &[Instance],
        pretrained: Option<&Pretrained>,
        contextual_input_dim: usize,
    ) -> Result<Self> {
        let tokens = || train.iter().flat_map(|i| i.arg1.iter().chain(&i.arg2)).map(String::as_str);
        let vocab = Vocab::from_corpus(tokens());
        let bpe = BpeModel::learn(tokens(), config.bpe_merges);
        Model::new(config, labels, vocab, bpe, pretrained, contextual_input_dim)
    }

    pub fn new(
        mut config: TrainConfig,
        labels: LabelSpace,
        vocab: Vocab,
        bpe: BpeModel,
        pretrained: Option<&Pretrained>,
        contextual_input_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        if labels.num_relations() < 2 {
            return Err(Error::Config("at least two relation classes are needed".into()));
        }
        let trainable = config.word_trainable.unwrap_or(pretrained.is_none());
        config.word_trainable = Some(trainable);
        let seed = config.seed;
        let mut reg = ParamRegistry::new();

        let words = if config.word_dim > 0 {
            Some(WordTable::build(&mut reg, seed, vocab, config.word_dim, pretrained, trainable)?)
        } else {
            None
        };
        let emb_cfg = EmbeddingConfig {
            word_dim: config.word_dim,
            subword_dim: config.subword_dim,
            subword_embed_dim: config.subword_embed_dim,
            contextual_dim: config.contextual_dim,
            contextual_input_dim: if config.contextual_dim > 0 { contextual_input_dim } else { 0 },
            kernel_widths: config.subword_kernels.clone(),
            highway_layers: config.highway_layers,
        };
        let static_words = if config.key_mode == KeyMode::Fixed && config.uses_memory() {
            words.as_ref().map(|w| w.data(&reg).to_vec())
        } else {
            None
        };
        let embedder = Embedder::new(&mut reg, seed, emb_cfg, words, bpe)?;
        let d_e = config.embed_dim();
        let stacks = if config.share_encoder { 1 } else { 2 };
        let encoders = (0..stacks)
            .map(|s| {
                let name = if config.share_encoder { "encoder".to_string() } else { format!("encoder{}", s + 1) };
                EncoderStack::new(&mut reg, seed, &name, config.layers, d_e, config.encoder_kernel)
            })
            .collect::<Result<_>>()?;
        let attention = PairAttention::new(&mut reg, seed, config.layers, d_e, config.ffn_relu)?;
        let d_r = config.pair_dim();
        let heads = ClassifierHeads::new(
            &mut reg,
            seed,
            d_r,
            labels.num_relations(),
            labels.num_connectives(),
            config.hidden,
            config.depth,
            config.memory_hidden,
            config.classifier_dropout,
            config.lambda,
            config.response,
            config.connective_head,
        )?;

        let mut model = Model {
            config,
            labels,
            params: reg,
            embedder,
            encoders,
            attention,
            heads,
            scorer: None,
            query_projection: None,
            static_words,
        };
        if model.config.uses_memory() {
            let k = model.key_dim();
            if k == 0 {
                return Err(Error::Config("fixed keys need word or contextual vectors".into()));
            }
            let mut reg = std::mem::take(&mut model.params);
            if model.config.key_mode == KeyMode::Fixed && model.config.fixed_query == FixedQuery::Projected {
                model.query_projection = Some(Linear::new(&mut reg, seed, "memory.query", d_r, k, true)?);
            }
            model.scorer = Some(match model.config.attention {
                AttentionMode::Dot => Scorer::Dot,
                AttentionMode::Biaffine => Scorer::Biaffine(BiaffineParams::new(&mut reg, seed, k)?),
            });
            model.params = reg;
        }
        Ok(model)
    }

    pub fn pair_dim(&self) -> usize {
        self.config.pair_dim()
    }

    /// Width of memory keys: `d_r`, or two averaged static vectors.
    pub fn key_dim(&self) -> usize {
        match self.config.key_mode {
            KeyMode::Dynamic => self.pair_dim(),
            KeyMode::Fixed => 2 * (self.config.word_dim + self.embedder.config.contextual_input_dim),
        }
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        self.embedder.words.as_ref().map(|w| &w.vocab)
    }

    /// Frozen word rows, if the table is not a parameter.
    pub fn frozen_words(&self) -> Option<&[f64]> {
        match self.embedder.words.as_ref().map(|w| &w.source) {
            Some(WordSource::Frozen(d)) => Some(d),
            _ => None,
        }
    }

    pub fn prepare(&self, instances: &[Instance], contextual: Option<&ContextualStore>) -> Result<Vec<PreparedInstance>> {
        let n = self.config.pad_length;
        let mut cache = SegmentCache::new();
        instances
            .iter()
            .map(|inst| {
                inst.validate(&self.labels)?;
                let arg1 = self.embedder.prepare_arg(&inst.id, 1, &inst.arg1, n, contextual, &mut cache)?;
                let arg2 = self.embedder.prepare_arg(&inst.id, 2, &inst.arg2, n, contextual, &mut cache)?;
                let static_key = if self.config.key_mode == KeyMode::Fixed && self.config.uses_memory() {
                    Some(self.static_key(&arg1, &arg2, &inst.id, contextual)?)
                } else {
                    None
                };
                Ok(PreparedInstance {
                    id: inst.id.clone(),
                    arg1,
                    arg2,
                    relations: inst.relations.clone(),
                    connective: inst.connective,
                    static_key,
                    slot: None,
                })
            })
            .collect()
    }

    /// Mean static word row (plus raw contextual row) over each argument's tokens.
    fn static_key(&self, a1: &PreparedArg, a2: &PreparedArg, id: &str, ctx: Option<&ContextualStore>) -> Result<Vec<f64>> {
        let dw = self.config.word_dim;
        let dc = self.embedder.config.contextual_input_dim;
        let width = dw + dc;
        let rows = |arg: &PreparedArg, which: u8| -> Result<Vec<Vec<f64>>> {
            let raw = match ctx {
                Some(c) if dc > 0 => Some(c.argument(id, which, arg.len, arg.len)?),
                _ => None,
            };
            Ok((0..arg.len)
                .map(|p| {
                    let mut row = vec![0.0; width];
                    if let (Some(table), Some(w)) = (&self.static_words, arg.words[p]) {
                        row[..dw].copy_from_slice(&table[w * dw..(w + 1) * dw]);
                    }
                    if let Some(raw) = &raw {
                        row[dw..].copy_from_slice(&raw[p * dc..(p + 1) * dc]);
                    }
                    row
                })
                .collect())
        };
        let r1 = rows(a1, 1)?;
        let r2 = rows(a2, 2)?;
        let v1: Vec<&[f64]> = r1.iter().map(Vec::as_slice).collect();
        let v2: Vec<&[f64]> = r2.iter().map(Vec::as_slice).collect();
        Ok(memory::static_key(&v1, &v2, width))
    }

    /// Stage A: `1 x d_r` pair representation of one instance.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, inst: &PreparedInstance, mut rng: Option<&mut StreamRng>) -> Result<NodeId> {
        let mut embed = |g: &mut Graph<'a>, arg: &PreparedArg| -> Result<NodeId> {
            let e = self.embedder.embed_sequence(g, arg)?;
            match rng.as_deref_mut() {
                Some(r) => g.dropout(e, self.config.embedding_dropout, r),
                None => Ok(e),
            }
        };
        let e1 = embed(g, &inst.arg1)?;
        let e2 = embed(g, &inst.arg2)?;
        let u1 = self.encoders[0].encode(g, e1)?;
        let u2 = self.encoders[self.encoders.len() - 1].encode(g, e2)?;
        let lengths = self.config.mask_pad.then_some((inst.arg1.len, inst.arg2.len));
        self.attention.pair_representation(g, &u1, &u2, lengths)
    }

    /// Stage B: memory query and heads over stacked representations.
    #[allow(clippy::too_many_arguments)]
    pub fn heads<'a>(
        &'a self,
        g: &mut Graph<'a>,
        reps: NodeId,
        batch: &[&PreparedInstance],
        memory: Option<&'a MemoryStore>,
        dropouts: Option<&mut Dropouts>,
        with_connective: bool,
        exclude_self: bool,
    ) -> Result<(RelationLogits, Option<NodeId>, Option<Retrieval>)> {
        let retrieval = match (self.config.uses_memory(), memory) {
            (false, _) => None,
            (true, None) => return Err(Error::InvalidArgument("this model needs its memory".into())),
            (true, Some(mem)) => {
                if mem.key_dim() != self.key_dim() || mem.num_relations() != self.labels.num_relations() {
                    return Err(Error::InvalidArgument(format!(
                        "memory has keys of width {} over {} relations; model expects {} over {}",
                        mem.key_dim(),
                        mem.num_relations(),
                        self.key_dim(),
                        self.labels.num_relations()
                    )));
                }
                let query = match (self.config.key_mode, &self.query_projection) {
                    (KeyMode::Dynamic, _) => reps,
                    (KeyMode::Fixed, Some(p)) => p.forward(g, reps)?,
                    (KeyMode::Fixed, None) => {
                        let mut q = Vec::with_capacity(batch.len() * self.key_dim());
                        for inst in batch {
                            q.extend_from_slice(inst.static_key.as_deref().ok_or_else(|| {
                                Error::InvalidArgument(format!("instance {} prepared without a static key", inst.id))
                            })?);
                        }
                        g.constant(Shape::new(batch.len(), self.key_dim()), q)?
                    }
                };
                let exclude: Option<Vec<Option<usize>>> = exclude_self.then(|| batch.iter().map(|i| i.slot).collect());
                let scorer = self.scorer.as_ref().expect("memory models have a scorer");
                Some(mem.respond(g, query, scorer, self.config.response, exclude.as_deref())?)
            }
        };
        let mut dropouts = dropouts;
        let rel = self
            .heads
            .relation_logits(g, reps, retrieval.map(|r| r.response), dropouts.as_deref_mut())?;
        let con = if with_connective {
            self.heads.connective_logits(g, reps, dropouts)?
        } else {
            None
        };
        Ok((rel, con, retrieval))
    }

    fn encode_batch<'a>(&'a self, batch: &[&PreparedInstance], mode: Mode<'_>) -> Result<Vec<(Graph<'a>, NodeId)>> {
        par::map(self.config.parallel, batch, |i, inst| {
            let mut g = Graph::with_params(&self.params);
            let mut r = match mode {
                Mode::Train { epoch, positions, .. } => {
                    Some(rng::stream(self.config.seed, &[rng::ENCODE_DROPOUT, epoch as u64, positions[i] as u64]))
                }
                Mode::Eval => None,
            };
            let node = self.encode(&mut g, inst, r.as_mut())?;
            Ok((g, node))
        })
        .into_iter()
        .collect()
    }

    /// Forward, loss and gradients of one batch.
    pub fn batch_step(&self, batch: &[&PreparedInstance], memory: Option<&MemoryStore>, mode: Mode<'_>) -> Result<StepOutput> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let d_r = self.pair_dim();
        let mut encoded = self.encode_batch(batch, mode)?;
        let mut reps = Vec::with_capacity(b * d_r);
        for (g, r) in &encoded {
            reps.extend_from_slice(g.value(*r));
        }

        let mut g = Graph::with_params(&self.params);
        let rep_node = g.variable(Shape::new(b, d_r), reps.clone())?;
        let mut dropouts = match mode {
            Mode::Train { epoch, batch: index, .. } => Some(Dropouts::new(self.config.seed, epoch, index, self.config.memory_dropout)),
            Mode::Eval => None,
        };
        let (rel, con, _) = self.heads(&mut g, rep_node, batch, memory, dropouts.as_mut(), true, self.config.exclude_self)?;
        let gold: Vec<usize> = batch.iter().map(|i| i.relations[0]).collect();
        let gold_con: Vec<Option<usize>> = batch.iter().map(|i| i.connective).collect();
        let total = ClassifierHeads::joint_loss(&mut g, rel.mixed, con, &gold, &gold_con)?;
        let loss = g.scale(total, 1.0 / b as f64);
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss_value}")));
        }
        let predictions = g.value(rel.mixed).chunks(self.labels.num_relations()).map(argmax).collect();
        g.backward(loss)?;
        let mut grads = g.param_grads();
        let d_reps = g.grad(rep_node).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b * d_r]);
        drop(g);

        // Backward in chunks so at most one chunk of per-instance stores is alive.
        let chunk = par::workers(self.config.parallel).max(1);
        for (c, tapes) in encoded.chunks_mut(chunk).enumerate() {
            let stores = par::map_mut(self.config.parallel, tapes, |i, (tape, r)| -> Result<GradStore> {
                let k = c * chunk + i;
                tape.backward_from(&[(*r, &d_reps[k * d_r..(k + 1) * d_r])])?;
                Ok(tape.param_grads())
            });
            for s in stores {
                grads.merge(&s?);
            }
        }
        Ok(StepOutput {
            loss: loss_value,
            grads,
            reps,
            predictions,
        })
    }

    /// Pair representations in evaluation mode.
    pub fn represent(&self, batch: &[&PreparedInstance]) -> Result<Vec<f64>> {
        let encoded = self.encode_batch(batch, Mode::Eval)?;
        let mut reps = Vec::with_capacity(batch.len() * self.pair_dim());
        for (g, r) in &encoded {
            reps.extend_from_slice(g.value(*r));
        }
        Ok(reps)
    }

    /// Evaluation-mode predictions; `top_k` retrieved slots per instance.
    pub fn predict(
        &self,
        instances: &[&PreparedInstance],
        memory: Option<&MemoryStore>,
        top_k: usize,
        exclude_self: bool,
    ) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 64;
        let n_r = self.labels.num_relations();
        let mut out = Vec::with_capacity(instances.len());
        for batch in instances.chunks(CHUNK) {
            let reps = self.represent(batch)?;
            let mut g = Graph::with_params(&self.params);
            let rep_node = g.constant(Shape::new(batch.len(), self.pair_dim()), reps)?;
            let (rel, _, retrieval) = self.heads(&mut g, rep_node, batch, memory, None, false, exclude_self)?;
            let probs = ClassifierHeads::distribution(&mut g, rel.mixed);
            let weights = retrieval.map(|r| g.value(r.weights));
            let m = memory.map_or(0, MemoryStore::len);
            for (i, p) in g.value(probs).chunks(n_r).enumerate() {
                let retrieved = match (weights, top_k) {
                    (Some(w), k) if k > 0 => memory::top_slots(&w[i * m..(i + 1) * m], k),
                    _ => Vec::new(),
                };
                out.push(Prediction {
                    probabilities: p.to_vec(),
                    relation: argmax(p),
                    base_relation: argmax(&g.value(rel.base)[i * n_r..(i + 1) * n_r]),
                    retrieved,
                });
            }
        }
        Ok(out)
    }
}
