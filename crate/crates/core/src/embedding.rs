//! Token vectors built from a word table, a subword convolution/highway path
//! and projected precomputed contextual vectors, concatenated in that order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId, ParamId, ParamRegistry, Shape};
use crate::corpus::{pad_truncate, BpeModel, Vocab, PAD};
use crate::error::{Error, Result};
use crate::nn::{self, Linear};

/// Bound of the uniform initialiser for embedding rows.
pub const EMBED_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub word_dim: usize,
    pub subword_dim: usize,
    pub subword_embed_dim: usize,
    pub contextual_dim: usize,
    /// Width of the vectors in the contextual file (projected to `contextual_dim`).
    pub contextual_input_dim: usize,
    pub kernel_widths: Vec<usize>,
    pub highway_layers: usize,
}

impl EmbeddingConfig {
    pub fn output_dim(&self) -> usize {
        self.word_dim + self.subword_dim + self.contextual_dim
    }

    /// Output channels per kernel width; the remainder goes to the first widths.
    pub fn channels(&self) -> Vec<usize> {
        let k = self.kernel_widths.len();
        (0..k)
            .map(|i| self.subword_dim / k + usize::from(i < self.subword_dim % k))
            .collect()
    }
}

/// Pretrained vectors in text form: a `count dim` header, then one
/// `token v1 .. vdim` line per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub dim: usize,
    pub tokens: Vec<String>,
    pub rows: Vec<f64>,
}

pub fn load_pretrained(path: impl AsRef<Path>) -> Result<Pretrained> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pretrained(BufReader::new(file), &path.display().to_string())
}

pub fn read_pretrained(reader: impl BufRead, source: &str) -> Result<Pretrained> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let (count, dim) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(perr(1, "missing `count dim` header".into()));
        };
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(c)), Some(Ok(d)), None) if d > 0 => break (c, d),
            _ => return Err(perr(i + 1, format!("expected `count dim` header, got `{line}`"))),
        }
    };
    let mut tokens = Vec::with_capacity(count);
    let mut rows = Vec::with_capacity(count * dim);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let token = it.next().expect("non-empty line");
        let before = rows.len();
        for v in it {
            rows.push(v.parse::<f64>().map_err(|_| perr(i + 1, format!("bad number `{v}`")))?);
        }
        if rows.len() - before != dim {
            return Err(perr(i + 1, format!("expected {dim} values, found {}", rows.len() - before)));
        }
        tokens.push(token.to_string());
    }
    if tokens.len() != count {
        return Err(perr(1, format!("header announces {count} vectors, file has {}", tokens.len())));
    }
    Ok(Pretrained { dim, tokens, rows })
}

#[derive(Clone, Debug, PartialEq)]
pub enum WordSource {
    Trainable(ParamId),
    Frozen(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordTable {
    pub vocab: Vocab,
    pub dim: usize,
    pub source: WordSource,
}

impl WordTable {
    /// Rows for `vocab` plus every pretrained token not already in it.
    /// Pretrained tokens get their file rows, others uniform noise; PAD is zero.
    pub fn build(
        reg: &mut ParamRegistry,
        seed: u64,
        mut vocab: Vocab,
        dim: usize,
        pretrained: Option<&Pretrained>,
        trainable: bool,
    ) -> Result<Self> {
        if let Some(p) = pretrained {
            if p.dim != dim {
                return Err(Error::Config(format!(
                    "word vectors have dimension {}, configuration expects {dim}",
                    p.dim
                )));
            }
            for t in &p.tokens {
                vocab.insert(t.clone());
            }
        }
        let mut data = nn::uniform(seed, "embed.word", vocab.len() * dim, EMBED_INIT);
        data[PAD as usize * dim..(PAD as usize + 1) * dim].fill(0.0);
        if let Some(p) = pretrained {
            for (k, t) in p.tokens.iter().enumerate() {
                let row = vocab.id(t) as usize;
                data[row * dim..(row + 1) * dim].copy_from_slice(&p.rows[k * dim..(k + 1) * dim]);
            }
        }
        let source = if trainable {
            WordSource::Trainable(reg.register("embed.word", Shape::new(vocab.len(), dim), data)?)
        } else {
            WordSource::Frozen(data)
        };
        Ok(WordTable { vocab, dim, source })
    }

    pub fn trainable(&self) -> bool {
        matches!(self.source, WordSource::Trainable(_))
    }

    pub fn data<'a>(&'a self, params: &'a ParamRegistry) -> &'a [f64] {
        match &self.source {
            WordSource::Trainable(id) => &params.get(*id).data,
            WordSource::Frozen(d) => d,
        }
    }

    /// Row id for a lookup: `None` for PAD (zero row, no gradient).
    pub fn lookup(&self, token: &str) -> Option<usize> {
        match self.vocab.id(token) {
            PAD => None,
            id => Some(id as usize),
        }
    }

    pub fn embed_word(&self, params: &ParamRegistry, token: &str) -> Vec<f64> {
        match self.lookup(token) {
            None => vec![0.0; self.dim],
            Some(r) => self.data(params)[r * self.dim..(r + 1) * self.dim].to_vec(),
        }
    }

    fn node<'a>(&'a self, g: &mut Graph<'a>) -> Result<NodeId> {
        let shape = Shape::new(self.vocab.len(), self.dim);
        match &self.source {
            WordSource::Trainable(id) => Ok(g.param(*id)),
            WordSource::Frozen(d) => g.constant_ref(shape, d),
        }
    }
}

/// `y = x + t * (h - x)` with `t = sigmoid(gate(x))`, `h = relu(transform(x))`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub gate: Linear,
    pub transform: Linear,
}

impl Highway {
    pub fn new(reg: &mut ParamRegistry, seed: u64, name: &str, dim: usize) -> Result<Self> {
        let gate = Linear::new(reg, seed, &format!("{name}.gate"), dim, dim, true)?;
        // Start closer to the carry path.
        reg.get_mut(gate.bias.expect("bias")).data.fill(-1.0);
        let transform = Linear::new(reg, seed, &format!("{name}.transform"), dim, dim, true)?;
        Ok(Highway { gate, transform })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let t = self.gate.forward(g, x)?;
        let t = g.sigmoid(t);
        let h = self.transform.forward(g, x)?;
        let h = g.relu(h);
        let d = g.sub(h, x)?;
        let td = g.mul(t, d)?;
        g.add(x, td)
    }
}

#[derive(Clone, Debug)]
pub struct SubwordConv {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct SubwordEncoder {
    pub table: ParamId,
    pub symbols: usize,
    pub embed_dim: usize,
    pub convs: Vec<SubwordConv>,
    pub highway: Vec<Highway>,
    pub dim: usize,
}

impl SubwordEncoder {
    pub fn new(reg: &mut ParamRegistry, seed: u64, cfg: &EmbeddingConfig, symbols: usize) -> Result<Self> {
        let e = cfg.subword_embed_dim;
        let table = reg.register(
            "embed.subword.table",
            Shape::new(symbols, e),
            nn::uniform(seed, "embed.subword.table", symbols * e, EMBED_INIT),
        )?;
        let mut convs = Vec::new();
        for (&width, ch) in cfg.kernel_widths.iter().zip(cfg.channels()) {
            let name = format!("embed.subword.conv{width}");
            let weight = nn::register_glorot(reg, seed, &format!("{name}.w"), Shape::new(width * e, ch), width * e, ch)?;
            let bias = nn::register_const(reg, &format!("{name}.b"), Shape::row(ch), 0.0)?;
            convs.push(SubwordConv { width, weight, bias });
        }
        let highway = (0..cfg.highway_layers)
            .map(|l| Highway::new(reg, seed, &format!("embed.subword.highway{l}"), cfg.subword_dim))
            .collect::<Result<_>>()?;
        Ok(SubwordEncoder {
            table,
            symbols,
            embed_dim: e,
            convs,
            highway,
            dim: cfg.subword_dim,
        })
    }

    /// `1 x d_s` vector for one segmented word.
    pub fn forward_word(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("subword encoder given an empty segmentation".into()));
        }
        let table = g.param(self.table);
        let rows: Vec<Option<usize>> = ids.iter().map(|&i| Some(i as usize)).collect();
        let x = g.gather_rows(table, &rows)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let w = g.param(c.weight);
            let b = g.param(c.bias);
            let y = g.conv1d(x, w, Some(b), c.width)?;
            let y = g.relu(y);
            pooled.push(g.max_seq(y)?);
        }
        let mut h = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled, Axis::Cols)?
        };
        for hw in &self.highway {
            h = hw.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Precomputed contextual vectors keyed by `(instance id, argument, position)`.
///
/// Text layout: a `count dim` header line, then `count` records
/// `<instance id> <argument 1|2> <position> <v1> .. <vdim>` separated by
/// whitespace. Positions are 0-based token offsets inside the argument.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextualStore {
    pub dim: usize,
    vectors: HashMap<(String, u8), Vec<Option<Vec<f64>>>>,
}

impl ContextualStore {
    pub fn new(dim: usize) -> Self {
        ContextualStore {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, arg: u8, position: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Data(format!(
                "contextual vector for {id} has {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        if !(arg == 1 || arg == 2) {
            return Err(Error::Data(format!("contextual record for {id}: argument must be 1 or 2")));
        }
        let slots = self.vectors.entry((id.to_string(), arg)).or_default();
        if slots.len() <= position {
            slots.resize(position + 1, None);
        }
        slots[position] = Some(v);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), &path.display().to_string())
    }

    pub fn read(reader: impl BufRead, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut store: Option<(ContextualStore, usize)> = None;
        let mut seen = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let Some((s, _)) = store.as_mut() else {
                match fields[..] {
                    [c, d] => {
                        let c = c.parse().map_err(|_| perr(i + 1, "bad count".into()))?;
                        let d = d.parse().map_err(|_| perr(i + 1, "bad dim".into()))?;
                        store = Some((ContextualStore::new(d), c));
                        continue;
                    }
                    _ => return Err(perr(i + 1, "expected `count dim` header".into())),
                }
            };
            if fields.len() != 3 + s.dim {
                return Err(perr(i + 1, format!("expected {} fields, found {}", 3 + s.dim, fields.len())));
            }
            let arg: u8 = fields[1].parse().map_err(|_| perr(i + 1, "bad argument index".into()))?;
            let pos: usize = fields[2].parse().map_err(|_| perr(i + 1, "bad position".into()))?;
            let v = fields[3..]
                .iter()
                .map(|x| x.parse::<f64>().map_err(|_| perr(i + 1, format!("bad number `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            s.insert(fields[0], arg, pos, v).map_err(|e| perr(i + 1, e.to_string()))?;
            seen += 1;
        }
        let (s, count) = store.ok_or_else(|| perr(1, "missing `count dim` header".into()))?;
        if seen != count {
            return Err(perr(1, format!("header announces {count} records, file has {seen}")));
        }
        Ok(s)
    }

    /// `n x dim` rows for the first `len` tokens of an argument; rows past
    /// `len` are zero. Multi-label duplicates (`<id>#<j>`) fall back to `<id>`.
    pub fn argument(&self, id: &str, arg: u8, len: usize, n: usize) -> Result<Vec<f64>> {
        let slots = self.vectors.get(&(id.to_string(), arg)).or_else(|| {
            id.rsplit_once('#')
                .and_then(|(base, _)| self.vectors.get(&(base.to_string(), arg)))
        });
        let slots = slots.ok_or_else(|| Error::Data(format!("no contextual vectors for instance {id} argument {arg}")))?;
        let mut out = vec![0.0; n * self.dim];
        for p in 0..len.min(n) {
            let v = slots
                .get(p)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Data(format!("no contextual vector for instance {id} argument {arg} position {p}")))?;
            out[p * self.dim..(p + 1) * self.dim].copy_from_slice(v);
        }
        Ok(out)
    }
}

/// One argument ready for the graph: padded word rows, segmentations and
/// raw contextual rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedArg {
    pub words: Vec<Option<usize>>,
    pub subwords: Vec<Option<Arc<[u32]>>>,
    pub contextual: Option<Vec<f64>>,
    /// Non-PAD tokens.
    pub len: usize,
}

pub type SegmentCache = HashMap<String, Arc<[u32]>>;

#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbeddingConfig,
    pub words: Option<WordTable>,
    pub subword: Option<SubwordEncoder>,
    pub bpe: BpeModel,
    pub contextual: Option<Linear>,
}

impl Embedder {
    pub fn new(
        reg: &mut ParamRegistry,
        seed: u64,
        config: EmbeddingConfig,
        words: Option<WordTable>,
        bpe: BpeModel,
    ) -> Result<Self> {
        if words.as_ref().map_or(0, |w| w.dim) != config.word_dim {
            return Err(Error::Config("word table width differs from word_dim".into()));
        }
        let subword = if config.subword_dim > 0 {
            Some(SubwordEncoder::new(reg, seed, &config, bpe.symbols().len())?)
        } else {
            None
        };
        let contextual = if config.contextual_dim > 0 {
            if config.contextual_input_dim == 0 {
                return Err(Error::Config("contextual_dim > 0 needs a contextual vector file".into()));
            }
            Some(Linear::new(
                reg,
                seed,
                "embed.contextual",
                config.contextual_input_dim,
                config.contextual_dim,
                false,
            )?)
        } else {
            None
        };
        Ok(Embedder {
            config,
            words,
            subword,
            bpe,
            contextual,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn prepare_arg(
        &self,
        id: &str,
        arg: u8,
        tokens: &[String],
        n: usize,
        contextual: Option<&ContextualStore>,
        cache: &mut SegmentCache,
    ) -> Result<PreparedArg> {
        let len = tokens.len().min(n);
        let padded: Vec<Option<&String>> = pad_truncate(&tokens.iter().map(Some).collect::<Vec<_>>(), n, None);
        let words = padded
            .iter()
            .map(|t| match (t, &self.words) {
                (Some(t), Some(w)) => w.lookup(t),
                _ => None,
            })
            .collect();
        let subwords = if self.subword.is_some() {
            padded
                .iter()
                .map(|t| {
                    t.map(|t| {
                        cache
                            .entry(t.clone())
                            .or_insert_with(|| self.bpe.segment_ids(t).into())
                            .clone()
                    })
                })
                .collect()
        } else {
            vec![None; n]
        };
        let contextual = match (&self.contextual, contextual) {
            (None, _) => None,
            (Some(_), None) => return Err(Error::Config("contextual embeddings enabled but no vectors loaded".into())),
            (Some(_), Some(store)) => {
                if store.dim != self.config.contextual_input_dim {
                    return Err(Error::Config(format!(
                        "contextual vectors have dimension {}, model expects {}",
                        store.dim, self.config.contextual_input_dim
                    )));
                }
                Some(store.argument(id, arg, len, n)?)
            }
        };
        Ok(PreparedArg {
            words,
            subwords,
            contextual,
            len,
        })
    }

    /// `N x d_e` rows `[word; subword; contextual]`.
    pub fn embed_sequence<'a>(&'a self, g: &mut Graph<'a>, arg: &PreparedArg) -> Result<NodeId> {
        let n = arg.words.len();
        let mut parts = Vec::with_capacity(3);
        if let Some(w) = &self.words {
            let table = w.node(g)?;
            parts.push(g.gather_rows(table, &arg.words)?);
        }
        if let Some(sw) = &self.subword {
            let zero = g.constant(Shape::row(sw.dim), vec![0.0; sw.dim])?;
            let mut done: HashMap<*const u32, NodeId> = HashMap::new();
            let mut rows = Vec::with_capacity(n);
            for s in &arg.subwords {
                rows.push(match s {
                    None => zero,
                    Some(ids) => match done.get(&ids.as_ptr()) {
                        Some(&node) => node,
                        None => {
                            let node = sw.forward_word(g, ids)?;
                            done.insert(ids.as_ptr(), node);
                            node
                        }
                    },
                });
            }
            parts.push(g.concat(&rows, Axis::Rows)?);
        }
        if let Some(proj) = &self.contextual {
            let raw = arg
                .contextual
                .as_ref()
                .ok_or_else(|| Error::Data("argument prepared without contextual vectors".into()))?;
            let x = g.constant(Shape::new(n, self.config.contextual_input_dim), raw.clone())?;
            parts.push(proj.forward(g, x)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, Axis::Cols)
        }
    }
}
