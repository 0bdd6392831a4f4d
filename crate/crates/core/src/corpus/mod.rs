//! Instances, label spaces, vocabularies and the instance file format.

pub mod bpe;
pub mod io;
pub mod synth;
pub mod vocab;

pub use bpe::BpeModel;
pub use io::{load_instances, read_instances, write_instances, Dataset};
pub use synth::{generate_split, generate_synthetic, SynthSpec, SyntheticCorpus};
pub use vocab::{Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One argument pair with its annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub arg1: Vec<String>,
    pub arg2: Vec<String>,
    pub connective: Option<usize>,
    /// Gold relation ids; never empty, no duplicates, first entry is the
    /// reference label for metrics.
    pub relations: Vec<usize>,
}

impl Instance {
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::Data(format!("instance {} has no relations", self.id)));
        }
        if self.arg1.is_empty() || self.arg2.is_empty() {
            return Err(Error::Data(format!("instance {} has an empty argument", self.id)));
        }
        if let Some(r) = self.relations.iter().find(|&&r| r >= labels.num_relations()) {
            return Err(Error::Data(format!("instance {}: relation id {r} out of range", self.id)));
        }
        if let Some(c) = self.connective.filter(|&c| c >= labels.num_connectives()) {
            return Err(Error::Data(format!("instance {}: connective id {c} out of range", self.id)));
        }
        Ok(())
    }

    pub fn arg1_text(&self) -> String {
        self.arg1.join(" ")
    }

    pub fn arg2_text(&self) -> String {
        self.arg2.join(" ")
    }
}

/// Ordered relation and connective names. Indices are one-hot positions and
/// must not change for the lifetime of a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    relations: Vec<String>,
    connectives: Vec<String>,
    #[serde(skip)]
    relation_index: HashMap<String, usize>,
    #[serde(skip)]
    connective_index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(relations: Vec<String>, connectives: Vec<String>) -> Result<Self> {
        let mut space = LabelSpace::default();
        for r in relations {
            if space.relation_index.contains_key(&r) {
                return Err(Error::Data(format!("duplicate relation name `{r}`")));
            }
            space.intern_relation(&r);
        }
        for c in connectives {
            if space.connective_index.contains_key(&c) {
                return Err(Error::Data(format!("duplicate connective name `{c}`")));
            }
            space.intern_connective(&c);
        }
        Ok(space)
    }

    /// Rebuilds lookup tables after deserialisation.
    pub fn reindex(&mut self) {
        self.relation_index = self.relations.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        self.connective_index = self.connectives.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn connectives(&self) -> &[String] {
        &self.connectives
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_connectives(&self) -> usize {
        self.connectives.len()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn connective_id(&self, name: &str) -> Option<usize> {
        self.connective_index.get(name).copied()
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn connective_name(&self, id: usize) -> &str {
        &self.connectives[id]
    }

    pub(crate) fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&i) = self.relation_index.get(name) {
            return i;
        }
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), self.relations.len() - 1);
        self.relations.len() - 1
    }

    pub(crate) fn intern_connective(&mut self, name: &str) -> usize {
        if let Some(&i) = self.connective_index.get(name) {
            return i;
        }
        self.connectives.push(name.to_string());
        self.connective_index.insert(name.to_string(), self.connectives.len() - 1);
        self.connectives.len() - 1
    }
}

/// Lowercase, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

/// Keeps the first `n` items, right-padding shorter sequences with `pad`.
pub fn pad_truncate<T: Clone>(tokens: &[T], n: usize, pad: T) -> Vec<T> {
    let mut out: Vec<T> = tokens.iter().take(n).cloned().collect();
    out.resize(n, pad);
    out
}

/// Splits every instance with `k` gold relations into `k` single-relation
/// copies sharing arguments and connective. Copies get ids `<id>#<j>`.
pub fn expand_multilabel(instances: &[Instance]) -> Vec<Instance> {
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.relations.len() == 1 {
            out.push(inst.clone());
            continue;
        }
        for (j, &rel) in inst.relations.iter().enumerate() {
            out.push(Instance {
                id: format!("{}#{j}", inst.id),
                relations: vec![rel],
                ..inst.clone()
            });
        }
    }
    out
}
