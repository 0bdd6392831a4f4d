//! Planted-marker corpus generator.
//!
//! Every relation `j` owns a marker word that appears in Arg2 of each of its
//! instances; everything else is filler drawn independently of the label.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Instance, LabelSpace};
use crate::error::{Error, Result};
use crate::rng;

const FILLER_STREAM: u64 = 0x5157;
const LEVEL1: [&str; 4] = ["Comparison", "Contingency", "Expansion", "Temporal"];
const LEVEL2: [&str; 11] = [
    "Temporal.Asynchronous",
    "Temporal.Synchrony",
    "Contingency.Cause",
    "Contingency.Pragmatic_cause",
    "Comparison.Contrast",
    "Comparison.Concession",
    "Expansion.Conjunction",
    "Expansion.Instantiation",
    "Expansion.Restatement",
    "Expansion.Alternative",
    "Expansion.List",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_relations: usize,
    /// Filler tokens per argument, inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    pub filler_words: usize,
    pub connectives_per_relation: usize,
    /// Share of instances that carry a second relation (and its marker).
    pub multi_label_fraction: f64,
}

impl SynthSpec {
    pub fn new(num_relations: usize) -> Self {
        SynthSpec {
            num_relations,
            min_len: 3,
            max_len: 7,
            filler_words: 300,
            connectives_per_relation: 2,
            multi_label_fraction: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_relations < 2 {
            return Err(Error::InvalidArgument("synthetic corpus needs at least 2 relations".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "bad filler length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.filler_words == 0 || self.filler_words > 60 * 60 {
            return Err(Error::InvalidArgument("filler_words must be in 1..=3600".into()));
        }
        if self.connectives_per_relation == 0 {
            return Err(Error::InvalidArgument("connectives_per_relation must be positive".into()));
        }
        Ok(())
    }

    pub fn label_space(&self) -> LabelSpace {
        let relations: Vec<String> = match self.num_relations {
            4 => LEVEL1.iter().map(|s| s.to_string()).collect(),
            11 => LEVEL2.iter().map(|s| s.to_string()).collect(),
            n => (0..n).map(|j| format!("Rel{j}")).collect(),
        };
        let connectives = (0..self.num_relations)
            .flat_map(|j| (0..self.connectives_per_relation).map(move |k| format!("conn{j}_{k}")))
            .collect();
        LabelSpace::new(relations, connectives).expect("generated names are unique")
    }
}

/// The marker word planted for relation `j`. Built from consonants that
/// fillers never use, so markers and fillers are disjoint.
pub fn marker(j: usize) -> String {
    const C: [char; 6] = ['z', 'x', 'q', 'j', 'w', 'h'];
    const V: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let s1 = j % 30;
    let s2 = (j / 30) % 30;
    format!("{}{}{}{}y", C[s1 / 5], V[s1 % 5], C[s2 / 5], V[s2 % 5])
}

fn filler_inventory(spec: &SynthSpec, seed: u64) -> Vec<String> {
    const C: [char; 12] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
    const V: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let syllables: Vec<String> = C.iter().flat_map(|c| V.iter().map(move |v| format!("{c}{v}"))).collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    let mut r = rng::stream(seed, &[FILLER_STREAM]);
    words.shuffle(&mut r);
    words.truncate(spec.filler_words);
    words
}

/// `count` instances with class-balanced labels (counts differ by at most 1).
pub fn generate_split(spec: &SynthSpec, count: usize, seed: u64, stream: u64, id_prefix: &str) -> Result<Vec<Instance>> {
    spec.validate()?;
    let fillers = filler_inventory(spec, seed);
    let mut r = rng::stream(seed, &[FILLER_STREAM, stream]);
    let mut classes: Vec<usize> = (0..count).map(|i| i % spec.num_relations).collect();
    classes.shuffle(&mut r);

    let mut out = Vec::with_capacity(count);
    for (i, &rel) in classes.iter().enumerate() {
        let draw = |r: &mut rng::StreamRng| -> Vec<String> {
            let len = r.gen_range(spec.min_len..=spec.max_len);
            (0..len).map(|_| fillers[r.gen_range(0..fillers.len())].clone()).collect()
        };
        let arg1 = draw(&mut r);
        let mut arg2 = draw(&mut r);
        let mut relations = vec![rel];
        if spec.multi_label_fraction > 0.0 && r.gen::<f64>() < spec.multi_label_fraction {
            let other = (rel + r.gen_range(1..spec.num_relations)) % spec.num_relations;
            relations.push(other);
        }
        for &j in &relations {
            let pos = r.gen_range(0..=arg2.len());
            arg2.insert(pos, marker(j));
        }
        let connective = Some(rel * spec.connectives_per_relation + r.gen_range(0..spec.connectives_per_relation));
        out.push(Instance {
            id: format!("{id_prefix}{i}"),
            arg1,
            arg2,
            connective,
            relations,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub labels: LabelSpace,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

pub fn generate_synthetic(num_train: usize, num_test: usize, num_relations: usize, seed: u64) -> Result<SyntheticCorpus> {
    let spec = SynthSpec::new(num_relations);
    Ok(SyntheticCorpus {
        labels: spec.label_space(),
        train: generate_split(&spec, num_train, seed, 1, "train-")?,
        test: generate_split(&spec, num_test, seed, 3, "test-")?,
    })
}
