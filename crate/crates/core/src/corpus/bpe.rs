//! Byte-pair-encoding subword model over characters.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, UNK_TOKEN};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    symbols: Vocab,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    /// Learns `num_merges` merges from word frequencies. Each round merges
    /// the most frequent adjacent symbol pair (ties: lexicographically
    /// smallest pair); learning stops early when no pair is left.
    pub fn learn<'a>(words: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut chars: Vec<String> = counts
            .keys()
            .flat_map(|w| w.chars().map(|c| c.to_string()))
            .collect();
        chars.sort();
        chars.dedup();

        let mut segmented: Vec<(Vec<String>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
            .collect();

        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &segmented {
                for win in syms.windows(2) {
                    *pairs.entry((win[0].as_str(), win[1].as_str())).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((l, r), _)| (l.to_string(), r.to_string()));
            let Some((left, right)) = best else { break };
            for (syms, _) in &mut segmented {
                if syms.windows(2).any(|w| w[0] == left && w[1] == right) {
                    *syms = apply_merge(std::mem::take(syms), &left, &right);
                }
            }
            merges.push((left, right));
        }

        let symbols = Vocab::from_tokens(chars.into_iter().chain(merges.iter().map(|(l, r)| format!("{l}{r}"))));
        let mut model = BpeModel {
            merges,
            symbols,
            ranks: HashMap::new(),
        };
        model.reindex();
        model
    }

    pub fn reindex(&mut self) {
        self.symbols.reindex();
        self.ranks = self.merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbols(&self) -> &Vocab {
        &self.symbols
    }

    /// Splits `word` into subwords by applying merges in learned order.
    /// Characters never seen during learning become the UNK symbol.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                if self.symbols.get(&s).is_some() {
                    s
                } else {
                    UNK_TOKEN.to_string()
                }
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            syms = apply_merge(syms, l, r);
        }
        syms
    }

    pub fn segment_ids(&self, word: &str) -> Vec<u32> {
        self.segment(word).iter().map(|s| self.symbols.id(s)).collect()
    }
}

fn apply_merge(syms: Vec<String>, left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-checkable reference: overlapping adjacent pair counts.
    fn pair_counts(words: &[&str]) -> BTreeMap<(char, char), usize> {
        let mut m = BTreeMap::new();
        for w in words {
            let cs: Vec<char> = w.chars().collect();
            for p in cs.windows(2) {
                *m.entry((p[0], p[1])).or_default() += 1;
            }
        }
        m
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = ["aaab"; 5];
        let counts = pair_counts(&corpus);
        assert_eq!(counts[&('a', 'a')], 10);
        assert_eq!(counts[&('a', 'b')], 5);

        let model = BpeModel::learn(corpus, 1);
        assert_eq!(model.merges(), [("a".to_string(), "a".to_string())]);
        assert_eq!(model.segment("aaab"), ["aa", "a", "b"]);
    }

    #[test]
    fn zero_merges_gives_characters() {
        let model = BpeModel::learn(["hello", "world"], 0);
        assert_eq!(model.segment("hold"), ["h", "o", "l", "d"]);
    }

    #[test]
    fn unseen_characters_map_to_unk() {
        let model = BpeModel::learn(["abc"], 2);
        let seg = model.segment("abz");
        assert_eq!(seg.last().unwrap(), UNK_TOKEN);
        assert!(model.segment_ids("zzz").iter().all(|&i| i == crate::corpus::UNK));
    }

    #[test]
    fn stops_when_words_are_single_symbols() {
        let model = BpeModel::learn(["ab"], 10);
        assert_eq!(model.merges().len(), 1);
    }

    proptest! {
        #[test]
        fn segmentation_reassembles_the_word(
            corpus in proptest::collection::vec("[a-e]{1,8}", 1..30),
            probe in "[a-e]{1,12}",
            merges in 0usize..40,
        ) {
            let model = BpeModel::learn(corpus.iter().map(String::as_str), merges);
            let seen: String = corpus.concat();
            let probe: String = probe.chars().filter(|c| seen.contains(*c)).collect();
            let seg = model.segment(&probe);
            prop_assert_eq!(seg.concat(), probe);
            for s in &seg {
                prop_assert!(model.symbols().get(s).is_some());
            }
        }
    }
}
