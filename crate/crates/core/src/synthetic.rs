//! Seeded synthetic corpora and multi-hop samples for tests, benches and
//! smoke runs.
//!
//! Every document gets a two-word title made of words used nowhere else in
//! the corpus, so a title query ranks its document first. Each hop's text
//! mentions one title word of the next hop, and the last hop states the
//! answer.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, QaSample};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "st", "tr", "sh"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "io", "ou"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let w = pseudo_word(&mut self.rng, syllables);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub corpus: Corpus,
    pub samples: Vec<QaSample>,
}

/// `n_docs` documents and `n_samples` samples with hop counts cycling
/// 2, 3, 4. Supporting documents are drawn without replacement while the
/// corpus lasts.
pub fn generate(n_docs: usize, n_samples: usize, seed: u64) -> SyntheticSet {
    assert!(n_docs >= 4, "need at least 4 documents for a 4-hop sample");
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: HashSet::new(),
    };
    let filler: Vec<String> = (0..120).map(|_| words.fresh(2)).collect();
    let titles: Vec<(String, String)> = (0..n_docs).map(|_| (words.fresh(3), words.fresh(3))).collect();
    let mut bodies: Vec<String> = (0..n_docs)
        .map(|_| {
            let len = words.rng.gen_range(20..60);
            (0..len).map(|_| filler.choose(&mut words.rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect();

    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut words.rng);
    let mut cursor = 0;
    let mut samples = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let hops = 2 + (k % 3);
        let chain: Vec<usize> = if cursor + hops <= order.len() {
            cursor += hops;
            order[cursor - hops..cursor].to_vec()
        } else {
            order.choose_multiple(&mut words.rng, hops).copied().collect()
        };
        for pair in chain.windows(2) {
            let next = &titles[pair[1]].0;
            bodies[pair[0]].push_str(&format!(". It is tied to {}", capitalize(next)));
        }
        let answer = capitalize(&words.fresh(3));
        let last = *chain.last().unwrap();
        bodies[last].push_str(&format!(". Its keeper was {answer}"));
        let first = &titles[chain[0]];
        samples.push(QaSample {
            sample_id: format!("syn{k:05}"),
            question: format!(
                "Starting from {} {}, follow {} links: who was the keeper at the end?",
                capitalize(&first.0),
                capitalize(&first.1),
                hops - 1
            ),
            gold_answer: answer.clone(),
            answer_aliases: vec![format!("the {}", answer.to_lowercase())],
            hop_count: hops as u8,
            supporting_doc_ids: chain.iter().map(|&i| doc_id(i)).collect(),
        });
    }

    let docs = titles
        .iter()
        .zip(bodies)
        .enumerate()
        .map(|(i, ((a, b), body))| Document::new(doc_id(i), format!("{} {}", capitalize(a), capitalize(b)), format!("{body}.")))
        .collect();
    SyntheticSet {
        corpus: Corpus::from_documents(docs).expect("generated ids are unique"),
        samples,
    }
}

fn doc_id(i: usize) -> String {
    format!("doc{i:05}")
}
