//! Synthetic stand-ins for fact checking (classification) and closed-book
//! question answering (generation) over a random knowledge base.
//!
//! Facts are drawn from a long-tailed (Zipf) distribution. Frequent facts are
//! learned by the initial model; tail facts often appear only in the edit or
//! test split, so the trained model makes genuine mistakes on them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SmeError};
use crate::example::{EditExample, Split, Target, BOS};

/// Argument-reordering marker for fact-check inputs.
pub const REV: u32 = 3;
/// Question marker.
pub const QMARK: u32 = 4;
/// Paraphrase template markers.
pub const TEMPLATES: [u32; 3] = [5, 6, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    FactCheck,
    KvQa,
}

/// Knowledge base and surface vocabulary of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub kind: SynthKind,
    pub seed: u64,
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    /// Subject names (one token for fact check, two for QA).
    pub subjects: Vec<Vec<u32>>,
    pub relations: Vec<u32>,
    /// Object surface forms: single tokens (fact check) or answers of 2–4
    /// tokens (QA).
    pub objects: Vec<Vec<u32>>,
    /// `facts[s * relations.len() + r]` is the object index of `(s, r)`.
    pub facts: Vec<usize>,
    /// Fact indices from most to least frequent.
    pub popularity: Vec<usize>,
}

fn range(lo: u32, n: usize) -> Vec<u32> {
    (lo..lo + n as u32).collect()
}

impl SynthTask {
    /// Fact-check task: inputs `BOS s r o`, label 1 iff `(s, r, o)` holds.
    pub fn fact_check(seed: u64) -> Self {
        Self::fact_check_sized(seed, 120, 8)
    }

    /// Fact-check task over `n_subjects × n_relations` facts (at most
    /// 120 × 8).
    pub fn fact_check_sized(seed: u64, n_subjects: usize, n_relations: usize) -> Self {
        let single = |v: Vec<u32>| v.into_iter().map(|t| vec![t]).collect::<Vec<_>>();
        let objects = single(range(150, 50));
        let subjects = single(range(30, n_subjects.min(120)));
        let relations = range(10, n_relations.min(8));
        Self::build(SynthKind::FactCheck, seed, 0.6, subjects, relations, objects)
    }

    /// QA task: prompt `BOS f l r ?` about a two-token subject, answer a 2–4
    /// token object name. Names share first tokens so a wrong guess is
    /// usually wrong on several tokens.
    pub fn kv_qa(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b1e);
        let heads = range(80, 15);
        let tails = range(95, 125);
        let mut seen = HashSet::new();
        let mut objects = Vec::with_capacity(300);
        while objects.len() < 300 {
            let len = rng.random_range(2..=4);
            let mut name = vec![heads[rng.random_range(0..heads.len())]];
            name.extend((1..len).map(|_| tails[rng.random_range(0..tails.len())]));
            if seen.insert(name.clone()) {
                objects.push(name);
            }
        }
        let mut subjects = Vec::new();
        for f in range(20, 20) {
            for l in range(40, 40) {
                subjects.push(vec![f, l]);
            }
        }
        let mut t = Self::build(SynthKind::KvQa, seed, 0.8, subjects, range(10, 10), objects);
        t.vocab_size = 256;
        t
    }

    fn build(
        kind: SynthKind,
        seed: u64,
        zipf_exponent: f64,
        subjects: Vec<Vec<u32>>,
        relations: Vec<u32>,
        objects: Vec<Vec<u32>>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_facts = subjects.len() * relations.len();
        let facts = (0..n_facts).map(|_| rng.random_range(0..objects.len())).collect();
        let mut popularity: Vec<usize> = (0..n_facts).collect();
        popularity.shuffle(&mut rng);
        Self {
            kind,
            seed,
            vocab_size: 200,
            zipf_exponent,
            subjects,
            relations,
            objects,
            facts,
            popularity,
        }
    }

    /// The same task with a different long-tail exponent.
    pub fn with_zipf_exponent(mut self, s: f64) -> Self {
        self.zipf_exponent = s;
        self
    }

    pub fn n_facts(&self) -> usize {
        self.facts.len()
    }

    fn subject_relation(&self, fact: usize) -> (usize, usize) {
        (fact / self.relations.len(), fact % self.relations.len())
    }

    /// Surface forms of a fact-check triple; all share its label.
    fn fc_forms(&self, s: usize, r: usize, o: u32) -> Vec<Vec<u32>> {
        let (sub, rel) = (&self.subjects[s], self.relations[r]);
        let [t1, t2, _] = TEMPLATES;
        let form = |parts: &[&[u32]]| parts.concat();
        vec![
            form(&[&[BOS], sub, &[rel, o]]),
            form(&[&[BOS, t1, rel], sub, &[o]]),
            form(&[&[BOS, REV, o, rel], sub]),
            form(&[&[BOS, t2, o], sub, &[rel]]),
        ]
    }

    /// Paraphrase templates of a question; all share its answer.
    fn qa_forms(&self, s: usize, r: usize) -> Vec<Vec<u32>> {
        let (sub, rel) = (&self.subjects[s], self.relations[r]);
        let [t1, t2, t3] = TEMPLATES;
        let form = |parts: &[&[u32]]| parts.concat();
        vec![
            form(&[&[BOS], sub, &[rel, QMARK]]),
            form(&[&[BOS, t1, rel], sub, &[QMARK]]),
            form(&[&[BOS, t2], sub, &[rel]]),
            form(&[&[BOS, t3, rel, QMARK], sub]),
        ]
    }

    /// Samples `n` examples. Different `stream` values give independent
    /// samples from the same knowledge base; ids start at `first_id`.
    pub fn sample(&self, n: usize, stream: u64, first_id: u64, split: Split) -> Vec<EditExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stream));
        let zipf = Zipf::new(self.n_facts() as f64, self.zipf_exponent).expect("valid zipf");
        (0..n)
            .map(|i| {
                let rank = zipf.sample(&mut rng) as usize - 1;
                let fact = self.popularity[rank.min(self.n_facts() - 1)];
                let (s, r) = self.subject_relation(fact);
                let (mut forms, target) = match self.kind {
                    SynthKind::FactCheck => {
                        let truth = self.facts[fact];
                        let holds = rng.random_bool(0.5);
                        let obj = if holds {
                            truth
                        } else {
                            let k = rng.random_range(0..self.objects.len() - 1);
                            if k >= truth {
                                k + 1
                            } else {
                                k
                            }
                        };
                        (self.fc_forms(s, r, self.objects[obj][0]), Target::Class(holds as usize))
                    }
                    SynthKind::KvQa => (
                        self.qa_forms(s, r),
                        Target::Sequence(self.objects[self.facts[fact]].clone()),
                    ),
                };
                let main = rng.random_range(0..forms.len());
                let tokens = forms.remove(main);
                EditExample {
                    id: first_id + i as u64,
                    tokens,
                    target,
                    equivalents: forms,
                    split,
                }
            })
            .collect()
    }
}

/// `n` fact-check examples from the knowledge base seeded by `seed`.
pub fn gen_fact_check(n: usize, seed: u64) -> Result<Vec<EditExample>> {
    if n == 0 {
        return Err(SmeError::Parameter("n must be at least 1".into()));
    }
    Ok(SynthTask::fact_check(seed).sample(n, 0, 0, Split::Raw))
}

/// `n` QA examples from the knowledge base seeded by `seed`.
pub fn gen_kv_qa(n: usize, seed: u64) -> Result<Vec<EditExample>> {
    if n == 0 {
        return Err(SmeError::Parameter("n must be at least 1".into()));
    }
    Ok(SynthTask::kv_qa(seed).sample(n, 0, 0, Split::Raw))
}

/// Partition of a raw dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<EditExample>,
    pub val: Vec<EditExample>,
    pub edit: Vec<EditExample>,
    /// Subset of `train` used for TrainR.
    pub d_tr: Vec<EditExample>,
    /// `train` minus `d_tr`, source of memory queries.
    pub pool: Vec<EditExample>,
}

/// Seeded split into train/val/edit by `ratios`, with `d_tr_size` examples of
/// the train split set aside as D_tr.
pub fn split_dataset(
    raw: &[EditExample],
    ratios: [f64; 3],
    d_tr_size: usize,
    seed: u64,
) -> Result<Splits> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SmeError::Parameter(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratios[0] * raw.len() as f64).round() as usize;
    let n_val = (ratios[1] * raw.len() as f64).round() as usize;
    let n_val = n_val.min(raw.len() - n_train);
    let take = |idx: &[usize], split: Split| -> Vec<EditExample> {
        idx.iter()
            .map(|&i| EditExample {
                split,
                ..raw[i].clone()
            })
            .collect()
    };
    let train = take(&order[..n_train], Split::Train);
    let val = take(&order[n_train..n_train + n_val], Split::Val);
    let edit = take(&order[n_train + n_val..], Split::Edit);
    if train.is_empty() || val.is_empty() || edit.is_empty() {
        return Err(SmeError::Parameter(format!(
            "empty split: train {}, val {}, edit {}",
            train.len(),
            val.len(),
            edit.len()
        )));
    }
    if d_tr_size == 0 || d_tr_size >= train.len() {
        return Err(SmeError::Parameter(format!(
            "D_tr size {d_tr_size} must be in 1..{}",
            train.len()
        )));
    }
    let mut t_order: Vec<usize> = (0..train.len()).collect();
    t_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xd7));
    let d_tr = t_order[..d_tr_size].iter().map(|&i| train[i].clone()).collect();
    let mut rest: Vec<usize> = t_order[d_tr_size..].to_vec();
    rest.sort_unstable();
    let pool = rest.iter().map(|&i| train[i].clone()).collect();
    Ok(Splits {
        train,
        val,
        edit,
        d_tr,
        pool,
    })
}

pub fn write_jsonl(path: &Path, examples: &[EditExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EditExample>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// SHA-256 of the canonical JSONL encoding.
pub fn dataset_digest(examples: &[EditExample]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(serde_json::to_vec(e).expect("serializable"));
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fact_check_true_triples_are_labelled_one() {
        let task = SynthTask::fact_check(3);
        for e in task.sample(300, 1, 0, Split::Raw) {
            let t = &e.tokens;
            let (s_tok, r_tok, o_tok) = match t[1] {
                REV => (t[4], t[3], t[2]),
                x if x == TEMPLATES[0] => (t[3], t[2], t[4]),
                x if x == TEMPLATES[1] => (t[3], t[4], t[2]),
                _ => (t[1], t[2], t[3]),
            };
            let s = task.subjects.iter().position(|t| t[0] == s_tok).unwrap();
            let r = task.relations.iter().position(|&t| t == r_tok).unwrap();
            let truth = task.objects[task.facts[s * task.relations.len() + r]][0];
            assert_eq!(e.target, Target::Class((o_tok == truth) as usize));
        }
    }

    #[test]
    fn qa_answers_have_two_to_four_tokens() {
        for e in gen_kv_qa(500, 2).unwrap() {
            match e.target {
                Target::Sequence(a) => assert!((2..=4).contains(&a.len())),
                _ => panic!("QA targets are sequences"),
            }
        }
    }

    #[test]
    fn ids_are_unique() {
        let d = gen_fact_check(1000, 0).unwrap();
        let ids: HashSet<u64> = d.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), d.len());
    }
}
