//! Edit examples, targets, and the token conventions shared by every task.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Desired output: a class id or an answer token sequence (without EOS).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Sequence(Vec<u32>),
}

/// Model output in the same space as [`Target`].
pub type Prediction = Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Raw,
    Train,
    Val,
    Edit,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditExample {
    pub id: u64,
    /// Classification: the full input. Generation: the question prompt.
    pub tokens: Vec<u32>,
    pub target: Target,
    /// Inputs that must receive the same target.
    pub equivalents: Vec<Vec<u32>>,
    pub split: Split,
}

/// An input sequence together with the positions whose outputs are scored
/// and the label expected at each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scored {
    pub input: Vec<u32>,
    pub rows: Vec<(usize, usize)>,
}

impl Scored {
    pub fn positions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.0).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.1).collect()
    }
}

/// Teacher-forced scoring layout of `tokens` against `target`.
///
/// Classification scores position 0 (the pooled position). Generation feeds
/// `prompt ++ answer` and scores every answer token plus the closing EOS.
pub fn scored(tokens: &[u32], target: &Target) -> Scored {
    match target {
        Target::Class(c) => Scored {
            input: tokens.to_vec(),
            rows: vec![(0, *c)],
        },
        Target::Sequence(answer) => {
            let p = tokens.len();
            let mut input = tokens.to_vec();
            input.extend_from_slice(answer);
            let rows = answer
                .iter()
                .chain(std::iter::once(&EOS))
                .enumerate()
                .map(|(i, &tok)| (p - 1 + i, tok as usize))
                .collect();
            Scored { input, rows }
        }
    }
}

impl EditExample {
    pub fn scored(&self) -> Scored {
        scored(&self.tokens, &self.target)
    }

    pub fn scored_equivalents(&self) -> Vec<Scored> {
        self.equivalents
            .iter()
            .map(|e| scored(e, &self.target))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_scoring_covers_answer_and_eos() {
        let s = scored(&[BOS, 10, 11, 3], &Target::Sequence(vec![20, 21]));
        assert_eq!(s.input, vec![BOS, 10, 11, 3, 20, 21]);
        assert_eq!(s.rows, vec![(3, 20), (4, 21), (5, EOS as usize)]);
    }

    #[test]
    fn target_json_is_untagged() {
        assert_eq!(serde_json::to_string(&Target::Class(1)).unwrap(), "1");
        assert_eq!(
            serde_json::from_str::<Target>("[4,5]").unwrap(),
            Target::Sequence(vec![4, 5])
        );
    }
}
