use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seeding::{stream_rng, streams};
use crate::sequence::TokenSequence;

/// One training record: condition features, target, and optionally the
/// materialized prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub id: String,
    /// `n x d_s` condition features.
    pub s_features: Array2<f64>,
    pub y: TokenSequence,
    pub x: Option<TokenSequence>,
}

impl PairedExample {
    pub fn new(id: String, s_features: Array2<f64>, y: TokenSequence) -> Result<Self> {
        ensure!(
            s_features.nrows() == y.len(),
            "example {id}: {} feature rows for {} tokens",
            s_features.nrows(),
            y.len()
        );
        Ok(Self {
            id,
            s_features,
            y,
            x: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        self.y.mask()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Features carry the target token, replaced by a wrong token at rate rho.
    NoisyChannel,
    /// Features carry a code `c`; the target is a fixed permutation of it.
    Cipher,
    /// The target at `i` is a fixed random function of `(c[i-1], c[i], c[i+1])`.
    LocalContext,
}

impl TaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::NoisyChannel => "noisy-channel",
            TaskKind::Cipher => "cipher",
            TaskKind::LocalContext => "local-context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// NoisyChannel / Cipher: feature corruption rate. LocalContext: fraction
    /// of context triples whose output departs from the position-wise map.
    pub corruption_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::LocalContext,
            vocab: 8,
            corruption_rate: 0.5,
            min_len: 32,
            max_len: 32,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab >= 2, "vocabulary must have at least 2 tokens");
        ensure!(
            (0.0..=1.0).contains(&self.corruption_rate),
            "corruption rate {} outside [0, 1]",
            self.corruption_rate
        );
        ensure!(
            self.min_len >= 1 && self.min_len <= self.max_len,
            "invalid length range {}..={}",
            self.min_len,
            self.max_len
        );
        Ok(())
    }

    /// Width of the condition features: the observed code one-hot followed
    /// by an independent decoy one-hot that carries no signal.
    pub fn feature_dim(&self) -> usize {
        2 * self.vocab
    }
}

/// The fixed random structure of a task, derived from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRules {
    pub spec: SyntheticTaskSpec,
    /// Position-wise code-to-token permutation.
    pub permutation: Vec<usize>,
    /// LocalContext table indexed `[left][centre][right]`; neighbours use
    /// index `vocab` for "outside the sequence".
    pub context: Vec<usize>,
}

impl TaskRules {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.vocab;
        let mut rng = stream_rng(spec.seed, streams::TASK_RULES, 0);
        let mut permutation: Vec<usize> = (0..k).collect();
        permutation.shuffle(&mut rng);
        let side = k + 1;
        let mut context = vec![0; side * k * side];
        for l in 0..side {
            for c in 0..k {
                for r in 0..side {
                    context[(l * k + c) * side + r] = if rng.gen::<f64>() < spec.corruption_rate {
                        rng.gen_range(0..k)
                    } else {
                        permutation[c]
                    };
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            permutation,
            context,
        })
    }

    pub fn context_rule(&self, left: usize, centre: usize, right: usize) -> usize {
        let k = self.spec.vocab;
        self.context[(left * k + centre) * (k + 1) + right]
    }

    /// Best accuracy any predictor that sees only `c[i]` can reach on
    /// LocalContext, by enumerating every context triple. Positions are
    /// weighted as in a pooled corpus with uniform lengths.
    pub fn position_wise_ceiling(&self) -> f64 {
        let k = self.spec.vocab;
        let edge = k;
        // weights of (left is edge, right is edge) position patterns
        let mut pattern = [[0.0f64; 2]; 2];
        for len in self.spec.min_len..=self.spec.max_len {
            if len == 1 {
                pattern[1][1] += 1.0;
            } else {
                pattern[1][0] += 1.0;
                pattern[0][1] += 1.0;
                pattern[0][0] += (len - 2) as f64;
            }
        }
        let total: f64 = pattern.iter().flatten().sum();
        let mut ceiling = 0.0;
        for c in 0..k {
            let mut p_y = vec![0.0; k];
            for (le, row) in pattern.iter().enumerate() {
                for (re, &w) in row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let lefts: Vec<usize> = if le == 1 { vec![edge] } else { (0..k).collect() };
                    let rights: Vec<usize> = if re == 1 { vec![edge] } else { (0..k).collect() };
                    let share = w / total / (lefts.len() * rights.len()) as f64;
                    for &l in &lefts {
                        for &r in &rights {
                            p_y[self.context_rule(l, c, r)] += share;
                        }
                    }
                }
            }
            ceiling += p_y.iter().cloned().fold(0.0, f64::max) / k as f64;
        }
        ceiling
    }
}

/// `count` examples of the task; example `i` depends only on `(spec, i)`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, count: usize) -> Result<Vec<PairedExample>> {
    generate_range(spec, 0, count)
}

pub(crate) fn generate_range(spec: &SyntheticTaskSpec, first: usize, count: usize) -> Result<Vec<PairedExample>> {
    let rules = TaskRules::new(spec)?;
    (first..first + count).map(|i| generate_one(&rules, i)).collect()
}

fn generate_one(rules: &TaskRules, index: usize) -> Result<PairedExample> {
    let spec = &rules.spec;
    let k = spec.vocab;
    let mut rng = stream_rng(spec.seed, streams::EXAMPLES, index as u64);
    let n = rng.gen_range(spec.min_len..=spec.max_len);
    let mut feats = Array2::zeros((n, spec.feature_dim()));
    let mut y = Vec::with_capacity(n);
    let corrupt = |tok: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        if rng.gen::<f64>() < spec.corruption_rate {
            let other = rng.gen_range(0..k - 1);
            if other >= tok {
                other + 1
            } else {
                other
            }
        } else {
            tok
        }
    };
    match spec.kind {
        TaskKind::NoisyChannel => {
            for i in 0..n {
                let tok = rng.gen_range(0..k);
                y.push(tok);
                let obs = corrupt(tok, &mut rng);
                feats[[i, obs]] = 1.0;
            }
        }
        TaskKind::Cipher => {
            for i in 0..n {
                let code = rng.gen_range(0..k);
                y.push(rules.permutation[code]);
                let obs = corrupt(code, &mut rng);
                feats[[i, obs]] = 1.0;
            }
        }
        TaskKind::LocalContext => {
            let codes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            for i in 0..n {
                let left = if i == 0 { k } else { codes[i - 1] };
                let right = if i + 1 == n { k } else { codes[i + 1] };
                y.push(rules.context_rule(left, codes[i], right));
                feats[[i, codes[i]]] = 1.0;
            }
        }
    }
    for i in 0..n {
        feats[[i, k + rng.gen_range(0..k)]] = 1.0;
    }
    PairedExample::new(
        format!("{}-{index:06}", spec.kind.tag()),
        feats,
        TokenSequence::new(y, k)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, rho: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind,
            vocab: 8,
            corruption_rate: rho,
            min_len: 5,
            max_len: 12,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let s = spec(TaskKind::LocalContext, 0.5);
        assert_eq!(generate_synthetic(&s, 20).unwrap(), generate_synthetic(&s, 20).unwrap());
        let other = SyntheticTaskSpec { seed: 43, ..s.clone() };
        assert_ne!(
            generate_synthetic(&s, 20).unwrap(),
            generate_synthetic(&other, 20).unwrap()
        );
        // prefix stability
        assert_eq!(
            generate_synthetic(&s, 5).unwrap()[..],
            generate_synthetic(&s, 20).unwrap()[..5]
        );
    }

    #[test]
    fn clean_channel_features_encode_target() {
        for ex in generate_synthetic(&spec(TaskKind::NoisyChannel, 0.0), 10).unwrap() {
            for i in 0..ex.len() {
                assert_eq!(ex.s_features[[i, ex.y.get(i)]], 1.0);
                assert_eq!(ex.s_features.row(i).iter().sum::<f64>(), 2.0);
            }
        }
    }

    #[test]
    fn full_corruption_never_shows_target() {
        for ex in generate_synthetic(&spec(TaskKind::NoisyChannel, 1.0), 10).unwrap() {
            for i in 0..ex.len() {
                assert_eq!(ex.s_features[[i, ex.y.get(i)]], 0.0);
            }
        }
    }

    #[test]
    fn cipher_applies_permutation() {
        let s = spec(TaskKind::Cipher, 0.0);
        let rules = TaskRules::new(&s).unwrap();
        for ex in generate_synthetic(&s, 10).unwrap() {
            for i in 0..ex.len() {
                let code = (0..8).find(|&c| ex.s_features[[i, c]] == 1.0).unwrap();
                assert_eq!(ex.y.get(i), rules.permutation[code]);
            }
        }
    }

    #[test]
    fn context_rule_matches_examples() {
        let s = spec(TaskKind::LocalContext, 0.5);
        let rules = TaskRules::new(&s).unwrap();
        for ex in generate_synthetic(&s, 10).unwrap() {
            let codes: Vec<usize> = (0..ex.len())
                .map(|i| (0..8).find(|&c| ex.s_features[[i, c]] == 1.0).unwrap())
                .collect();
            for i in 0..ex.len() {
                let l = if i == 0 { 8 } else { codes[i - 1] };
                let r = if i + 1 == ex.len() { 8 } else { codes[i + 1] };
                assert_eq!(ex.y.get(i), rules.context_rule(l, codes[i], r));
            }
        }
    }

    #[test]
    fn ceiling_bounds() {
        let pure = TaskRules::new(&spec(TaskKind::LocalContext, 0.0)).unwrap();
        assert!((pure.position_wise_ceiling() - 1.0).abs() < 1e-12);
        let mixed = TaskRules::new(&spec(TaskKind::LocalContext, 0.5)).unwrap();
        let c = mixed.position_wise_ceiling();
        assert!(c > 0.5 && c < 0.75, "{c}");
    }

    #[test]
    fn ceiling_matches_exhaustive_counting() {
        // Independent check: walk every code sequence of length 3 and count
        // per-centre target frequencies directly.
        let s = SyntheticTaskSpec {
            min_len: 3,
            max_len: 3,
            vocab: 4,
            ..spec(TaskKind::LocalContext, 0.6)
        };
        let rules = TaskRules::new(&s).unwrap();
        let k = 4;
        let mut counts = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let codes = [a, b, c];
                    for i in 0..3 {
                        let l = if i == 0 { k } else { codes[i - 1] };
                        let r = if i == 2 { k } else { codes[i + 1] };
                        counts[codes[i]][rules.context_rule(l, codes[i], r)] += 1.0;
                    }
                }
            }
        }
        let total = 3.0 * (k * k * k) as f64;
        let brute: f64 = counts
            .iter()
            .map(|row| row.iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / total;
        assert!((brute - rules.position_wise_ceiling()).abs() < 1e-12);
    }
}
