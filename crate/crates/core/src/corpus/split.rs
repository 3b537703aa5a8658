use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    /// Split each (ambiguous, abnormal) stratum separately.
    #[serde(default)]
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Self {
        SplitSpec { train_frac, val_frac, test_frac, seed, stratified: false }
    }

    /// The 70/10/20 split used for the annotated rewriting datasets.
    pub fn standard(seed: u64) -> Self {
        Self::new(0.7, 0.1, 0.2, seed)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (name, f) in [("train", self.train_frac), ("val", self.val_frac), ("test", self.test_frac)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(CorpusError::InvalidSplit(format!("{name} fraction {f} outside (0,1)")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// (train, val, test) sizes for `n` items: val and test are floored, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = floor(self.val_frac);
        let test = floor(self.test_frac);
        (n - val - test, val, test)
    }
}

/// Deterministic disjoint partition of `corpus` into (train, val, test).
///
/// Each part keeps the corpus order of its members.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut strata: BTreeMap<(Option<bool>, Option<bool>), Vec<usize>> = BTreeMap::new();
        for (i, s) in corpus.sentences().iter().enumerate() {
            strata.entry((s.ambiguous, s.abnormal)).or_default().push(i);
        }
        strata.into_values().collect()
    } else {
        vec![(0..corpus.len()).collect()]
    };

    let mut parts: [Vec<usize>; 3] = Default::default();
    for mut idx in groups {
        idx.shuffle(&mut rng);
        let (n_train, n_val, _) = spec.sizes(idx.len());
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    let build = |mut idx: Vec<usize>, name: &str| {
        idx.sort_unstable();
        let sentences = idx.into_iter().map(|i| corpus.sentences()[i].clone()).collect();
        Corpus::new(sentences, format!("{} [{name}]", corpus.provenance))
    };
    let [train, val, test] = parts;
    Ok((build(train, "train")?, build(val, "val")?, build(test, "test")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReportSentence;
    use std::collections::HashSet;

    fn corpus(n: usize) -> Corpus {
        let s = (0..n)
            .map(|i| ReportSentence::labeled(format!("s{i}"), format!("sentence {i}."), i % 2 == 0, i % 3 == 0, None))
            .collect();
        Corpus::new(s, "test").unwrap()
    }

    #[test]
    fn exact_fractions() {
        let (a, b, c) = split(&corpus(10), &SplitSpec::standard(42)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
    }

    #[test]
    fn remainder_goes_to_train() {
        // val = floor(9 * 0.1) = 0, test = floor(9 * 0.2) = 1, train = 9 - 0 - 1 = 8
        let n = 9usize;
        let val = (n as f64 * 0.1).floor() as usize;
        let test = (n as f64 * 0.2).floor() as usize;
        let expected = (n - val - test, val, test);
        assert_eq!(expected, (8, 0, 1));
        assert_eq!(SplitSpec::standard(1).sizes(n), expected);
    }

    #[test]
    fn deterministic_disjoint_exhaustive() {
        let c = corpus(57);
        let spec = SplitSpec::standard(7);
        let first = split(&c, &spec).unwrap();
        let second = split(&c, &spec).unwrap();
        assert_eq!(first, second);
        let ids: Vec<&str> = [&first.0, &first.1, &first.2]
            .iter()
            .flat_map(|p| p.sentences().iter().map(|s| s.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 57);
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 57);
        let other = split(&c, &SplitSpec::standard(8)).unwrap();
        assert_ne!(first.2, other.2);
    }

    #[test]
    fn stratified_keeps_label_mix() {
        let c = corpus(100);
        let mut spec = SplitSpec::standard(3);
        spec.stratified = true;
        let (train, _, test) = split(&c, &spec).unwrap();
        let amb = |p: &Corpus| p.sentences().iter().filter(|s| s.ambiguous == Some(true)).count();
        assert!(amb(&train) + amb(&test) <= 50);
        assert!((amb(&test) as f64 / test.len() as f64 - 0.5).abs() < 0.1);
    }

    #[test]
    fn invalid_fractions() {
        assert!(SplitSpec::new(0.7, 0.2, 0.2, 0).validate().is_err());
        assert!(SplitSpec::new(1.0, 0.0, 0.0, 0).validate().is_err());
        assert!(split(&corpus(0), &SplitSpec::standard(0)).is_err());
    }
}
