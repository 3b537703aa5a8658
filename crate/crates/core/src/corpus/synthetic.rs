//! Template-grammar generator for labeled ambiguous/unambiguous report sentences.
//!
//! Three ambiguity categories are instantiated over a closed vocabulary:
//!
//! * **jargon**: a term whose everyday meaning diverges from its radiology
//!   meaning (`the heart is unremarkable.`); the explicit counterpart names the
//!   decision (`the heart is normal.`).
//! * **contradiction**: a normal and an abnormal finding in one sentence
//!   (`normal cardiac contour with atherosclerotic changes throughout the aorta.`);
//!   the counterpart drops the normal qualifier. Always abnormal.
//! * **grammar**: a dropped sentence boundary that lets a negation read as if it
//!   covered the finding (`cardiomegaly with no acute disease.`); the counterpart
//!   restores the boundary (`cardiomegaly. no acute disease.`). Always abnormal.
//!
//! Ambiguous sentences and their counterparts differ in exactly one word
//! position, so a single-token edit can disambiguate any of them.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, ReportSentence, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathology {
    Atherosclerosis,
    Cardiomegaly,
    Edema,
    Effusion,
    Fracture,
    Hernia,
    Lymphadenopathy,
    Opacity,
    NoFinding,
}

impl Pathology {
    pub const ABNORMAL: [Pathology; 8] = [
        Pathology::Atherosclerosis,
        Pathology::Cardiomegaly,
        Pathology::Edema,
        Pathology::Effusion,
        Pathology::Fracture,
        Pathology::Hernia,
        Pathology::Lymphadenopathy,
        Pathology::Opacity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pathology::Atherosclerosis => "atherosclerosis",
            Pathology::Cardiomegaly => "cardiomegaly",
            Pathology::Edema => "edema",
            Pathology::Effusion => "effusion",
            Pathology::Fracture => "fracture",
            Pathology::Hernia => "hernia",
            Pathology::Lymphadenopathy => "lymphadenopathy",
            Pathology::Opacity => "opacity",
            Pathology::NoFinding => "no_finding",
        }
    }

    /// Finding noun phrases (each contains exactly one keyword) and optional locations.
    fn findings(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Pathology::Atherosclerosis => (
                &["atherosclerotic changes", "atherosclerotic calcification"],
                &["throughout the aorta", "of the aortic arch", "throughout the thoracic aorta"],
            ),
            Pathology::Cardiomegaly => (&["cardiomegaly", "mild cardiomegaly", "moderate cardiomegaly"], &[""]),
            Pathology::Edema => (
                &["pulmonary edema", "interstitial edema", "mild pulmonary edema"],
                &["", "in both lungs"],
            ),
            Pathology::Effusion => (
                &["small pleural effusion", "left pleural effusion", "right pleural effusion", "bilateral pleural effusions"],
                &[""],
            ),
            Pathology::Fracture => (
                &["rib fracture", "old rib fracture", "displaced rib fracture"],
                &["on the left", "on the right"],
            ),
            Pathology::Hernia => (&["hiatal hernia", "small hiatal hernia"], &[""]),
            Pathology::Lymphadenopathy => (&["hilar lymphadenopathy", "mediastinal lymphadenopathy"], &[""]),
            Pathology::Opacity => (
                &["patchy opacity", "airspace opacity", "streaky opacity"],
                &["in the right lung base", "in the left lung base", "in the lingula"],
            ),
            Pathology::NoFinding => (&[], &[]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Jargon,
    Contradiction,
    Grammar,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Jargon, Category::Contradiction, Category::Grammar];

    pub fn name(self) -> &'static str {
        match self {
            Category::Jargon => "jargon",
            Category::Contradiction => "contradiction",
            Category::Grammar => "grammar",
        }
    }

    /// Category encoded in a synthetic sentence id (`syn-<category>-<index>`).
    pub fn from_id(id: &str) -> Option<Category> {
        let name = id.strip_prefix("syn-")?.split('-').next()?;
        Category::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Jargon terms with a label-divergent everyday meaning.
pub const JARGON_TERMS: [&str; 4] = ["unremarkable", "patent", "prominent", "nonspecific"];

const NORMAL_SUBJECTS: [(&str, &str); 8] = [
    ("heart", "is"),
    ("mediastinum", "is"),
    ("aorta", "is"),
    ("trachea", "is"),
    ("lungs", "are"),
    ("osseous structures", "are"),
    ("neural foramina", "are"),
    ("airways", "are"),
];
const PATENT_SUBJECTS: [&str; 3] = ["trachea", "neural foramina", "airways"];
const NORMAL_NPS: [&str; 4] = ["bony structure", "cardiac silhouette", "mediastinal contour", "osseous structures"];
const ABNORMAL_SUBJECTS: [(&str, &str, Pathology); 4] = [
    ("heart", "is", Pathology::Cardiomegaly),
    ("cardiac silhouette", "is", Pathology::Cardiomegaly),
    ("hila", "are", Pathology::Lymphadenopathy),
    ("hilar lymph nodes", "are", Pathology::Lymphadenopathy),
];
const CONTRADICTION_NPS: [&str; 6] = [
    "cardiac contour",
    "heart size",
    "mediastinal contour",
    "lung volumes",
    "cardiomediastinal silhouette",
    "pulmonary vascularity",
];
const GRAMMAR_TAILS: [&str; 3] = ["abnormality identified", "disease", "cardiopulmonary process"];

/// Words that state an abnormal decision about an organ.
const ABNORMAL_WORDS: [&str; 4] = ["prominent", "enlarged", "abnormal", "nonspecific"];
const ORGAN_TRIGGERS: [(&str, Pathology); 5] = [
    ("heart", Pathology::Cardiomegaly),
    ("silhouette", Pathology::Cardiomegaly),
    ("hila", Pathology::Lymphadenopathy),
    ("hilar", Pathology::Lymphadenopathy),
    ("nodes", Pathology::Lymphadenopathy),
];
const KEYWORDS: [(&str, Pathology); 10] = [
    ("atherosclerotic", Pathology::Atherosclerosis),
    ("cardiomegaly", Pathology::Cardiomegaly),
    ("edema", Pathology::Edema),
    ("effusion", Pathology::Effusion),
    ("effusions", Pathology::Effusion),
    ("fracture", Pathology::Fracture),
    ("hernia", Pathology::Hernia),
    ("lymphadenopathy", Pathology::Lymphadenopathy),
    ("opacity", Pathology::Opacity),
    ("opacities", Pathology::Opacity),
];

/// Pathology label of a sentence in the synthetic vocabulary.
///
/// Finding keywords name their pathology; an abnormal decision word together
/// with an organ names the organ's pathology. Multiple pathologies are joined
/// with `+` in label order, none yields `no_finding`.
pub fn rule_pathology(text: &str) -> String {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut found = BTreeSet::new();
    for w in &words {
        if let Some((_, p)) = KEYWORDS.iter().find(|(k, _)| k == w) {
            found.insert(*p);
        }
    }
    if words.iter().any(|w| ABNORMAL_WORDS.contains(&w.as_str())) {
        for w in &words {
            if let Some((_, p)) = ORGAN_TRIGGERS.iter().find(|(k, _)| k == w) {
                found.insert(*p);
            }
        }
    }
    if found.is_empty() {
        return Pathology::NoFinding.label().to_owned();
    }
    found.iter().map(|p| p.label()).collect::<Vec<_>>().join("+")
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    /// Weights for jargon, contradiction and grammar.
    pub mix: [f64; 3],
    /// Fraction of each category emitted in its ambiguous form.
    pub ambiguous_frac: f64,
    /// Share of jargon sentences whose decision is normal.
    pub jargon_normal_frac: f64,
    /// Abnormal pathologies the templates may use.
    pub pathologies: Vec<Pathology>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::new(2000, 0)
    }
}

impl SyntheticSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            seed,
            mix: [1.0, 1.0, 1.0],
            ambiguous_frac: 0.5,
            jargon_normal_frac: 0.6,
            pathologies: Pathology::ABNORMAL.to_vec(),
        }
    }

    pub fn with_mix(mut self, mix: [f64; 3]) -> Self {
        self.mix = mix;
        self
    }

    pub fn with_pathologies(mut self, pathologies: &[Pathology]) -> Self {
        self.pathologies = pathologies.to_vec();
        self
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_owned()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.mix.iter().sum::<f64>() <= 0.0 {
            return bad("mix weights must be nonnegative and not all zero");
        }
        if !(0.0..=1.0).contains(&self.ambiguous_frac) || !(0.0..=1.0).contains(&self.jargon_normal_frac) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.pathologies.contains(&Pathology::NoFinding) {
            return bad("`no_finding` is implied and must not be listed");
        }
        if self.pathologies.is_empty() && (self.mix[1] > 0.0 || self.mix[2] > 0.0) {
            return bad("contradiction and grammar templates need at least one pathology");
        }
        Ok(())
    }

    /// Per-category counts by largest remainder, ties to the earlier category.
    pub fn category_counts(&self) -> [usize; 3] {
        let total: f64 = self.mix.iter().sum();
        let exact: Vec<f64> = self.mix.iter().map(|w| self.n as f64 * w / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest = self.n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            if self.mix[i] > 0.0 {
                counts[i] += 1;
                rest -= 1;
            }
        }
        [counts[0], counts[1], counts[2]]
    }
}

struct Instance {
    text: String,
    abnormal: bool,
    pathology: Pathology,
}

/// Generates `spec.n` labeled sentences.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = spec.category_counts();

    let mut slots = Vec::with_capacity(spec.n);
    for (cat, &count) in Category::ALL.iter().zip(counts.iter()) {
        for k in 0..count {
            // Spread ambiguous slots evenly, starting with an ambiguous one.
            let f = spec.ambiguous_frac;
            let ambiguous = ((k + 1) as f64 * f - 1e-9).ceil() > (k as f64 * f - 1e-9).ceil();
            slots.push((*cat, ambiguous));
        }
    }
    slots.shuffle(&mut rng);

    let abnormal_subjects: Vec<_> =
        ABNORMAL_SUBJECTS.iter().filter(|(_, _, p)| spec.pathologies.contains(p)).collect();
    let sentences = slots
        .into_iter()
        .enumerate()
        .map(|(i, (cat, ambiguous))| {
            let inst = match cat {
                Category::Jargon => jargon(&mut rng, spec, &abnormal_subjects, ambiguous),
                Category::Contradiction => contradiction(&mut rng, spec, ambiguous),
                Category::Grammar => grammar(&mut rng, spec, ambiguous),
            };
            ReportSentence {
                id: format!("syn-{}-{i:05}", cat.name()),
                text: inst.text,
                relevant: true,
                ambiguous: Some(ambiguous),
                abnormal: Some(inst.abnormal),
                pathology: Some(inst.pathology.label().to_owned()),
                source: Source::Synthetic,
            }
        })
        .collect();
    Corpus::new(sentences, format!("synthetic(n={}, seed={})", spec.n, spec.seed))
}

fn finding_phrase(rng: &mut ChaCha8Rng, pathology: Pathology) -> String {
    let (nps, locs) = pathology.findings();
    let np = nps.choose(rng).expect("finding phrases");
    match *locs.choose(rng).expect("locations") {
        "" => (*np).to_owned(),
        loc => format!("{np} {loc}"),
    }
}

fn jargon(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    abnormal_subjects: &[&(&str, &str, Pathology)],
    ambiguous: bool,
) -> Instance {
    let normal = abnormal_subjects.is_empty() || rng.random_bool(spec.jargon_normal_frac);
    if normal {
        let text = if rng.random_bool(0.6) {
            let (subject, verb) = *NORMAL_SUBJECTS.choose(rng).unwrap();
            let term = if PATENT_SUBJECTS.contains(&subject) && rng.random_bool(0.5) { "patent" } else { "unremarkable" };
            format!("the {subject} {verb} {}.", if ambiguous { term } else { "normal" })
        } else {
            let np = NORMAL_NPS.choose(rng).unwrap();
            format!("{} {np}.", if ambiguous { "unremarkable" } else { "normal" })
        };
        return Instance { text, abnormal: false, pathology: Pathology::NoFinding };
    }
    let roll = rng.random_range(0..3);
    if roll == 2 {
        let pathology = *spec.pathologies.choose(rng).unwrap();
        let finding = finding_phrase(rng, pathology);
        let text = format!("{} {finding}.", if ambiguous { "nonspecific" } else { "abnormal" });
        return Instance { text, abnormal: true, pathology };
    }
    let (subject, verb, pathology) = **abnormal_subjects.choose(rng).unwrap();
    let word = if ambiguous { "prominent" } else { "enlarged" };
    let text = if roll == 0 { format!("the {subject} {verb} {word}.") } else { format!("{word} {subject}.") };
    Instance { text, abnormal: true, pathology }
}

fn contradiction(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, ambiguous: bool) -> Instance {
    let pathology = *spec.pathologies.choose(rng).unwrap();
    let np = CONTRADICTION_NPS.choose(rng).unwrap();
    let finding = finding_phrase(rng, pathology);
    Instance { text: contradiction_text(np, &finding, ambiguous), abnormal: true, pathology }
}

/// `normal <np> with <finding>.` or its counterpart without the normal qualifier.
pub fn contradiction_text(normal_np: &str, finding: &str, ambiguous: bool) -> String {
    format!("{} {normal_np} with {finding}.", if ambiguous { "normal" } else { "the" })
}

fn grammar(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, ambiguous: bool) -> Instance {
    let pathology = *spec.pathologies.choose(rng).unwrap();
    let finding = finding_phrase(rng, pathology);
    let tail = GRAMMAR_TAILS.choose(rng).unwrap();
    let text = if ambiguous {
        format!("{finding} with no acute {tail}.")
    } else {
        format!("{finding}. no acute {tail}.")
    };
    Instance { text, abnormal: true, pathology }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn single_jargon_record() {
        let c = generate_synthetic(&SyntheticSpec::new(1, 9).with_mix([1.0, 0.0, 0.0])).unwrap();
        let s = &c.sentences()[0];
        assert_eq!(s.ambiguous, Some(true));
        assert!(JARGON_TERMS.iter().any(|t| s.text.split(|c: char| !c.is_alphanumeric()).any(|w| w == *t)));
        let normal_term = s.text.contains("unremarkable") || s.text.contains("patent");
        assert_eq!(s.abnormal, Some(!normal_term));
    }

    #[test]
    fn contradiction_instance_from_table() {
        let text = contradiction_text("cardiac contour", "atherosclerotic changes throughout the aorta", true);
        assert_eq!(text, "normal cardiac contour with atherosclerotic changes throughout the aorta.");
        assert_eq!(rule_pathology(&text), "atherosclerosis");
        // Every generated contradiction sentence is abnormal and labeled consistently.
        let c = generate_synthetic(&SyntheticSpec::new(200, 4).with_mix([0.0, 1.0, 0.0])).unwrap();
        for s in c.sentences() {
            assert_eq!(s.abnormal, Some(true));
            assert_eq!(s.pathology.as_deref(), Some(rule_pathology(&s.text).as_str()));
        }
    }

    #[test]
    fn category_counts_and_label_balance() {
        let spec = SyntheticSpec::new(2000, 11);
        let c = generate_synthetic(&spec).unwrap();
        let mut per_cat: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
        for s in c.sentences() {
            let cat = Category::from_id(&s.id).unwrap();
            let e = per_cat.entry(cat).or_default();
            e.0 += 1;
            e.1 += usize::from(s.ambiguous == Some(true));
        }
        for (cat, (count, amb)) in &per_cat {
            assert!((*count as i64 - 667).abs() <= 2, "{cat:?}: {count}");
            assert!((*amb as i64 * 2 - *count as i64).abs() <= 1, "{cat:?}: {amb}/{count} ambiguous");
        }
        assert_eq!(per_cat.values().map(|v| v.0).sum::<usize>(), 2000);
    }

    #[test]
    fn labels_are_self_consistent() {
        let c = generate_synthetic(&SyntheticSpec::new(1500, 5)).unwrap();
        for s in c.sentences() {
            assert_eq!(s.pathology.as_deref(), Some(rule_pathology(&s.text).as_str()), "{}", s.text);
            let no_finding = s.pathology.as_deref() == Some("no_finding");
            assert_eq!(s.abnormal, Some(!no_finding), "{}", s.text);
        }
    }

    #[test]
    fn restricted_pathologies() {
        let spec = SyntheticSpec::new(300, 2).with_pathologies(&[Pathology::Cardiomegaly, Pathology::Effusion]);
        let c = generate_synthetic(&spec).unwrap();
        let labels: Vec<_> = c.label_set().iter().map(String::as_str).collect();
        assert_eq!(labels, ["cardiomegaly", "effusion", "no_finding"]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&SyntheticSpec::new(50, 1)).unwrap();
        let b = generate_synthetic(&SyntheticSpec::new(50, 1)).unwrap();
        let c = generate_synthetic(&SyntheticSpec::new(50, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.sentences(), c.sentences());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec::new(0, 1)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(5, 1).with_mix([0.0, 0.0, 0.0])).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(5, 1).with_mix([-1.0, 1.0, 0.0])).is_err());
    }
}
