//! Synthetic bilingual commonsense world with known ground truth.
//!
//! Concepts carry a hidden group label; two distinct concepts are related
//! iff they share a group. An item asks about one concept and offers one
//! related concept among unrelated distractors. Every choice of an item
//! carries the same filler words, so filler is the shared
//! non-commonsense part and only the concept word decides the answer.
//! The target language renames every word and reorders words within
//! choices.

use super::example::{write_jsonl, Example, ParallelPair};
use super::vocab::Vocab;
use super::DataError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SOURCE_LANG: &str = "en";
pub const TARGET_LANG: &str = "de";

/// Words of filler attached to every choice of an item.
const CHOICE_FILLERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWorldConfig {
    pub n_concepts: usize,
    pub n_filler_tokens: usize,
    /// Fraction of ordered concept pairs that are related, in (0, 1).
    pub relation_density: f64,
    pub choices_per_item: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_parallel: usize,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            n_concepts: 120,
            n_filler_tokens: 40,
            relation_density: 0.1,
            choices_per_item: 5,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            n_parallel: 2000,
            seed: 17,
        }
    }
}

impl SynthWorldConfig {
    /// Number of hidden groups implied by the density.
    pub fn n_groups(&self) -> usize {
        ((1.0 / self.relation_density).round() as usize).clamp(2, self.n_concepts / 2)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        for (name, v) in [
            ("n_concepts", self.n_concepts),
            ("n_filler_tokens", self.n_filler_tokens),
            ("choices_per_item", self.choices_per_item),
            ("n_train", self.n_train),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
            ("n_parallel", self.n_parallel),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.relation_density > 0.0 && self.relation_density < 1.0) {
            return bad(format!(
                "relation_density must lie in (0, 1), got {}",
                self.relation_density
            ));
        }
        if self.choices_per_item < 2 {
            return bad("choices_per_item must be at least 2".into());
        }
        if self.n_concepts < 4 {
            return bad("n_concepts must be at least 4".into());
        }
        if self.n_filler_tokens < CHOICE_FILLERS + 1 {
            return bad(format!("n_filler_tokens must be at least {}", CHOICE_FILLERS + 1));
        }
        let g = self.n_groups();
        let largest = self.n_concepts.div_ceil(g);
        if self.n_concepts - largest < self.choices_per_item - 1 {
            return bad(format!(
                "{} concepts in {g} groups leave too few distractors for {} choices",
                self.n_concepts, self.choices_per_item
            ));
        }
        Ok(())
    }
}

/// The hidden structure behind a generated corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    /// Group label of each concept.
    pub groups: Vec<usize>,
    pub n_fillers: usize,
}

impl World {
    pub fn n_concepts(&self) -> usize {
        self.groups.len()
    }

    pub fn related(&self, a: usize, b: usize) -> bool {
        a != b && self.groups[a] == self.groups[b]
    }

    pub fn concept_word(lang: &str, c: usize) -> String {
        format!("{lang}_c{c}")
    }

    pub fn filler_word(lang: &str, f: usize) -> String {
        format!("{lang}_f{f}")
    }

    /// Concept index named by `token`, if it is a concept word of either language.
    pub fn concept_of(token: &str) -> Option<usize> {
        [SOURCE_LANG, TARGET_LANG]
            .iter()
            .find_map(|l| token.strip_prefix(l)?.strip_prefix("_c")?.parse().ok())
    }

    pub fn is_filler(token: &str) -> bool {
        [SOURCE_LANG, TARGET_LANG].iter().any(|l| {
            token
                .strip_prefix(l)
                .and_then(|r| r.strip_prefix("_f"))
                .is_some_and(|n| n.parse::<usize>().is_ok())
        })
    }

    /// Every word either language can produce, in a fixed order.
    pub fn vocab(&self) -> Vocab {
        let mut words = Vec::new();
        for lang in [SOURCE_LANG, TARGET_LANG] {
            words.extend((0..self.n_concepts()).map(|c| Self::concept_word(lang, c)));
            words.extend((0..self.n_fillers).map(|f| Self::filler_word(lang, f)));
        }
        Vocab::from_tokens(words).expect("generated words are unique")
    }

    /// Solves an item from the relation alone: the index of the unique
    /// choice whose concept is related to the question's concept.
    pub fn oracle_answer(&self, ex: &Example) -> Option<usize> {
        let q = ex.question.split_whitespace().find_map(Self::concept_of)?;
        let hits: Vec<usize> = ex
            .choices
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.split_whitespace()
                    .find_map(Self::concept_of)
                    .is_some_and(|cc| self.related(q, cc))
            })
            .map(|(j, _)| j)
            .collect();
        (hits.len() == 1).then(|| hits[0])
    }
}

/// One split in both languages; `source[i]` and `target[i]` are the same item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BilingualSplit {
    pub source: Vec<Example>,
    pub target: Vec<Example>,
}

impl BilingualSplit {
    pub fn pairs(&self) -> Vec<ParallelPair> {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| ParallelPair::new(s.clone(), t.clone()).expect("generated pairs align"))
            .collect()
    }

    /// Both languages in one pool, interleaved item by item.
    pub fn mixed(&self) -> Vec<Example> {
        self.source
            .iter()
            .zip(&self.target)
            .flat_map(|(s, t)| [s.clone(), t.clone()])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub world: World,
    pub train: BilingualSplit,
    pub dev: BilingualSplit,
    pub test: BilingualSplit,
    /// Extra parallel items for the differentiation stage.
    pub parallel: BilingualSplit,
}

impl SyntheticCorpus {
    pub fn vocab(&self) -> Vocab {
        self.world.vocab()
    }

    pub fn splits(&self) -> [(&'static str, &BilingualSplit); 4] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
            ("parallel", &self.parallel),
        ]
    }

    /// Writes `<split>.<lang>.jsonl` for every split, `vocab.txt` and `world.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        for (name, split) in self.splits() {
            write_jsonl(&dir.join(format!("{name}.{SOURCE_LANG}.jsonl")), &split.source)?;
            write_jsonl(&dir.join(format!("{name}.{TARGET_LANG}.jsonl")), &split.target)?;
        }
        self.vocab().save(&dir.join("vocab.txt"))?;
        let world = serde_json::to_string_pretty(&self.world).expect("world serializes");
        let path = dir.join("world.json");
        std::fs::write(&path, world).map_err(|e| DataError::io(&path, e))
    }
}

pub fn generate_synthetic_world(config: &SynthWorldConfig) -> Result<SyntheticCorpus, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.n_concepts;
    let n_groups = config.n_groups();

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut groups = vec![0; k];
    for (i, &c) in order.iter().enumerate() {
        groups[c] = i % n_groups;
    }
    let world = World {
        groups,
        n_fillers: config.n_filler_tokens,
    };

    // Question concepts are split disjointly, in proportion to split sizes,
    // with at least one concept per pool.
    let mut pool: Vec<usize> = (0..k).collect();
    pool.shuffle(&mut rng);
    let sizes = [config.n_train + config.n_parallel, config.n_dev, config.n_test];
    let total: usize = sizes.iter().sum();
    let n_dev = ((k * sizes[1]) / total).max(1);
    let n_test = ((k * sizes[2]) / total).max(1);
    let n_train = k - n_dev - n_test;
    let train_pool = pool[..n_train].to_vec();
    let dev_pool = pool[n_train..n_train + n_dev].to_vec();
    let test_pool = pool[n_train + n_dev..].to_vec();

    let mut gen = |name: &str, pool: &[usize], n: usize| {
        let mut split = BilingualSplit {
            source: Vec::with_capacity(n),
            target: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (s, t) = make_item(&world, config, &mut rng, format!("{name}-{i:05}"), pool);
            split.source.push(s);
            split.target.push(t);
        }
        split
    };
    let train = gen("train", &train_pool, config.n_train);
    let dev = gen("dev", &dev_pool, config.n_dev);
    let test = gen("test", &test_pool, config.n_test);
    let parallel = gen("parallel", &train_pool, config.n_parallel);

    Ok(SyntheticCorpus {
        world,
        train,
        dev,
        test,
        parallel,
    })
}

fn make_item(
    world: &World,
    config: &SynthWorldConfig,
    rng: &mut ChaCha8Rng,
    id: String,
    pool: &[usize],
) -> (Example, Example) {
    let n_choices = config.choices_per_item;
    let q = pool[rng.gen_range(0..pool.len())];
    let partners: Vec<usize> = (0..world.n_concepts()).filter(|&c| world.related(q, c)).collect();
    let others: Vec<usize> = (0..world.n_concepts())
        .filter(|&c| c != q && !world.related(q, c))
        .collect();
    let gold_concept = partners[rng.gen_range(0..partners.len())];
    let distractors: Vec<usize> = others
        .choose_multiple(rng, n_choices - 1)
        .copied()
        .collect();
    let gold = rng.gen_range(0..n_choices);
    let mut concepts = distractors;
    concepts.insert(gold, gold_concept);

    // Question: concept plus one or two fillers; choices: concept plus the
    // same fillers for every choice.
    let mut fillers: Vec<usize> = (0..world.n_fillers).collect();
    fillers.shuffle(rng);
    let n_q_fill = rng.gen_range(1..=2);
    let q_fill = &fillers[..n_q_fill];
    let c_fill = &fillers[n_q_fill..n_q_fill + CHOICE_FILLERS];

    // Slot 0 is the concept, the rest are fillers.
    let mut q_order: Vec<usize> = (0..=n_q_fill).collect();
    q_order.shuffle(rng);
    let mut src_order: Vec<usize> = (0..=CHOICE_FILLERS).collect();
    src_order.shuffle(rng);
    let mut tgt_order = src_order.clone();
    tgt_order.shuffle(rng);

    let render = |lang: &str, concept: usize, fill: &[usize], order: &[usize]| -> String {
        order
            .iter()
            .map(|&slot| {
                if slot == 0 {
                    World::concept_word(lang, concept)
                } else {
                    World::filler_word(lang, fill[slot - 1])
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let build = |lang: &str, choice_order: &[usize]| Example {
        id: id.clone(),
        lang: lang.to_string(),
        question: render(lang, q, q_fill, &q_order),
        choices: concepts
            .iter()
            .map(|&c| render(lang, c, c_fill, choice_order))
            .collect(),
        gold,
    };
    (build(SOURCE_LANG, &src_order), build(TARGET_LANG, &tgt_order))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthWorldConfig {
        SynthWorldConfig {
            n_concepts: 30,
            n_filler_tokens: 10,
            relation_density: 0.2,
            choices_per_item: 4,
            n_train: 60,
            n_dev: 20,
            n_test: 20,
            n_parallel: 30,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.relation_density = 1.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.n_dev = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.choices_per_item = 30;
        assert!(c.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn every_concept_has_a_partner() {
        let corpus = generate_synthetic_world(&small()).unwrap();
        let w = &corpus.world;
        for c in 0..w.n_concepts() {
            assert!((0..w.n_concepts()).any(|d| w.related(c, d)), "concept {c}");
        }
    }

    #[test]
    fn question_concepts_are_disjoint_across_splits() {
        let corpus = generate_synthetic_world(&small()).unwrap();
        let concepts = |s: &BilingualSplit| -> std::collections::BTreeSet<usize> {
            s.source
                .iter()
                .map(|e| e.question.split_whitespace().find_map(World::concept_of).unwrap())
                .collect()
        };
        let (tr, dv, te) = (concepts(&corpus.train), concepts(&corpus.dev), concepts(&corpus.test));
        assert!(tr.is_disjoint(&dv));
        assert!(tr.is_disjoint(&te));
        assert!(dv.is_disjoint(&te));
        assert!(concepts(&corpus.parallel).is_disjoint(&dv));
    }

    #[test]
    fn target_language_renames_and_reorders() {
        let corpus = generate_synthetic_world(&small()).unwrap();
        let mut reordered = 0;
        for (s, t) in corpus.train.source.iter().zip(&corpus.train.target) {
            assert_eq!(s.id, t.id);
            assert_eq!(s.gold, t.gold);
            assert!(t.choices.iter().all(|c| c.split_whitespace().all(|w| w.starts_with("de_"))));
            let strip = |x: &str| x.split_whitespace().map(|w| w[3..].to_string()).collect::<Vec<_>>();
            let (a, b) = (strip(&s.choices[0]), strip(&t.choices[0]));
            let (mut sa, mut sb) = (a.clone(), b.clone());
            sa.sort();
            sb.sort();
            assert_eq!(sa, sb);
            reordered += usize::from(a != b);
        }
        assert!(reordered > 0);
    }
}
