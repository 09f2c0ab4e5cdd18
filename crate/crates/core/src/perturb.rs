//! The perturbation sample space of a dataset.
//!
//! A space is the product of independent dimensions (instruction
//! paraphrase, choice order, enumerator, separator, ordered few-shot
//! selection, question/answer markers and, for open-ended tasks, the
//! evaluated example subset). Each configuration corresponds to exactly one
//! index in `0..cardinality` under a fixed mixed-radix layout, which gives
//! exhaustive enumeration and uniform sampling for free: a uniform index
//! decodes to independent uniform coordinates.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{DatasetSpec, Example, Gold, TaskKind, ValidationError, DEFAULT_FEWSHOT_K};

pub const QUESTION_PLACEHOLDER: &str = "{question}";
pub const CHOICES_PLACEHOLDER: &str = "{choices}";
/// Largest space `enumerate` will list by default.
pub const DEFAULT_ENUMERATION_BOUND: u64 = 1_000_000;
/// `34!` is the largest factorial that fits a `u128` permutation index.
pub const MAX_PERMUTED_CHOICES: usize = 34;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpaceError {
    #[error("paraphrase {template} is missing placeholder {placeholder}")]
    PlaceholderMissing {
        template: usize,
        placeholder: &'static str,
    },
    #[error("paraphrase {template} repeats placeholder {placeholder}")]
    DuplicatePlaceholder {
        template: usize,
        placeholder: &'static str,
    },
    #[error("paraphrase {template} uses {placeholder}, which open-ended tasks do not render")]
    UnexpectedPlaceholder {
        template: usize,
        placeholder: &'static str,
    },
    #[error("dimension {0} has no values")]
    EmptyDimension(Dimension),
    #[error("few-shot k = {k} exceeds pool of {pool}")]
    KExceedsPool { k: usize, pool: usize },
    #[error("demonstration {0:?} does not match the dataset's task kind")]
    InvalidDemonstration(String),
    #[error("example subset of {size} exceeds dataset of {dataset}")]
    SubsetExceedsDataset { size: usize, dataset: usize },
    #[error("{0} choices is too many to permute (max {MAX_PERMUTED_CHOICES})")]
    TooManyChoices(usize),
    #[error("requested {count} configs from a space of {cardinality}")]
    CountExceedsCardinality { count: usize, cardinality: BigUint },
    #[error("space of {cardinality} exceeds enumeration bound {bound}")]
    EnumerationTooLarge { cardinality: BigUint, bound: u64 },
    #[error("config index out of range")]
    IndexOutOfRange,
    #[error("config is not valid for this inventory: {0}")]
    ConfigOutOfBounds(String),
    #[error("config id collision on {0}")]
    HashCollision(String),
    #[error("inventory file: {0}")]
    InventoryFile(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Paraphrase,
    ChoiceOrder,
    Enumerator,
    Separator,
    FewShot,
    QaMarkers,
    ExampleSelection,
}

impl Dimension {
    /// Mixed-radix layout order, most significant first.
    pub const ORDER: [Dimension; 7] = [
        Dimension::Paraphrase,
        Dimension::ChoiceOrder,
        Dimension::Enumerator,
        Dimension::Separator,
        Dimension::FewShot,
        Dimension::QaMarkers,
        Dimension::ExampleSelection,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Dimension::Paraphrase => "instruction paraphrasing",
            Dimension::ChoiceOrder => "answer choice order",
            Dimension::Enumerator => "answer choice enumerator",
            Dimension::Separator => "choice separators",
            Dimension::FewShot => "few-shot demonstrations (selection and order)",
            Dimension::QaMarkers => "question/answer markers",
            Dimension::ExampleSelection => "evaluated example selection",
        }
    }

    fn applies_to(self, kind: TaskKind) -> bool {
        match self {
            Dimension::ChoiceOrder | Dimension::Enumerator | Dimension::Separator => {
                kind == TaskKind::MultipleChoice
            }
            Dimension::ExampleSelection => kind == TaskKind::OpenEnded,
            _ => true,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnumeratorStyle {
    CapitalLetters,
    LowercaseLetters,
    Numbers,
    RomanNumerals,
}

impl EnumeratorStyle {
    pub const DEFAULTS: [EnumeratorStyle; 4] = [
        EnumeratorStyle::CapitalLetters,
        EnumeratorStyle::LowercaseLetters,
        EnumeratorStyle::Numbers,
        EnumeratorStyle::RomanNumerals,
    ];

    /// Label of the choice rendered at zero-based `position`.
    pub fn label(self, position: usize) -> String {
        match self {
            EnumeratorStyle::CapitalLetters => letters(position, b'A'),
            EnumeratorStyle::LowercaseLetters => letters(position, b'a'),
            EnumeratorStyle::Numbers => (position + 1).to_string(),
            EnumeratorStyle::RomanNumerals => roman(position + 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnumeratorStyle::CapitalLetters => "capital_letters",
            EnumeratorStyle::LowercaseLetters => "lowercase_letters",
            EnumeratorStyle::Numbers => "numbers",
            EnumeratorStyle::RomanNumerals => "roman_numerals",
        }
    }
}

impl FromStr for EnumeratorStyle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnumeratorStyle::DEFAULTS
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown enumerator style {s:?}"))
    }
}

// A, B, ..., Z, AA, AB, ...
fn letters(mut position: usize, base: u8) -> String {
    let mut out = Vec::new();
    loop {
        out.push(base + (position % 26) as u8);
        if position < 26 {
            break;
        }
        position = position / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

fn roman(mut value: usize) -> String {
    const TABLE: [(usize, &str); 13] = [
        (1000, "M"),
        (900, "CM"),
        (500, "D"),
        (400, "CD"),
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut out = String::new();
    for (v, s) in TABLE {
        while value >= v {
            out.push_str(s);
            value -= v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceOrderPolicy {
    IdentityOnly,
    #[default]
    AllPermutations,
}

/// A few-shot candidate and the answer text shown after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub example: Example,
    pub gold_text: String,
}

impl Demonstration {
    pub fn new(example: Example) -> Self {
        let gold_text = example.gold_text().to_string();
        Demonstration { example, gold_text }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct MarkerPair {
    pub question: String,
    pub answer: String,
}

impl MarkerPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        MarkerPair {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

impl From<(String, String)> for MarkerPair {
    fn from((question, answer): (String, String)) -> Self {
        MarkerPair { question, answer }
    }
}

impl From<MarkerPair> for (String, String) {
    fn from(m: MarkerPair) -> Self {
        (m.question, m.answer)
    }
}

pub fn default_separators() -> Vec<String> {
    ["\n", " ", "\t", ", ", "; ", " | "]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn default_markers() -> Vec<MarkerPair> {
    vec![
        MarkerPair::new("Question: ", "Answer: "),
        MarkerPair::new("", ""),
    ]
}

/// The values each perturbation dimension may take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionInventory {
    pub instruction_paraphrases: Vec<String>,
    pub enumerators: Vec<EnumeratorStyle>,
    pub separators: Vec<String>,
    pub choice_order_policy: ChoiceOrderPolicy,
    pub fewshot_pool: Vec<Demonstration>,
    pub fewshot_k: usize,
    pub qa_markers: Vec<MarkerPair>,
    /// Open-ended tasks only: evaluate a subset of this many examples per
    /// configuration. `None` evaluates the full dataset.
    pub example_subset_size: Option<usize>,
}

impl DimensionInventory {
    /// Default dimensions around the given paraphrases.
    pub fn with_paraphrases(paraphrases: Vec<String>) -> Self {
        DimensionInventory {
            instruction_paraphrases: paraphrases,
            enumerators: EnumeratorStyle::DEFAULTS.to_vec(),
            separators: default_separators(),
            choice_order_policy: ChoiceOrderPolicy::default(),
            fewshot_pool: Vec::new(),
            fewshot_k: DEFAULT_FEWSHOT_K,
            qa_markers: default_markers(),
            example_subset_size: None,
        }
    }

    /// Parses an inventory file. Relative pool paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, SpaceError> {
        let file: InventoryFile =
            toml::from_str(text).map_err(|e| SpaceError::InventoryFile(e.to_string()))?;
        let mut pool = Vec::new();
        if let Some(rel) = &file.fewshot_pool_file {
            let path = base_dir.join(rel);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| SpaceError::InventoryFile(format!("{}: {e}", path.display())))?;
            let examples: PoolFile = serde_json::from_str(&text)
                .map_err(|e| SpaceError::InventoryFile(format!("{}: {e}", path.display())))?;
            pool.extend(examples.into_examples().into_iter().map(Demonstration::new));
        }
        for entry in file.fewshot_pool {
            let gold_text = entry.gold_text.clone();
            let example = Example::new(entry.id, entry.question, entry.choices, entry.gold)?;
            let mut demo = Demonstration::new(example);
            if let Some(t) = gold_text {
                demo.gold_text = t;
            }
            pool.push(demo);
        }
        let enumerators = match file.enumerators {
            Some(names) => names
                .iter()
                .map(|n| n.parse())
                .collect::<Result<Vec<_>, _>>()
                .map_err(SpaceError::InventoryFile)?,
            None => EnumeratorStyle::DEFAULTS.to_vec(),
        };
        Ok(DimensionInventory {
            instruction_paraphrases: file.instruction_paraphrases,
            enumerators,
            separators: file.separators.unwrap_or_else(default_separators),
            choice_order_policy: file.choice_order.unwrap_or_default(),
            fewshot_pool: pool,
            fewshot_k: file.fewshot_k.unwrap_or(DEFAULT_FEWSHOT_K),
            qa_markers: file
                .qa_markers
                .map(|m| m.into_iter().map(MarkerPair::from).collect())
                .unwrap_or_else(default_markers),
            example_subset_size: file.example_subset_size,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SpaceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpaceError::InventoryFile(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InventoryFile {
    instruction_paraphrases: Vec<String>,
    enumerators: Option<Vec<String>>,
    separators: Option<Vec<String>>,
    choice_order: Option<ChoiceOrderPolicy>,
    fewshot_k: Option<usize>,
    qa_markers: Option<Vec<(String, String)>>,
    example_subset_size: Option<usize>,
    fewshot_pool_file: Option<String>,
    #[serde(default)]
    fewshot_pool: Vec<PoolEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolEntry {
    id: String,
    question: String,
    choices: Option<Vec<String>>,
    gold: Gold,
    gold_text: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PoolFile {
    Dataset(DatasetSpec),
    Examples(Vec<Example>),
}

impl PoolFile {
    fn into_examples(self) -> Vec<Example> {
        match self {
            PoolFile::Dataset(d) => d.examples().to_vec(),
            PoolFile::Examples(e) => e,
        }
    }
}

/// Choice order of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoicePermutation {
    Identity,
    /// Permutation index; each example derives its own permutation from it.
    Seeded(#[serde(with = "u128_decimal")] u128),
}

mod u128_decimal {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

mod biguint_decimal {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<BigUint>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&v.to_str_radix(10)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BigUint>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| {
                BigUint::parse_bytes(s.as_bytes(), 10)
                    .ok_or_else(|| D::Error::custom("bad integer"))
            })
            .transpose()
    }
}

/// One point of the perturbation space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "UncheckedConfig")]
pub struct PerturbationConfig {
    paraphrase_index: usize,
    enumerator_index: usize,
    separator_index: usize,
    choice_permutation: ChoicePermutation,
    fewshot_selection: Vec<usize>,
    qa_marker_index: usize,
    #[serde(
        with = "biguint_decimal",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    example_subset: Option<BigUint>,
    config_id: String,
}

#[derive(Deserialize)]
struct UncheckedConfig {
    paraphrase_index: usize,
    enumerator_index: usize,
    separator_index: usize,
    choice_permutation: ChoicePermutation,
    fewshot_selection: Vec<usize>,
    qa_marker_index: usize,
    #[serde(with = "biguint_decimal", default)]
    example_subset: Option<BigUint>,
    config_id: String,
}

impl TryFrom<UncheckedConfig> for PerturbationConfig {
    type Error = String;
    fn try_from(u: UncheckedConfig) -> Result<Self, Self::Error> {
        let config = PerturbationConfig::new(
            u.paraphrase_index,
            u.enumerator_index,
            u.separator_index,
            u.choice_permutation,
            u.fewshot_selection,
            u.qa_marker_index,
            u.example_subset,
        );
        if config.config_id != u.config_id {
            return Err(format!(
                "config_id {} does not match its fields ({})",
                u.config_id, config.config_id
            ));
        }
        Ok(config)
    }
}

impl PerturbationConfig {
    pub fn new(
        paraphrase_index: usize,
        enumerator_index: usize,
        separator_index: usize,
        choice_permutation: ChoicePermutation,
        fewshot_selection: Vec<usize>,
        qa_marker_index: usize,
        example_subset: Option<BigUint>,
    ) -> Self {
        let mut config = PerturbationConfig {
            paraphrase_index,
            enumerator_index,
            separator_index,
            choice_permutation,
            fewshot_selection,
            qa_marker_index,
            example_subset,
            config_id: String::new(),
        };
        config.config_id = hex::encode(&Sha256::digest(config.canonical_bytes())[..16]);
        config
    }

    /// Field-ordered, fixed-width encoding hashed into `config_id`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = b"reliable-eval/config/1\0".to_vec();
        let word = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        word(&mut out, self.paraphrase_index as u64);
        word(&mut out, self.enumerator_index as u64);
        word(&mut out, self.separator_index as u64);
        match self.choice_permutation {
            ChoicePermutation::Identity => out.push(0),
            ChoicePermutation::Seeded(i) => {
                out.push(1);
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        word(&mut out, self.fewshot_selection.len() as u64);
        for &i in &self.fewshot_selection {
            word(&mut out, i as u64);
        }
        word(&mut out, self.qa_marker_index as u64);
        match &self.example_subset {
            None => out.push(0),
            Some(rank) => {
                out.push(1);
                let bytes = rank.to_bytes_le();
                word(&mut out, bytes.len() as u64);
                out.extend_from_slice(&bytes);
            }
        }
        out
    }

    pub fn config_id(&self) -> &str {
        &self.config_id
    }

    pub fn paraphrase_index(&self) -> usize {
        self.paraphrase_index
    }

    pub fn enumerator_index(&self) -> usize {
        self.enumerator_index
    }

    pub fn separator_index(&self) -> usize {
        self.separator_index
    }

    pub fn choice_permutation(&self) -> ChoicePermutation {
        self.choice_permutation
    }

    pub fn fewshot_selection(&self) -> &[usize] {
        &self.fewshot_selection
    }

    pub fn qa_marker_index(&self) -> usize {
        self.qa_marker_index
    }

    pub fn example_subset(&self) -> Option<&BigUint> {
        self.example_subset.as_ref()
    }

    /// Canonical bytes of one coordinate, used to key per-dimension effects.
    pub fn coordinate_bytes(&self, dimension: Dimension) -> Vec<u8> {
        match dimension {
            Dimension::Paraphrase => (self.paraphrase_index as u64).to_le_bytes().to_vec(),
            Dimension::Enumerator => (self.enumerator_index as u64).to_le_bytes().to_vec(),
            Dimension::Separator => (self.separator_index as u64).to_le_bytes().to_vec(),
            Dimension::QaMarkers => (self.qa_marker_index as u64).to_le_bytes().to_vec(),
            Dimension::ChoiceOrder => match self.choice_permutation {
                ChoicePermutation::Identity => vec![0],
                ChoicePermutation::Seeded(i) => i.to_le_bytes().to_vec(),
            },
            Dimension::FewShot => self
                .fewshot_selection
                .iter()
                .flat_map(|&i| (i as u64).to_le_bytes())
                .collect(),
            Dimension::ExampleSelection => self
                .example_subset
                .as_ref()
                .map(|r| r.to_bytes_le())
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSpace {
    dataset_id: String,
    task_kind: TaskKind,
    inventory: DimensionInventory,
    dataset_len: usize,
    max_choices: usize,
    radices: Vec<(Dimension, BigUint)>,
    cardinality: BigUint,
}

fn factorial(n: usize) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, i| acc * i)
}

fn falling_factorial(n: usize, k: usize) -> BigUint {
    (0..k).fold(BigUint::one(), |acc, i| acc * (n - i))
}

pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

fn check_template(index: usize, template: &str, kind: TaskKind) -> Result<(), SpaceError> {
    let count = |p: &str| template.matches(p).count();
    match count(QUESTION_PLACEHOLDER) {
        0 => {
            return Err(SpaceError::PlaceholderMissing {
                template: index,
                placeholder: QUESTION_PLACEHOLDER,
            })
        }
        1 => {}
        _ => {
            return Err(SpaceError::DuplicatePlaceholder {
                template: index,
                placeholder: QUESTION_PLACEHOLDER,
            })
        }
    }
    let choices = count(CHOICES_PLACEHOLDER);
    match (kind, choices) {
        (TaskKind::MultipleChoice, 0) => Err(SpaceError::PlaceholderMissing {
            template: index,
            placeholder: CHOICES_PLACEHOLDER,
        }),
        (TaskKind::MultipleChoice, 1) => Ok(()),
        (TaskKind::MultipleChoice, _) => Err(SpaceError::DuplicatePlaceholder {
            template: index,
            placeholder: CHOICES_PLACEHOLDER,
        }),
        (TaskKind::OpenEnded, 0) => Ok(()),
        (TaskKind::OpenEnded, _) => Err(SpaceError::UnexpectedPlaceholder {
            template: index,
            placeholder: CHOICES_PLACEHOLDER,
        }),
    }
}

/// Validates the inventory against the dataset and computes the exact space size.
pub fn build_space(
    dataset: &DatasetSpec,
    inventory: &DimensionInventory,
) -> Result<PerturbationSpace, SpaceError> {
    let kind = dataset.task_kind();
    if inventory.instruction_paraphrases.is_empty() {
        return Err(SpaceError::EmptyDimension(Dimension::Paraphrase));
    }
    for (i, t) in inventory.instruction_paraphrases.iter().enumerate() {
        check_template(i, t, kind)?;
    }
    if inventory.qa_markers.is_empty() {
        return Err(SpaceError::EmptyDimension(Dimension::QaMarkers));
    }
    if inventory.fewshot_k > inventory.fewshot_pool.len() {
        return Err(SpaceError::KExceedsPool {
            k: inventory.fewshot_k,
            pool: inventory.fewshot_pool.len(),
        });
    }
    for demo in &inventory.fewshot_pool {
        if demo.example.task_kind() != kind {
            return Err(SpaceError::InvalidDemonstration(
                demo.example.id().to_string(),
            ));
        }
    }
    let max_choices = dataset
        .examples()
        .iter()
        .chain(inventory.fewshot_pool.iter().map(|d| &d.example))
        .filter_map(|e| e.choices().map(<[String]>::len))
        .max()
        .unwrap_or(0);
    if kind == TaskKind::MultipleChoice {
        if inventory.enumerators.is_empty() {
            return Err(SpaceError::EmptyDimension(Dimension::Enumerator));
        }
        if inventory.separators.is_empty() {
            return Err(SpaceError::EmptyDimension(Dimension::Separator));
        }
        if inventory.choice_order_policy == ChoiceOrderPolicy::AllPermutations
            && max_choices > MAX_PERMUTED_CHOICES
        {
            return Err(SpaceError::TooManyChoices(max_choices));
        }
    }
    let dataset_len = dataset.examples().len();
    let subset = match (kind, inventory.example_subset_size) {
        (TaskKind::OpenEnded, Some(0)) => {
            return Err(SpaceError::EmptyDimension(Dimension::ExampleSelection))
        }
        (TaskKind::OpenEnded, Some(size)) if size > dataset_len => {
            return Err(SpaceError::SubsetExceedsDataset {
                size,
                dataset: dataset_len,
            })
        }
        (TaskKind::OpenEnded, Some(size)) if size < dataset_len => Some(size),
        _ => None,
    };

    let radices: Vec<(Dimension, BigUint)> = Dimension::ORDER
        .iter()
        .filter(|d| d.applies_to(kind))
        .map(|&d| {
            let radix = match d {
                Dimension::Paraphrase => BigUint::from(inventory.instruction_paraphrases.len()),
                Dimension::ChoiceOrder => match inventory.choice_order_policy {
                    ChoiceOrderPolicy::IdentityOnly => BigUint::one(),
                    ChoiceOrderPolicy::AllPermutations => factorial(max_choices),
                },
                Dimension::Enumerator => BigUint::from(inventory.enumerators.len()),
                Dimension::Separator => BigUint::from(inventory.separators.len()),
                Dimension::FewShot => {
                    falling_factorial(inventory.fewshot_pool.len(), inventory.fewshot_k)
                }
                Dimension::QaMarkers => BigUint::from(inventory.qa_markers.len()),
                Dimension::ExampleSelection => match subset {
                    Some(size) => binomial(dataset_len, size),
                    None => BigUint::one(),
                },
            };
            (d, radix)
        })
        .collect();
    let cardinality = radices.iter().fold(BigUint::one(), |acc, (_, r)| acc * r);
    Ok(PerturbationSpace {
        dataset_id: dataset.id().to_string(),
        task_kind: kind,
        inventory: inventory.clone(),
        dataset_len,
        max_choices,
        radices,
        cardinality,
    })
}

impl PerturbationSpace {
    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn inventory(&self) -> &DimensionInventory {
        &self.inventory
    }

    pub fn cardinality(&self) -> &BigUint {
        &self.cardinality
    }

    /// Per-dimension value counts; their product is the cardinality.
    pub fn breakdown(&self) -> &[(Dimension, BigUint)] {
        &self.radices
    }

    fn radix(&self, dim: Dimension) -> BigUint {
        self.radices
            .iter()
            .find(|(d, _)| *d == dim)
            .map(|(_, r)| r.clone())
            .unwrap_or_else(BigUint::one)
    }

    /// Examples evaluated per configuration when a strict subset is sampled.
    pub fn subset_size(&self) -> Option<usize> {
        match self.task_kind {
            TaskKind::OpenEnded => self
                .inventory
                .example_subset_size
                .filter(|&s| s < self.dataset_len),
            TaskKind::MultipleChoice => None,
        }
    }

    /// Decodes the configuration at `index` in the mixed-radix layout.
    pub fn config_at(&self, index: &BigUint) -> Result<PerturbationConfig, SpaceError> {
        if index >= &self.cardinality {
            return Err(SpaceError::IndexOutOfRange);
        }
        let mut rest = index.clone();
        let mut digits: HashMap<Dimension, BigUint> = HashMap::new();
        for (dim, radix) in self.radices.iter().rev() {
            digits.insert(*dim, &rest % radix);
            rest /= radix;
        }
        let small = |d: Dimension| {
            digits
                .get(&d)
                .map_or(0, |v| v.to_usize().expect("radix fits usize"))
        };
        let choice_permutation = match (self.task_kind, self.inventory.choice_order_policy) {
            (TaskKind::MultipleChoice, ChoiceOrderPolicy::AllPermutations) => {
                ChoicePermutation::Seeded(
                    digits[&Dimension::ChoiceOrder]
                        .to_u128()
                        .expect("bounded by MAX_PERMUTED_CHOICES"),
                )
            }
            _ => ChoicePermutation::Identity,
        };
        let fewshot = digits.get(&Dimension::FewShot).cloned().unwrap_or_default();
        let fewshot_selection = unrank_selection(
            fewshot,
            self.inventory.fewshot_pool.len(),
            self.inventory.fewshot_k,
        );
        let example_subset = self
            .subset_size()
            .map(|_| digits[&Dimension::ExampleSelection].clone());
        Ok(PerturbationConfig::new(
            small(Dimension::Paraphrase),
            small(Dimension::Enumerator),
            small(Dimension::Separator),
            choice_permutation,
            fewshot_selection,
            small(Dimension::QaMarkers),
            example_subset,
        ))
    }

    /// Inverse of [`config_at`](Self::config_at).
    pub fn index_of(&self, config: &PerturbationConfig) -> Result<BigUint, SpaceError> {
        self.check_config(config)?;
        let mut index = BigUint::zero();
        for (dim, radix) in &self.radices {
            let digit = match dim {
                Dimension::Paraphrase => BigUint::from(config.paraphrase_index),
                Dimension::Enumerator => BigUint::from(config.enumerator_index),
                Dimension::Separator => BigUint::from(config.separator_index),
                Dimension::QaMarkers => BigUint::from(config.qa_marker_index),
                Dimension::ChoiceOrder => match config.choice_permutation {
                    ChoicePermutation::Identity => BigUint::zero(),
                    ChoicePermutation::Seeded(i) => BigUint::from(i),
                },
                Dimension::FewShot => {
                    rank_selection(&config.fewshot_selection, self.inventory.fewshot_pool.len())
                }
                Dimension::ExampleSelection => config.example_subset.clone().unwrap_or_default(),
            };
            index = index * radix + digit;
        }
        Ok(index)
    }

    /// Checks every coordinate against the inventory bounds.
    pub fn check_config(&self, config: &PerturbationConfig) -> Result<(), SpaceError> {
        let inv = &self.inventory;
        let bad = |m: String| Err(SpaceError::ConfigOutOfBounds(m));
        if config.paraphrase_index >= inv.instruction_paraphrases.len() {
            return bad(format!("paraphrase index {}", config.paraphrase_index));
        }
        if config.qa_marker_index >= inv.qa_markers.len() {
            return bad(format!("marker index {}", config.qa_marker_index));
        }
        let mcqa = self.task_kind == TaskKind::MultipleChoice;
        if mcqa && config.enumerator_index >= inv.enumerators.len()
            || !mcqa && config.enumerator_index != 0
        {
            return bad(format!("enumerator index {}", config.enumerator_index));
        }
        if mcqa && config.separator_index >= inv.separators.len()
            || !mcqa && config.separator_index != 0
        {
            return bad(format!("separator index {}", config.separator_index));
        }
        match (config.choice_permutation, mcqa, inv.choice_order_policy) {
            (ChoicePermutation::Identity, false, _)
            | (ChoicePermutation::Identity, true, ChoiceOrderPolicy::IdentityOnly) => {}
            (ChoicePermutation::Seeded(i), true, ChoiceOrderPolicy::AllPermutations)
                if BigUint::from(i) < self.radix(Dimension::ChoiceOrder) => {}
            (p, _, _) => return bad(format!("choice permutation {p:?}")),
        }
        let sel = &config.fewshot_selection;
        let distinct: HashSet<_> = sel.iter().collect();
        if sel.len() != inv.fewshot_k
            || distinct.len() != sel.len()
            || sel.iter().any(|&i| i >= inv.fewshot_pool.len())
        {
            return bad(format!("few-shot selection {sel:?}"));
        }
        match (&config.example_subset, self.subset_size()) {
            (None, None) => {}
            (Some(r), Some(_)) if r < &self.radix(Dimension::ExampleSelection) => {}
            _ => return bad("example subset".into()),
        }
        Ok(())
    }

    /// Dataset positions evaluated under `config`, ascending.
    pub fn selected_examples(&self, config: &PerturbationConfig) -> Vec<usize> {
        match (&config.example_subset, self.subset_size()) {
            (Some(rank), Some(size)) => unrank_combination(rank, self.dataset_len, size),
            _ => (0..self.dataset_len).collect(),
        }
    }

    /// Every configuration, in index order.
    pub fn enumerate(&self, bound: u64) -> Result<Vec<PerturbationConfig>, SpaceError> {
        let count = self
            .cardinality
            .to_u64()
            .filter(|&c| c <= bound)
            .ok_or_else(|| SpaceError::EnumerationTooLarge {
                cardinality: self.cardinality.clone(),
                bound,
            })?;
        (0..count)
            .map(|i| self.config_at(&BigUint::from(i)))
            .collect()
    }

    pub fn max_choices(&self) -> usize {
        self.max_choices
    }
}

/// Ordered k-selection from `pool` items at mixed-radix rank `rank`
/// (radices `pool, pool-1, ..., pool-k+1`, first position most significant).
fn unrank_selection(mut rank: BigUint, pool: usize, k: usize) -> Vec<usize> {
    let mut digits = vec![0usize; k];
    for j in (0..k).rev() {
        let radix = BigUint::from(pool - j);
        digits[j] = (&rank % &radix).to_usize().expect("digit below pool size");
        rank /= radix;
    }
    let mut available: Vec<usize> = (0..pool).collect();
    digits.into_iter().map(|d| available.remove(d)).collect()
}

fn rank_selection(selection: &[usize], pool: usize) -> BigUint {
    let mut available: Vec<usize> = (0..pool).collect();
    let mut rank = BigUint::zero();
    for (j, item) in selection.iter().enumerate() {
        let d = available
            .iter()
            .position(|a| a == item)
            .expect("checked selection");
        available.remove(d);
        rank = rank * (pool - j) + d;
    }
    rank
}

/// Lexicographic `size`-combination of `0..total` at `rank`.
pub fn unrank_combination(rank: &BigUint, total: usize, size: usize) -> Vec<usize> {
    let mut rank = rank.clone();
    let mut out = Vec::with_capacity(size);
    let mut k = size;
    if k == 0 {
        return out;
    }
    // count == C(total - x - 1, k - 1): combinations whose next element is x.
    let mut count = binomial(total - 1, k - 1);
    for x in 0..total {
        if k == 0 {
            break;
        }
        let remaining = total - x;
        if rank < count {
            out.push(x);
            k -= 1;
            if k > 0 {
                count = count * k / (remaining - 1);
            }
        } else {
            rank -= &count;
            if remaining > 1 {
                count = count * (remaining - k) / (remaining - 1);
            }
        }
    }
    out
}

pub fn rank_combination(combination: &[usize], total: usize) -> BigUint {
    let mut rank = BigUint::zero();
    let mut k = combination.len();
    if k == 0 {
        return rank;
    }
    let chosen: HashSet<usize> = combination.iter().copied().collect();
    let mut count = binomial(total - 1, k - 1);
    for x in 0..total {
        if k == 0 {
            break;
        }
        let remaining = total - x;
        if chosen.contains(&x) {
            k -= 1;
            if k > 0 {
                count = count * k / (remaining - 1);
            }
        } else {
            rank += &count;
            if remaining > 1 {
                count = count * (remaining - k) / (remaining - 1);
            }
        }
    }
    rank
}

fn random_below(rng: &mut ChaCha8Rng, bound: &BigUint) -> BigUint {
    let bits = bound.bits();
    let words = bits.div_ceil(32) as usize;
    let top_mask = if bits % 32 == 0 {
        u32::MAX
    } else {
        (1u32 << (bits % 32)) - 1
    };
    loop {
        let mut digits: Vec<u32> = (0..words).map(|_| rng.next_u32()).collect();
        if let Some(last) = digits.last_mut() {
            *last &= top_mask;
        }
        let candidate = BigUint::from_slice(&digits);
        if &candidate < bound {
            return candidate;
        }
    }
}

/// `count` distinct configurations drawn uniformly, in draw order.
pub fn sample_configs(
    space: &PerturbationSpace,
    count: usize,
    seed: u64,
) -> Result<Vec<PerturbationConfig>, SpaceError> {
    if BigUint::from(count) > space.cardinality {
        return Err(SpaceError::CountExceedsCardinality {
            count,
            cardinality: space.cardinality.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<BigUint> = HashSet::with_capacity(count);
    let mut ids: HashMap<String, BigUint> = HashMap::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let index = random_below(&mut rng, &space.cardinality);
        if !seen.insert(index.clone()) {
            continue;
        }
        let config = space.config_at(&index)?;
        if let Some(prev) = ids.insert(config.config_id.clone(), index.clone()) {
            if prev != index {
                return Err(SpaceError::HashCollision(config.config_id.clone()));
            }
        }
        out.push(config);
    }
    Ok(out)
}

/// Gold bookkeeping for a rendered multiple-choice prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMap {
    /// `order[position]` is the original index of the choice rendered there.
    pub order: Vec<usize>,
    /// Label rendered at each position.
    pub labels: Vec<String>,
}

impl GoldMap {
    pub fn rendered_position(&self, original: usize) -> Option<usize> {
        self.order.iter().position(|&o| o == original)
    }

    pub fn label_for(&self, original: usize) -> Option<&str> {
        self.rendered_position(original)
            .map(|p| self.labels[p].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Present for multiple-choice examples.
    pub gold_map: Option<GoldMap>,
}

fn choice_offset(example_id: &str) -> u128 {
    let mut h = Sha256::new();
    h.update(b"reliable-eval/choice-order/1\0");
    h.update(example_id.as_bytes());
    let digest = h.finalize();
    u128::from_le_bytes(digest[..16].try_into().expect("16 bytes"))
}

fn factorial_u128(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Choice order of `example` under `permutation`: position -> original index.
pub fn permutation_for(permutation: ChoicePermutation, example: &Example) -> Vec<usize> {
    let count = example.choices().map_or(0, <[String]>::len);
    match permutation {
        ChoicePermutation::Identity => (0..count).collect(),
        ChoicePermutation::Seeded(index) => {
            let modulus = factorial_u128(count);
            let a = index % modulus;
            let b = choice_offset(example.id()) % modulus;
            let rank = if a >= modulus - b {
                a - (modulus - b)
            } else {
                a + b
            };
            unrank_permutation(rank, count)
        }
    }
}

/// Lehmer-code unranking; rank 0 is the identity and `count! - 1` the reversal.
pub fn unrank_permutation(mut rank: u128, count: usize) -> Vec<usize> {
    let mut available: Vec<usize> = (0..count).collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let f = factorial_u128(count - 1 - i);
        let d = (rank / f) as usize;
        rank %= f;
        out.push(available.remove(d));
    }
    out
}

fn fill_template(template: &str, question: &str, choices: Option<&str>) -> String {
    let mut out = String::with_capacity(template.len() + question.len());
    let mut rest = template;
    loop {
        let q = rest.find(QUESTION_PLACEHOLDER);
        let c = choices.and_then(|_| rest.find(CHOICES_PLACEHOLDER));
        let next = match (q, c) {
            (Some(q), Some(c)) if c < q => Some((c, CHOICES_PLACEHOLDER)),
            (Some(q), _) => Some((q, QUESTION_PLACEHOLDER)),
            (None, Some(c)) => Some((c, CHOICES_PLACEHOLDER)),
            (None, None) => None,
        };
        match next {
            Some((at, placeholder)) => {
                out.push_str(&rest[..at]);
                if placeholder == QUESTION_PLACEHOLDER {
                    out.push_str(question);
                } else {
                    out.push_str(choices.unwrap_or_default());
                }
                rest = &rest[at + placeholder.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

fn render_block(
    config: &PerturbationConfig,
    example: &Example,
    inventory: &DimensionInventory,
) -> Result<(String, Option<GoldMap>), SpaceError> {
    let template = inventory
        .instruction_paraphrases
        .get(config.paraphrase_index)
        .ok_or_else(|| SpaceError::ConfigOutOfBounds("paraphrase index".into()))?;
    let markers = inventory
        .qa_markers
        .get(config.qa_marker_index)
        .ok_or_else(|| SpaceError::ConfigOutOfBounds("marker index".into()))?;
    let question = format!("{}{}", markers.question, example.question());
    match example.choices() {
        None => Ok((fill_template(template, &question, None), None)),
        Some(choices) => {
            let style = *inventory
                .enumerators
                .get(config.enumerator_index)
                .ok_or_else(|| SpaceError::ConfigOutOfBounds("enumerator index".into()))?;
            let separator = inventory
                .separators
                .get(config.separator_index)
                .ok_or_else(|| SpaceError::ConfigOutOfBounds("separator index".into()))?;
            let order = permutation_for(config.choice_permutation, example);
            let labels: Vec<String> = (0..order.len()).map(|p| style.label(p)).collect();
            let listing = order
                .iter()
                .zip(&labels)
                .map(|(&orig, label)| format!("{label}. {}", choices[orig]))
                .collect::<Vec<_>>()
                .join(separator);
            Ok((
                fill_template(template, &question, Some(&listing)),
                Some(GoldMap { order, labels }),
            ))
        }
    }
}

/// Renders `example` under `config`: few-shot demonstrations first, each
/// followed by its answer, then the target example.
pub fn render_prompt(
    config: &PerturbationConfig,
    example: &Example,
    inventory: &DimensionInventory,
) -> Result<RenderedPrompt, SpaceError> {
    let answer_marker = &inventory
        .qa_markers
        .get(config.qa_marker_index)
        .ok_or_else(|| SpaceError::ConfigOutOfBounds("marker index".into()))?
        .answer;
    let mut blocks = Vec::with_capacity(config.fewshot_selection.len() + 1);
    for &i in &config.fewshot_selection {
        let demo = inventory
            .fewshot_pool
            .get(i)
            .ok_or_else(|| SpaceError::ConfigOutOfBounds(format!("few-shot index {i}")))?;
        let (block, map) = render_block(config, &demo.example, inventory)?;
        let answer = match (&map, demo.example.gold()) {
            (Some(map), Gold::Choice(g)) => map.label_for(*g).unwrap_or_default().to_string(),
            _ => demo.gold_text.clone(),
        };
        blocks.push(format!("{block}\n{answer_marker}{answer}"));
    }
    let (mut target, gold_map) = render_block(config, example, inventory)?;
    if !answer_marker.is_empty() {
        target.push('\n');
        target.push_str(answer_marker);
    }
    blocks.push(target);
    Ok(RenderedPrompt {
        text: blocks.join("\n\n"),
        gold_map,
    })
}
