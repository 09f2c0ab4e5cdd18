//! Seeded synthetic models with a known score law, for testing the pipeline
//! without an endpoint.
//!
//! By default every cell is an independent draw from the base law plus the
//! configuration's offsets, clamped to `[0, 1]`. Offsets are drawn once per
//! configuration or per dimension value, so they add variance across
//! perturbations rather than across examples. Alternatively a whole row can
//! share one level, or cells can be 0/1 draws around the level.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use sha2::{Digest, Sha256};

use crate::domain::{ScoreMatrix, ValidationError};
use crate::perturb::{Dimension, PerturbationConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("example_count must be at least 1")]
    NoExamples,
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreLaw {
    Constant(f64),
    Uniform(f64, f64),
    Beta(f64, f64),
    /// With probability `p` draw from the first law, otherwise the second.
    Bimodal(f64, Box<ScoreLaw>, Box<ScoreLaw>),
}

impl ScoreLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScoreLaw::Constant(c) => *c,
            ScoreLaw::Uniform(lo, hi) => lo + (hi - lo) * rng.random::<f64>(),
            ScoreLaw::Beta(a, b) => Beta::new(*a, *b).expect("validated parameters").sample(rng),
            ScoreLaw::Bimodal(p, first, second) => {
                if rng.random::<f64>() < *p {
                    first.sample(rng)
                } else {
                    second.sample(rng)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidLaw(msg));
        match self {
            ScoreLaw::Constant(c) if !c.is_finite() => bad(format!("constant({c})")),
            ScoreLaw::Uniform(lo, hi) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                bad(format!("uniform({lo}, {hi}) needs finite lo <= hi"))
            }
            ScoreLaw::Beta(a, b) if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) => {
                bad(format!("beta({a}, {b}) needs positive shapes"))
            }
            ScoreLaw::Bimodal(p, x, y) => {
                if !(0.0..=1.0).contains(p) {
                    return bad(format!("bimodal weight {p} outside [0, 1]"));
                }
                x.validate()?;
                y.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ScoreLaw::Constant(c) => *c,
            ScoreLaw::Uniform(lo, hi) => (lo + hi) / 2.0,
            ScoreLaw::Beta(a, b) => a / (a + b),
            ScoreLaw::Bimodal(p, f, s) => p * f.mean() + (1.0 - p) * s.mean(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            ScoreLaw::Constant(_) => 0.0,
            ScoreLaw::Uniform(lo, hi) => (hi - lo).powi(2) / 12.0,
            ScoreLaw::Beta(a, b) => a * b / ((a + b).powi(2) * (a + b + 1.0)),
            ScoreLaw::Bimodal(p, f, s) => {
                let m = self.mean();
                p * (f.variance() + (f.mean() - m).powi(2))
                    + (1.0 - p) * (s.variance() + (s.mean() - m).powi(2))
            }
        }
    }
}

impl fmt::Display for ScoreLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreLaw::Constant(c) => write!(f, "constant({c})"),
            ScoreLaw::Uniform(a, b) => write!(f, "uniform({a}, {b})"),
            ScoreLaw::Beta(a, b) => write!(f, "beta({a}, {b})"),
            ScoreLaw::Bimodal(p, x, y) => write!(f, "bimodal({p}, {x}, {y})"),
        }
    }
}

struct LawParser<'a> {
    rest: &'a str,
}

impl<'a> LawParser<'a> {
    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn expect(&mut self, token: char) -> Result<(), String> {
        self.skip_ws();
        match self.rest.strip_prefix(token) {
            Some(r) => {
                self.rest = r;
                Ok(())
            }
            None => Err(format!("expected {token:?} at {:?}", self.rest)),
        }
    }

    fn number(&mut self) -> Result<f64, String> {
        self.skip_ws();
        let end = self
            .rest
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
            .unwrap_or(self.rest.len());
        let (num, rest) = self.rest.split_at(end);
        self.rest = rest;
        num.parse()
            .map_err(|_| format!("expected a number, found {num:?}"))
    }

    fn law(&mut self) -> Result<ScoreLaw, String> {
        self.skip_ws();
        let end = self
            .rest
            .find(|c: char| !c.is_ascii_alphabetic())
            .unwrap_or(self.rest.len());
        let (name, rest) = self.rest.split_at(end);
        self.rest = rest;
        self.expect('(')?;
        let law = match name {
            "constant" => ScoreLaw::Constant(self.number()?),
            "uniform" => {
                let lo = self.number()?;
                self.expect(',')?;
                ScoreLaw::Uniform(lo, self.number()?)
            }
            "beta" => {
                let a = self.number()?;
                self.expect(',')?;
                ScoreLaw::Beta(a, self.number()?)
            }
            "bimodal" => {
                let p = self.number()?;
                self.expect(',')?;
                let first = self.law()?;
                self.expect(',')?;
                let second = self.law()?;
                ScoreLaw::Bimodal(p, Box::new(first), Box::new(second))
            }
            other => return Err(format!("unknown law {other:?}")),
        };
        self.expect(')')?;
        law.validate().map_err(|e| e.to_string())?;
        Ok(law)
    }
}

impl FromStr for ScoreLaw {
    type Err = String;

    /// Parses `constant(c)`, `uniform(lo, hi)`, `beta(a, b)` or
    /// `bimodal(p, LAW, LAW)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = LawParser { rest: s };
        let law = p.law()?;
        p.skip_ws();
        if !p.rest.is_empty() {
            return Err(format!("trailing input {:?}", p.rest));
        }
        Ok(law)
    }
}

/// What an additive offset is keyed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectKey {
    /// One draw per value of the dimension.
    Dimension(Dimension),
    /// One draw per configuration.
    Config,
}

impl FromStr for EffectKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "config" {
            return Ok(EffectKey::Config);
        }
        serde_json::from_value::<Dimension>(serde_json::Value::String(s.to_string()))
            .map(EffectKey::Dimension)
            .map_err(|_| format!("unknown effect key {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CellMode {
    /// Each cell draws from the base law independently.
    #[default]
    PerCell,
    /// Every cell of a row equals the row's level.
    Level,
    /// Cells are 0/1 draws with success probability equal to the level.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub id: String,
    pub law: ScoreLaw,
    pub per_perturbation_effect: Vec<(EffectKey, ScoreLaw)>,
    pub cells: CellMode,
}

fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"reliable-eval/synthetic/1\0");
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl SyntheticModel {
    pub fn new(id: impl Into<String>, law: ScoreLaw) -> Self {
        SyntheticModel {
            id: id.into(),
            law,
            per_perturbation_effect: Vec::new(),
            cells: CellMode::PerCell,
        }
    }

    pub fn with_effect(mut self, key: EffectKey, law: ScoreLaw) -> Self {
        self.per_perturbation_effect.push((key, law));
        self
    }

    pub fn with_cells(mut self, cells: CellMode) -> Self {
        self.cells = cells;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.law.validate()?;
        self.per_perturbation_effect
            .iter()
            .try_for_each(|(_, law)| law.validate())
    }

    /// Sum of the configuration's additive offsets.
    pub fn offset(&self, config: &PerturbationConfig, seed: u64) -> f64 {
        let seed_bytes = seed.to_le_bytes();
        let id = self.id.as_bytes();
        let mut value = 0.0;
        for (i, (key, law)) in self.per_perturbation_effect.iter().enumerate() {
            let coordinate = match key {
                EffectKey::Config => config.config_id().as_bytes().to_vec(),
                EffectKey::Dimension(d) => config.coordinate_bytes(*d),
            };
            let index = (i as u64).to_le_bytes();
            value += law.sample(&mut seeded_rng(&[
                id,
                b"effect",
                &index,
                &coordinate,
                &seed_bytes,
            ]));
        }
        value
    }

    /// The configuration's level: one draw from the base law plus offsets, clamped.
    pub fn level(&self, config: &PerturbationConfig, seed: u64) -> f64 {
        let draw = self.law.sample(&mut seeded_rng(&[
            self.id.as_bytes(),
            b"level",
            config.config_id().as_bytes(),
            &seed.to_le_bytes(),
        ]));
        (draw + self.offset(config, seed)).clamp(0.0, 1.0)
    }

    pub fn cell(&self, config: &PerturbationConfig, example_id: &str, seed: u64) -> f64 {
        match self.cells {
            CellMode::PerCell => {
                let draw = self.law.sample(&mut seeded_rng(&[
                    self.id.as_bytes(),
                    b"draw",
                    config.config_id().as_bytes(),
                    example_id.as_bytes(),
                    &seed.to_le_bytes(),
                ]));
                (draw + self.offset(config, seed)).clamp(0.0, 1.0)
            }
            CellMode::Level => self.level(config, seed),
            CellMode::Bernoulli => {
                let level = self.level(config, seed);
                let mut rng = seeded_rng(&[
                    self.id.as_bytes(),
                    b"cell",
                    config.config_id().as_bytes(),
                    example_id.as_bytes(),
                    &seed.to_le_bytes(),
                ]);
                if rng.random::<f64>() < level {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Scores for `configs` x `example_ids`, one row per configuration.
pub fn synth_scores_for(
    model: &SyntheticModel,
    configs: &[PerturbationConfig],
    example_ids: &[String],
    dataset_id: &str,
    seed: u64,
) -> Result<ScoreMatrix, SynthError> {
    model.validate()?;
    if example_ids.is_empty() {
        return Err(SynthError::NoExamples);
    }
    let rows = configs
        .iter()
        .map(|c| {
            example_ids
                .iter()
                .map(|e| Some(model.cell(c, e, seed)))
                .collect()
        })
        .collect();
    Ok(ScoreMatrix::from_rows(
        configs.iter().map(|c| c.config_id().to_string()).collect(),
        example_ids.to_vec(),
        rows,
        model.id.clone(),
        dataset_id,
    )?)
}

/// [`synth_scores_for`] with columns named `example-0`, `example-1`, ...
pub fn synth_scores(
    model: &SyntheticModel,
    configs: &[PerturbationConfig],
    example_count: usize,
    seed: u64,
) -> Result<ScoreMatrix, SynthError> {
    let ids: Vec<String> = (0..example_count).map(|i| format!("example-{i}")).collect();
    synth_scores_for(model, configs, &ids, "synthetic", seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::ChoicePermutation;

    fn config(i: usize) -> PerturbationConfig {
        PerturbationConfig::new(i, 0, 0, ChoicePermutation::Identity, vec![], 0, None)
    }

    #[test]
    fn parse_and_display() {
        let law: ScoreLaw = "bimodal(0.5, constant(0.2), uniform(0.7, 0.9))"
            .parse()
            .unwrap();
        assert_eq!(
            law,
            ScoreLaw::Bimodal(
                0.5,
                Box::new(ScoreLaw::Constant(0.2)),
                Box::new(ScoreLaw::Uniform(0.7, 0.9))
            )
        );
        assert_eq!(law.to_string().parse::<ScoreLaw>().unwrap(), law);
        assert_eq!(
            "beta(2,5)".parse::<ScoreLaw>().unwrap(),
            ScoreLaw::Beta(2.0, 5.0)
        );
        for bad in [
            "",
            "normal(0,1)",
            "uniform(0.9, 0.1)",
            "beta(0, 1)",
            "constant(0.5) x",
            "bimodal(2, constant(0), constant(1))",
        ] {
            assert!(bad.parse::<ScoreLaw>().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn moments_of_laws() {
        assert_eq!(ScoreLaw::Uniform(0.0, 1.0).variance(), 1.0 / 12.0);
        let b = ScoreLaw::Bimodal(
            0.5,
            Box::new(ScoreLaw::Constant(0.2)),
            Box::new(ScoreLaw::Constant(0.8)),
        );
        assert!((b.mean() - 0.5).abs() < 1e-15);
        assert!((b.variance() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn seeded_and_clamped() {
        let m = SyntheticModel::new("s", ScoreLaw::Uniform(0.0, 1.0))
            .with_effect(EffectKey::Config, ScoreLaw::Uniform(-2.0, 2.0));
        let configs: Vec<_> = (0..50).map(config).collect();
        let a = synth_scores(&m, &configs, 3, 9).unwrap();
        assert_eq!(a, synth_scores(&m, &configs, 3, 9).unwrap());
        assert_ne!(a, synth_scores(&m, &configs, 3, 10).unwrap());
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(&v.unwrap())));
        assert_eq!(a.example_ids()[2], "example-2");
    }

    #[test]
    fn constant_law_gives_constant_matrix() {
        let m = SyntheticModel::new("c", ScoreLaw::Constant(0.9));
        let s = synth_scores(&m, &(0..4).map(config).collect::<Vec<_>>(), 7, 0).unwrap();
        assert!(s.values().iter().all(|v| *v == Some(0.9)));
    }

    #[test]
    fn uniform_cells_average_to_center() {
        let m = SyntheticModel::new("u", ScoreLaw::Uniform(0.4, 0.6));
        let s = synth_scores(&m, &(0..10).map(config).collect::<Vec<_>>(), 1000, 3).unwrap();
        let mean = s.values().iter().map(|v| v.unwrap()).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn bimodal_row_means_scale_with_example_count() {
        let law = ScoreLaw::Bimodal(
            0.5,
            Box::new(ScoreLaw::Constant(0.2)),
            Box::new(ScoreLaw::Constant(0.8)),
        );
        let m = SyntheticModel::new("b", law.clone());
        let examples = 50;
        let rows = 400;
        let s = synth_scores(&m, &(0..rows).map(config).collect::<Vec<_>>(), examples, 8).unwrap();
        let means: Vec<f64> = (0..rows)
            .map(|r| s.row(r).iter().map(|v| v.unwrap()).sum::<f64>() / examples as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / rows as f64;
        let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (rows - 1) as f64;
        let expected = law.variance() / examples as f64;
        // The sample variance of 400 rows has a relative standard error near 7%.
        assert!((grand - 0.5).abs() < 0.01, "{grand}");
        assert!((var / expected - 1.0).abs() < 0.25, "{var} vs {expected}");
    }

    #[test]
    fn invalid_laws_are_rejected() {
        let m = SyntheticModel::new("x", ScoreLaw::Beta(0.0, 1.0));
        assert!(matches!(
            synth_scores(&m, &[config(0)], 1, 0),
            Err(SynthError::InvalidLaw(_))
        ));
        let ok = SyntheticModel::new("x", ScoreLaw::Constant(0.1));
        assert_eq!(
            synth_scores(&ok, &[config(0)], 0, 0),
            Err(SynthError::NoExamples)
        );
    }

    #[test]
    fn dimension_effects_share_draws() {
        let m = SyntheticModel::new("s", ScoreLaw::Constant(0.5)).with_effect(
            EffectKey::Dimension(Dimension::Paraphrase),
            ScoreLaw::Uniform(-0.3, 0.3),
        );
        let same_paraphrase =
            PerturbationConfig::new(1, 2, 0, ChoicePermutation::Identity, vec![], 0, None);
        assert_eq!(m.level(&config(1), 4), m.level(&same_paraphrase, 4));
        assert_ne!(m.level(&config(1), 4), m.level(&config(2), 4));
    }

    #[test]
    fn bernoulli_cells_track_level() {
        let m = SyntheticModel::new("b", ScoreLaw::Constant(0.3)).with_cells(CellMode::Bernoulli);
        let ids: Vec<String> = (0..4000).map(|i| i.to_string()).collect();
        let s = synth_scores_for(&m, &[config(0)], &ids, "d", 1).unwrap();
        let mean = s.values().iter().map(|v| v.unwrap()).sum::<f64>() / 4000.0;
        // 3 sigma for p = 0.3 at n = 4000 is about 0.022.
        assert!((mean - 0.3).abs() < 0.022, "{mean}");
    }

    #[test]
    fn effect_keys_parse() {
        assert_eq!("config".parse::<EffectKey>().unwrap(), EffectKey::Config);
        assert_eq!(
            "separator".parse::<EffectKey>().unwrap(),
            EffectKey::Dimension(Dimension::Separator)
        );
        assert!("colour".parse::<EffectKey>().is_err());
    }
}
