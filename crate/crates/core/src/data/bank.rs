//! Prototype embeddings anchoring each concept and its antonym.
//!
//! Vectors are laid out as a table of `2·M` rows: row `2j` is concept `j`'s
//! positive prototype, row `2j + 1` its antonym. The antonym map is therefore
//! `id ^ 1`, an involution by construction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BANK_MAGIC: &str = "MCMBANK 1";
pub const MAX_COSINE: f64 = 0.5;
pub const MIN_DIM: usize = 8;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankSource {
    Synthetic { seed: u64 },
    Loaded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    names: Vec<String>,
    dim: usize,
    /// `2·M` unit vectors, positive/antonym interleaved.
    vectors: Vec<Vec<f64>>,
    pub source: BankSource,
}

/// Row of the bank table holding concept `concept`'s positive (or antonym)
/// prototype.
pub fn prototype_id(concept: usize, positive: bool) -> usize {
    2 * concept + usize::from(!positive)
}

pub fn antonym_id(id: usize) -> usize {
    id ^ 1
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Scales to unit norm; vectors already within 1e-12 of unit norm are kept
/// as they are.
fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 && (n - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl ConceptBank {
    /// Seeded synthetic bank: Gaussian draws, normalized, redrawn until every
    /// pair of vectors has cosine below [`MAX_COSINE`].
    pub fn synthetic(names: &[String], dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::Config(format!(
                "prototype width {dim} is below the minimum {MIN_DIM}"
            )));
        }
        if names.is_empty() {
            return Err(Error::Config("a concept bank needs at least one concept".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_ATTEMPTS {
            let vectors: Vec<Vec<f64>> = (0..2 * names.len())
                .map(|_| {
                    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = norm(&v);
                    v.iter_mut().for_each(|x| *x /= n);
                    v
                })
                .collect();
            let bank = Self {
                names: names.to_vec(),
                dim,
                vectors,
                source: BankSource::Synthetic { seed },
            };
            if bank.offending_pairs().is_empty() {
                return Ok(bank);
            }
        }
        Err(Error::Capacity(format!(
            "could not separate {} prototypes in {dim} dimensions after {MAX_ATTEMPTS} attempts",
            2 * names.len()
        )))
    }

    pub fn from_vectors(names: Vec<String>, positive: Vec<Vec<f64>>, antonym: Vec<Vec<f64>>) -> Result<Self> {
        if names.is_empty() || names.len() != positive.len() || names.len() != antonym.len() {
            return Err(Error::Validation(
                "bank needs one positive and one antonym vector per concept".into(),
            ));
        }
        let dim = positive[0].len();
        let mut vectors = Vec::with_capacity(2 * names.len());
        for (p, a) in positive.into_iter().zip(antonym) {
            vectors.push(p);
            vectors.push(a);
        }
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Validation("prototype vectors differ in width".into()));
        }
        if vectors
            .iter()
            .any(|v| norm(v) == 0.0 || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Validation("prototype vectors must be finite and nonzero".into()));
        }
        vectors.iter_mut().for_each(|v| normalize(v));
        let bank = Self {
            names,
            dim,
            vectors,
            source: BankSource::Loaded,
        };
        let bad = bank.offending_pairs();
        if !bad.is_empty() {
            let list: Vec<String> = bad
                .iter()
                .map(|&(a, b, c)| format!("{} / {} (cosine {c:.4})", bank.label(a), bank.label(b)))
                .collect();
            return Err(Error::Validation(format!(
                "prototype pairs at or above cosine {MAX_COSINE}: {}",
                list.join(", ")
            )));
        }
        Ok(bank)
    }

    /// Every pair `(i, j, cos)` with `cos >= MAX_COSINE`.
    pub fn offending_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut bad = Vec::new();
        for i in 0..self.vectors.len() {
            for j in i + 1..self.vectors.len() {
                let c = cosine(&self.vectors[i], &self.vectors[j]);
                if !(c < MAX_COSINE) {
                    bad.push((i, j, c));
                }
            }
        }
        bad
    }

    /// Human-readable name of a table row (`"Not <name>"` for antonyms).
    pub fn label(&self, id: usize) -> String {
        let name = &self.names[id / 2];
        if id.is_multiple_of(2) {
            name.clone()
        } else {
            format!("Not {name}")
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn concept_count(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }

    pub fn positive(&self, concept: usize) -> &[f64] {
        &self.vectors[prototype_id(concept, true)]
    }

    pub fn antonym(&self, concept: usize) -> &[f64] {
        &self.vectors[prototype_id(concept, false)]
    }

    /// The `[2M, E_c]` prototype table.
    pub fn table<T: Real>(&self) -> Tensor<T> {
        let data: Vec<T> = self.vectors.iter().flatten().map(|&x| T::lit(x)).collect();
        Tensor::new(vec![self.vectors.len(), self.dim], data).expect("bank table shape")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{BANK_MAGIC}");
        let _ = writeln!(out, "{} {}", self.names.len(), self.dim);
        for (j, name) in self.names.iter().enumerate() {
            let _ = writeln!(out, "{name}");
            for id in [prototype_id(j, true), prototype_id(j, false)] {
                let line: Vec<String> = self.vectors[id].iter().map(|x| format!("{x:e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.trim()) != Some(BANK_MAGIC) {
            return Err(bad("missing MCMBANK 1 header".into()));
        }
        let header = lines.get(1).ok_or_else(|| bad("missing size line".into()))?;
        let sizes: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("size line must be two integers".into())))
            .collect::<Result<_>>()?;
        let [m, dim] = sizes[..] else {
            return Err(bad("size line must be `M E_c`".into()));
        };
        let vector = |at: usize| -> Result<Vec<f64>> {
            let line = lines
                .get(at)
                .ok_or_else(|| bad(format!("line {}: missing vector", at + 1)))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(format!("line {}: bad number {s:?}", at + 1))))
                .collect::<Result<_>>()?;
            if v.len() != dim {
                return Err(bad(format!("line {}: {} values, expected {dim}", at + 1, v.len())));
            }
            Ok(v)
        };
        let (mut names, mut pos, mut neg) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..m {
            let at = 2 + 3 * j;
            let name = lines
                .get(at)
                .ok_or_else(|| bad(format!("line {}: missing concept name", at + 1)))?;
            names.push(name.trim().to_string());
            pos.push(vector(at + 1)?);
            neg.push(vector(at + 2)?);
        }
        Self::from_vectors(names, pos, neg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
