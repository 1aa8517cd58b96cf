//! Visible/masked splits of the patch sequence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskShape {
    #[default]
    Random,
    /// A centered square block of patches, topped up at random.
    Square,
}

impl MaskShape {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskShape::Random => "random",
            MaskShape::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskShape::Random),
            "square" => Ok(MaskShape::Square),
            other => Err(Error::Config(format!("unknown mask shape {other}"))),
        }
    }
}

/// Number of masked patches, `⌊rN⌋`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub seed: u64,
    pub ratio: f64,
    pub shape: MaskShape,
    /// Visible indices followed by masked indices; each part ascending.
    pub perm: Vec<usize>,
    /// `inverse[perm[k]] = k`.
    pub inverse: Vec<usize>,
    pub keep: usize,
}

impl MaskPlan {
    /// `grid` is the patch grid `(rows, cols)`; `N = rows·cols`.
    pub fn new(grid: (usize, usize), ratio: f64, seed: u64, shape: MaskShape) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let n = grid.0 * grid.1;
        let count = masked_count(n, ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = match shape {
            MaskShape::Random => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                order.truncate(count);
                order
            }
            MaskShape::Square => {
                let side = (count as f64).sqrt().floor() as usize;
                let side = side.min(grid.0).min(grid.1);
                let (top, left) = ((grid.0 - side) / 2, (grid.1 - side) / 2);
                let mut block: Vec<usize> = (top..top + side)
                    .flat_map(|r| (left..left + side).map(move |c| r * grid.1 + c))
                    .collect();
                let mut rest: Vec<usize> = (0..n).filter(|i| !block.contains(i)).collect();
                rest.shuffle(&mut rng);
                block.extend(rest.into_iter().take(count - side * side));
                block
            }
        };
        masked.sort_unstable();
        let mut plan = Self::from_masked(n, &masked)?;
        plan.seed = seed;
        plan.ratio = ratio;
        plan.shape = shape;
        Ok(plan)
    }

    /// Every patch visible.
    pub fn full(n: usize) -> Self {
        Self::from_masked(n, &[]).expect("empty mask set is valid")
    }

    /// A plan with an explicit masked set.
    pub fn from_masked(n: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n];
        for &i in masked {
            if i >= n || std::mem::replace(&mut is_masked[i], true) {
                return Err(Error::Contract(format!(
                    "invalid or repeated mask index {i} for {n} patches"
                )));
            }
        }
        let mut perm: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
        let keep = perm.len();
        perm.extend((0..n).filter(|&i| is_masked[i]));
        let mut inverse = vec![0; n];
        for (k, &i) in perm.iter().enumerate() {
            inverse[i] = k;
        }
        Ok(Self {
            seed: 0,
            ratio: if n == 0 { 0.0 } else { masked.len() as f64 / n as f64 },
            shape: MaskShape::Random,
            perm,
            inverse,
            keep,
        })
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn visible(&self) -> &[usize] {
        &self.perm[..self.keep]
    }

    /// The mask index set `Z`.
    pub fn masked(&self) -> &[usize] {
        &self.perm[self.keep..]
    }
}
