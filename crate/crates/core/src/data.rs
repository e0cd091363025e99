//! 2D toy distributions used as sources and targets.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Anything that can draw i.i.d. points of a fixed dimension.
pub trait Sampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut SeededRng) -> Array2<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "8gaussians")]
    EightGaussians,
    #[serde(rename = "moons")]
    Moons,
    #[serde(rename = "scurve")]
    Scurve,
    #[serde(rename = "checkerboard")]
    Checkerboard,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::Gaussian,
        Dataset::EightGaussians,
        Dataset::Moons,
        Dataset::Scurve,
        Dataset::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Gaussian => "gaussian",
            Dataset::EightGaussians => "8gaussians",
            Dataset::Moons => "moons",
            Dataset::Scurve => "scurve",
            Dataset::Checkerboard => "checkerboard",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnknownDataset(s.to_string()))
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0 * std::f64::consts::SQRT_2;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.1;
pub const DEFAULT_NOISE: f64 = 0.05;

/// A named benchmark distribution plus the seed used by [`sample_dataset`].
///
/// `noise` is the std of the isotropic jitter added to `moons` and `scurve`;
/// the other distributions ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset: Dataset,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(dataset: Dataset, seed: u64) -> Self {
        Self { dataset, noise: DEFAULT_NOISE, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn center(k: usize) -> [f64; 2] {
        let angle = k as f64 * FRAC_PI_4;
        [EIGHT_GAUSSIANS_RADIUS * angle.cos(), EIGHT_GAUSSIANS_RADIUS * angle.sin()]
    }

    fn draw(&self, rng: &mut SeededRng) -> [f64; 2] {
        let normal = |rng: &mut SeededRng| -> f64 { StandardNormal.sample(rng) };
        match self.dataset {
            Dataset::Gaussian => [normal(rng), normal(rng)],
            Dataset::EightGaussians => {
                let c = Self::center(rng.random_range(0..8));
                [
                    c[0] + EIGHT_GAUSSIANS_STD * normal(rng),
                    c[1] + EIGHT_GAUSSIANS_STD * normal(rng),
                ]
            }
            Dataset::Moons => {
                let s = rng.random_range(0.0..PI);
                let p = if rng.random_bool(0.5) {
                    [s.cos(), s.sin()]
                } else {
                    [1.0 - s.cos(), 0.5 - s.sin()]
                };
                [p[0] + self.noise * normal(rng), p[1] + self.noise * normal(rng)]
            }
            Dataset::Scurve => {
                let s = rng.random_range(-1.5 * PI..1.5 * PI);
                let p = [s.sin(), s.signum() * (s.cos() - 1.0)];
                [p[0] + self.noise * normal(rng), p[1] + self.noise * normal(rng)]
            }
            Dataset::Checkerboard => {
                let cell = rng.random_range(0..8u32);
                let i = cell / 2;
                let j = 2 * (cell % 2) + i % 2;
                let (u, v): (f64, f64) = (rng.random(), rng.random());
                [2.0 * (i as f64 - 2.0 + u), 2.0 * (j as f64 - 2.0 + v)]
            }
        }
    }
}

impl Sampler for DatasetSpec {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut SeededRng) -> Array2<f64> {
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let p = self.draw(rng);
            row[0] = p[0];
            row[1] = p[1];
        }
        out
    }
}

/// `n` points from `spec`, deterministic in `spec.seed`.
pub fn sample_dataset(spec: &DatasetSpec, n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    spec.validate()?;
    Ok(spec.sample(n, &mut rng_from_seed(spec.seed)))
}

/// Degenerate sampler that always returns the same point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass(pub Vec<f64>);

impl Sampler for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, n: usize, _rng: &mut SeededRng) -> Array2<f64> {
        Array2::from_shape_fn((n, self.0.len()), |(_, k)| self.0[k])
    }
}
