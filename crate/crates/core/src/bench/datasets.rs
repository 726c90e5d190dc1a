use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::flows::Sampler;
use crate::rng::{seeded, Rng};

/// The 2-D toy distributions of the transport benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Gaussian,
    #[serde(rename = "8gaussians")]
    EightGaussians,
    Moons,
    Scurve,
}

pub const EIGHT_GAUSSIANS_SCALE: f64 = 5.0;
pub const EIGHT_GAUSSIANS_VAR: f64 = 0.1;
pub const MOONS_NOISE: f64 = 0.2;
pub const MOONS_SCALE: f64 = 3.0;
pub const SCURVE_SCALE: f64 = 1.5;
pub const SCURVE_NOISE: f64 = 0.05;

impl Dataset {
    pub const ALL: [Dataset; 4] = [
        Dataset::Gaussian,
        Dataset::EightGaussians,
        Dataset::Moons,
        Dataset::Scurve,
    ];

    /// Short label used in task names.
    pub fn short(self) -> &'static str {
        match self {
            Dataset::Gaussian => "N",
            Dataset::EightGaussians => "8gs",
            Dataset::Moons => "moons",
            Dataset::Scurve => "scurve",
        }
    }

    /// Mode centers of the eight-Gaussian mixture, counter-clockwise from `(scale, 0)`.
    pub fn eight_gaussian_centers() -> [[f64; 2]; 8] {
        std::array::from_fn(|k| {
            let a = k as f64 * PI / 4.0;
            [EIGHT_GAUSSIANS_SCALE * a.cos(), EIGHT_GAUSSIANS_SCALE * a.sin()]
        })
    }

    fn draw(self, rng: &mut Rng) -> [f64; 2] {
        let mut n = || -> f64 { StandardNormal.sample(rng) };
        match self {
            Dataset::Gaussian => [n(), n()],
            Dataset::EightGaussians => {
                let c = Self::eight_gaussian_centers()[rng.gen_range(0..8)];
                let sd = EIGHT_GAUSSIANS_VAR.sqrt();
                let noise = Normal::new(0.0, sd).expect("positive std");
                [c[0] + noise.sample(rng), c[1] + noise.sample(rng)]
            }
            Dataset::Moons => {
                // Unit half-circles as in the classic two-moons generator, noised,
                // then centered at the origin and scaled.
                let theta = rng.gen_range(0.0..PI);
                let (s, c) = theta.sin_cos();
                let p = if rng.gen_bool(0.5) { [c, s] } else { [1.0 - c, 0.5 - s] };
                let noise = Normal::new(0.0, MOONS_NOISE).expect("positive std");
                [
                    MOONS_SCALE * (p[0] + noise.sample(rng) - 0.5),
                    MOONS_SCALE * (p[1] + noise.sample(rng) - 0.25),
                ]
            }
            Dataset::Scurve => {
                let t = rng.gen_range(-1.5 * PI..=1.5 * PI);
                let noise = Normal::new(0.0, SCURVE_NOISE).expect("positive std");
                [
                    SCURVE_SCALE * t.sin() + noise.sample(rng),
                    SCURVE_SCALE * t.signum() * (t.cos() - 1.0) + noise.sample(rng),
                ]
            }
        }
    }

    pub fn sample_with(self, n: usize, rng: &mut Rng) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            data.extend_from_slice(&self.draw(rng));
        }
        Tensor::matrix(n, 2, data).expect("n x 2 buffer")
    }
}

impl Sampler for Dataset {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        self.sample_with(n, rng)
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" | "gaussian" | "normal" | "𝒩" => Ok(Dataset::Gaussian),
            "8gs" | "8gaussians" | "8-gaussians" | "eight_gaussians" => Ok(Dataset::EightGaussians),
            "moons" => Ok(Dataset::Moons),
            "scurve" | "s-curve" | "s_curve" => Ok(Dataset::Scurve),
            other => Err(Error::InvalidArgument(format!("unknown dataset {other:?}"))),
        }
    }
}

/// `n` seeded samples of `kind`.
pub fn sample_dataset(kind: Dataset, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    Ok(kind.sample_with(n, &mut seeded(seed)))
}

/// A source → target pair of datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub source: Dataset,
    pub target: Dataset,
}

impl TaskSpec {
    pub fn new(source: Dataset, target: Dataset) -> Result<Self> {
        if source == target {
            return Err(Error::InvalidArgument(format!("task maps {source} to itself")));
        }
        Ok(Self { source, target })
    }

    /// Source equal to target, for sanity checks.
    pub fn identity(kind: Dataset) -> Self {
        Self {
            source: kind,
            target: kind,
        }
    }

    pub fn name(&self) -> String {
        format!("{}→{}", self.source.short(), self.target.short())
    }

    /// The five tasks of the benchmark table.
    pub fn table() -> [TaskSpec; 5] {
        use Dataset::*;
        [
            TaskSpec {
                source: Gaussian,
                target: EightGaussians,
            },
            TaskSpec {
                source: EightGaussians,
                target: Moons,
            },
            TaskSpec {
                source: Gaussian,
                target: Moons,
            },
            TaskSpec {
                source: Gaussian,
                target: Scurve,
            },
            TaskSpec {
                source: Moons,
                target: EightGaussians,
            },
        ]
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    /// Accepts `a->b`, `a→b` and `a:b`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = ["->", "→", ":"]
            .iter()
            .find_map(|sep| s.split_once(sep))
            .ok_or_else(|| Error::InvalidArgument(format!("task {s:?} is not of the form source->target")))?;
        TaskSpec::new(a.parse()?, b.parse()?)
    }
}

impl Serialize for TaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
