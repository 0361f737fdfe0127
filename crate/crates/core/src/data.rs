//! Benchmark datasets: GP-prior draws, the ten-point linear set, CSV I/O.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{parse_kernel, KernelExpr};
use crate::model::{Dataset, GPModel};

/// Dataset sizes used by the kernel-search experiments.
pub const SIZE_PRESETS: [usize; 8] = [5, 10, 20, 30, 40, 50, 100, 200];

/// Default input range for generated data.
pub const DEFAULT_RANGE: (f64, f64) = (-2.5, 2.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Generator {
    #[serde(rename = "LIN")]
    Lin,
    #[serde(rename = "SE")]
    Se,
    #[serde(rename = "MAT32")]
    Mat32,
    #[serde(rename = "SE+SE")]
    SeSe,
}

impl Generator {
    pub const ALL: [Generator; 4] = [Generator::Lin, Generator::Se, Generator::Mat32, Generator::SeSe];

    pub fn name(self) -> &'static str {
        match self {
            Generator::Lin => "LIN",
            Generator::Se => "SE",
            Generator::Mat32 => "MAT32",
            Generator::SeSe => "SE+SE",
        }
    }

    pub fn expr(self) -> KernelExpr {
        parse_kernel(self.name()).expect("generator names are valid kernels")
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canon: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        Generator::ALL
            .into_iter()
            .find(|g| g.name() == canon)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown generator `{s}` (expected LIN, SE, MAT32 or SE+SE)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub generator: Generator,
    pub n: usize,
    pub seed: u64,
    pub range: (f64, f64),
}

impl GeneratorSpec {
    pub fn new(generator: Generator, n: usize, seed: u64) -> Self {
        GeneratorSpec { generator, n, seed, range: DEFAULT_RANGE }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("generated datasets need n >= 2, got {}", self.n)));
        }
        let (lo, hi) = self.range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidArgument(format!("degenerate input range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Evenly spaced inputs over the range.
    pub fn inputs(&self) -> Vec<f64> {
        let (lo, hi) = self.range;
        let step = (hi - lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| if i + 1 == self.n { hi } else { lo + step * i as f64 }).collect()
    }
}

/// Draws `y ~ N(0, K + σ_n² I)` at the given inputs and raw hyperparameters.
pub fn sample_gp_at(expr: &KernelExpr, raw: &[f64], x: &[f64], rng: &mut StdRng) -> Result<Vec<f64>> {
    let model = GPModel::new(expr.clone());
    let k = model.covariance(raw, x);
    let (chol, _) = model.factorize(k)?;
    let z = DVector::from_iterator(x.len(), (0..x.len()).map(|_| StandardNormal.sample(rng)));
    Ok((chol.l() * z).iter().copied().collect())
}

/// One dataset from the generator's GP at standard initialization (all raw values zero).
pub fn sample_from_gp_prior(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let expr = spec.generator.expr();
    let raw = vec![0.0; expr.layout().len()];
    let x = spec.inputs();
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let y = sample_gp_at(&expr, &raw, &x, &mut rng)?;
    Dataset::new(x, y)
}

/// Ten noisy points of `y = x` on `[0, 1]`.
pub fn linear_benchmark_dataset() -> Dataset {
    const Y: [f64; 10] = [
        0.106470838606225,
        0.151844221539413,
        0.296365731603068,
        0.406171032190665,
        0.0893660808707719,
        0.496633373724801,
        1.3649612419355,
        0.576025393790963,
        1.03487772075105,
        1.08454376768281,
    ];
    let x = (0..10).map(|i| i as f64 / 9.0).collect();
    Dataset { x, y: Y.to_vec() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

/// Rescales targets to zero mean and unit population standard deviation.
pub fn normalize(data: &Dataset) -> Result<(Dataset, Normalization)> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidArgument("normalization needs at least two points".into()));
    }
    let mean = data.y.iter().sum::<f64>() / n as f64;
    let var = data.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::InvalidArgument("targets have zero variance".into()));
    }
    let t = Normalization { mean, std };
    let y = data.y.iter().map(|&v| t.apply(v)).collect();
    Ok((Dataset { x: data.x.clone(), y }, t))
}

/// Reads two numeric columns `x,y` with an optional header; rows come back sorted by `x`.
///
/// Line numbers in errors count data rows from 1, after any header.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_reader(reader);
    let mut rows: Vec<(f64, f64)> = Vec::new();
    let mut line = 0usize;
    let mut first = true;
    for record in rdr.records() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        // a header is a first row with no numeric field at all
        if std::mem::take(&mut first) && parsed.iter().all(|p| p.is_err()) {
            continue;
        }
        line += 1;
        if record.len() != 2 {
            return Err(Error::Parse { line, message: format!("expected 2 columns, found {}", record.len()) });
        }
        match (&parsed[0], &parsed[1]) {
            (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => rows.push((*x, *y)),
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("cannot parse `{}`,`{}` as finite numbers", &record[0], &record[1]),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, message: "no data rows".into() });
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x, y) = rows.into_iter().unzip();
    Dataset::new(x, y)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes `x,y` with a header; values round-trip exactly through [`read_csv`].
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y"])?;
    for (x, y) in data.x.iter().zip(&data.y) {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
