//! Labelled feature matrices, CSV I/O and the synthetic blob generator.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stage};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// `inputs` is row-major with `labels.len()` rows of `dim` features.
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter("a dataset needs at least two classes".into()));
        }
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::Dimension(format!(
                "{} values do not form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Parameter(format!("label {y} out of range for {num_classes} classes")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite feature value".into()));
        }
        Ok(Self { inputs, dim, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { inputs, dim: self.dim, labels, num_classes: self.num_classes }
    }

    /// Split into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Seeded random subset of `size` rows (kept in ascending row order).
    /// `None` or a size at least the row count returns the whole set.
    pub fn eval_subset(&self, size: Option<usize>, seed: u64) -> Dataset {
        match size {
            Some(s) if s < self.len() => {
                let mut rng = stream(seed, Stage::EvalSubset);
                let mut idx = sample(&mut rng, self.len(), s).into_vec();
                idx.sort_unstable();
                self.select(&idx)
            }
            _ => self.clone(),
        }
    }

    /// Short stable identifier of the contents, used in model metadata.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the raw bits; collisions only matter for bookkeeping.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.dim as u64);
        eat(self.num_classes as u64);
        self.inputs.iter().for_each(|v| eat(v.to_bits()));
        self.labels.iter().for_each(|&y| eat(y as u64));
        format!("{h:016x}")
    }

    /// Read `f0..f{d-1},label` CSV. With `num_classes = None` the class count is
    /// one more than the largest label.
    pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, num_classes)
    }

    pub fn read_csv(reader: impl std::io::Read, num_classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let dim = headers.len().saturating_sub(1);
        if headers.get(dim) != Some("label") {
            return Err(Error::Config("last CSV column must be `label`".into()));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for f in rec.iter().take(dim) {
                inputs.push(f.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad feature {f:?}: {e}")))?);
            }
            let y = &rec[dim];
            labels.push(y.trim().parse::<usize>().map_err(|e| Error::Config(format!("bad label {y:?}: {e}")))?);
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("CSV has no rows".into()));
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        Self::new(inputs, dim, labels, classes)
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (x, y) in self.rows() {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Gaussian blobs whose class means are distinct vertices of a hypercube laid
/// over `informative` evenly spaced coordinates. The remaining coordinates are
/// pure noise, which gives the first projection many low-signal weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    pub noise: f64,
    /// Coordinates carrying class signal; 0 means all of them.
    pub informative: usize,
    /// Edge length of the hypercube.
    pub separation: f64,
    /// Constant added to every informative mean coordinate.
    pub offset: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { classes: 4, samples: 5000, dim: 256, noise: 1.0, informative: 8, separation: 4.0, offset: 6.0 }
    }
}

impl BlobSpec {
    /// Labels cycle `i % classes` so the classes stay balanced.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.classes < 2 || self.samples == 0 || self.dim == 0 {
            return Err(Error::Parameter("blob spec needs classes ≥ 2, samples ≥ 1, dim ≥ 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Parameter("noise must be finite and non-negative".into()));
        }
        let inf = if self.informative == 0 { self.dim } else { self.informative.min(self.dim) };
        if inf < 64 && (1u64 << inf) < self.classes as u64 {
            return Err(Error::Parameter(format!(
                "{inf} informative coordinates cannot separate {} classes",
                self.classes
            )));
        }
        let stride = self.dim / inf;
        let coords: Vec<usize> = (0..inf).map(|j| j * stride).collect();

        let mut mrng = stream(seed, Stage::DataMeans);
        let mut vertices: Vec<Vec<bool>> = Vec::with_capacity(self.classes);
        while vertices.len() < self.classes {
            let v: Vec<bool> = (0..inf).map(|_| mrng.random()).collect();
            if !vertices.contains(&v) {
                vertices.push(v);
            }
        }
        let mut means = vec![0.0; self.classes * self.dim];
        for (c, v) in vertices.iter().enumerate() {
            for (&j, &bit) in coords.iter().zip(v) {
                means[c * self.dim + j] = self.offset + if bit { self.separation } else { 0.0 };
            }
        }

        let mut nrng = stream(seed, Stage::DataNoise);
        let mut inputs = Vec::with_capacity(self.samples * self.dim);
        let mut labels = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let c = i % self.classes;
            for j in 0..self.dim {
                let z: f64 = StandardNormal.sample(&mut nrng);
                inputs.push(means[c * self.dim + j] + self.noise * z);
            }
            labels.push(c);
        }
        Dataset::new(inputs, self.dim, labels, self.classes)
    }
}
