//! Labelled datasets and their CSV form.
//!
//! CSV layout: header `x1,…,xd,energy`, one sample per row, values written
//! with shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::targets::{GmmTarget, TargetDensity};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub points: Array2<T>,
    /// Energy labels `-log p̃(x_i)` of the (possibly tempered) target.
    pub energies: Vec<T>,
    /// Proposal log-densities when the points came from a model.
    pub log_q: Option<Vec<T>>,
    pub weights: Option<Vec<T>>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(points: Array2<T>, energies: Vec<T>) -> Result<Self> {
        if points.nrows() != energies.len() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                got: energies.len(),
            });
        }
        Ok(Self {
            points,
            energies,
            log_q: None,
            weights: None,
        })
    }

    /// Draws `n` exact samples from `sampler` and labels them with
    /// `-log p̃` of `density` (each label is one counted target evaluation).
    pub fn from_sampler(sampler: &GmmTarget<T>, density: &TargetDensity<T>, n: usize, seed: u64) -> Self {
        let points = sampler.sample(n, seed);
        let energies = density.log_density_batch(&points).into_iter().map(|v| -v).collect();
        Self {
            points,
            energies,
            log_q: None,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: self.points.select(Axis(0), idx),
            energies: idx.iter().map(|&i| self.energies[i]).collect(),
            log_q: self.log_q.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            weights: self.weights.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Shuffled split into `(train, held_out)` with `held_out_fraction` of the rows.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_out = ((self.len() as f64) * held_out_fraction).round() as usize;
        let (out, train) = idx.split_at(n_out.min(self.len()));
        (self.select(train), self.select(out))
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = String::new();
        let header: Vec<String> = (1..=d).map(|j| format!("x{j}")).chain(["energy".to_string()]).collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for (row, e) in self.points.rows().into_iter().zip(&self.energies) {
            for v in row {
                let _ = write!(s, "{},", v.as_f64());
            }
            let _ = writeln!(s, "{}", e.as_f64());
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let d = cols.len().saturating_sub(1);
        let expected: Vec<String> = (1..=d).map(|j| format!("x{j}")).chain(["energy".to_string()]).collect();
        if d == 0 || cols != expected {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        let mut flat = Vec::new();
        let mut energies = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?;
            if vals.len() != d + 1 {
                return Err(Error::Format(format!("line {}: expected {} columns", ln + 2, d + 1)));
            }
            flat.extend(vals[..d].iter().map(|&v| T::lit(v)));
            energies.push(T::lit(vals[d]));
        }
        let points = Array2::from_shape_vec((energies.len(), d), flat).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(points, energies)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}
