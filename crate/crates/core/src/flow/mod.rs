//! RealNVP-style affine coupling flow with exact log-density and exact
//! reverse-mode parameter gradients.
//!
//! Points are stored row-wise in `Array2<T>` (one sample per row). The flow
//! maps base samples `z` to data `x` through `layers` in order; density
//! evaluation runs the layers backwards.

mod checkpoint;
mod coupling;
mod params;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use coupling::{CouplingLayer, Direction};
pub use params::{Block, LayerLayout, ParameterVector};

use coupling::LayerTape;

use crate::{Error, Result, Scalar};

/// Rows evaluated at once when no gradient is needed.
const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Scale outputs are `clamp * tanh(raw)`.
    pub clamp: f64,
    /// Multiplier on the He-initialised output layer; 0 gives the identity map.
    pub init_scale: f64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: 15,
            hidden: 160,
            clamp: 4.0,
            init_scale: 0.01,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "flow dim, layers and hidden must be positive: {self:?}"
            )));
        }
        if !(self.clamp > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config(format!("invalid clamp or init scale: {self:?}")));
        }
        Ok(())
    }
}

/// Invertible coupling flow with a standard-normal base density.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    config: FlowConfig,
    layers: Vec<CouplingLayer>,
    params: ParameterVector<T>,
    seed: u64,
}

/// Output of a batched pass that kept its activations.
pub struct Tape<T> {
    dir: Direction,
    layers: Vec<LayerTape<T>>,
    /// Final coordinates (`z` for density passes, `x` for sampling passes).
    pub output: Array2<T>,
    /// Model log-density of each row.
    pub log_q: Vec<T>,
}

/// Gradient of a scalar loss with respect to the per-sample quantities a
/// reparameterised (sampling) pass exposes.
pub struct SampleGrad<T> {
    pub value: T,
    /// dL/dx, one row per sample.
    pub d_x: Array2<T>,
    /// dL/d log q(x).
    pub d_log_q: Vec<T>,
}

pub fn standard_normal_log_density<T: Scalar>(z: &[T]) -> T {
    let half = T::lit(0.5);
    let sq: T = z.iter().map(|&v| v * v).sum();
    -half * sq - half * T::from_usize(z.len()) * (T::lit(2.0) * T::PI()).ln()
}

/// Independent standard normal draws, `n × dim`.
pub fn standard_normal_draws<T: Scalar>(n: usize, dim: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, dim), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    })
}

impl<T: Scalar> FlowModel<T> {
    /// Builds a model with He-style random conditioners; the output layer is
    /// scaled by `config.init_scale` so the map starts close to the identity.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut start = 0;
        for l in 0..config.layers {
            let layer = CouplingLayer::alternating(l, config.dim, config.hidden, start);
            start += layer.layout.len();
            layers.push(layer);
        }
        let mut values = vec![T::zero(); start];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let lay = &layer.layout;
            for (block, fan_in, scale) in [
                (Block::W1, lay.n_in, 1.0),
                (Block::W2, lay.hidden, 1.0),
                (Block::W3, lay.hidden, config.init_scale),
            ] {
                let std = (2.0 / fan_in.max(1) as f64).sqrt() * scale;
                for v in &mut values[lay.range(block)] {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = T::lit(n * std);
                }
            }
        }
        let layout = layers.iter().map(|l| l.layout.clone()).collect();
        Ok(Self {
            config,
            layers,
            params: ParameterVector::new(values, layout),
            seed,
        })
    }

    /// The identity map: every conditioner outputs zero scale and shift.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        Self::new(config.with_init_scale(0.0), 0)
    }

    pub fn from_parts(config: FlowConfig, values: Vec<T>, seed: u64) -> Result<Self> {
        let mut model = Self::new(config.clone().with_init_scale(0.0), seed)?;
        model.config = config;
        if values.len() != model.params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.params.len(),
                got: values.len(),
            });
        }
        model.params.as_mut_slice().copy_from_slice(&values);
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParameterVector<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector<T> {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn clamp(&self) -> T {
        T::lit(self.config.clamp)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.config.dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.dim,
                got,
            });
        }
        Ok(())
    }

    fn run(&self, input: ArrayView2<T>, dir: Direction, keep: bool) -> (Array2<T>, Vec<T>, Vec<LayerTape<T>>) {
        let mut y = input.to_owned();
        let mut logdet = vec![T::zero(); y.nrows()];
        let mut tapes = Vec::new();
        let p = self.params.as_slice();
        let clamp = self.clamp();
        let mut step = |layer: &CouplingLayer| {
            if let Some(t) = layer.apply(p, clamp, &mut y, &mut logdet, dir, keep) {
                tapes.push(t);
            }
        };
        match dir {
            Direction::Forward => self.layers.iter().for_each(&mut step),
            Direction::Inverse => self.layers.iter().rev().for_each(&mut step),
        }
        (y, logdet, tapes)
    }

    /// Maps base points to data space; returns `(x, log|det ∂x/∂z|)`.
    pub fn forward_batch(&self, z: ArrayView2<T>) -> Result<(Array2<T>, Vec<T>)> {
        self.check_dim(z.ncols())?;
        let (x, ld, _) = self.run(z, Direction::Forward, false);
        Ok((x, ld))
    }

    /// Maps data points to base space; returns `(z, log|det ∂z/∂x|)`.
    pub fn inverse_batch(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Vec<T>)> {
        self.check_dim(x.ncols())?;
        let (z, ld, _) = self.run(x, Direction::Inverse, false);
        Ok((z, ld))
    }

    pub fn forward(&self, z: &[T]) -> Result<(Vec<T>, T)> {
        let a = ArrayView2::from_shape((1, z.len()), z).expect("row view");
        let (x, ld) = self.forward_batch(a)?;
        Ok((x.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, x: &[T]) -> Result<(Vec<T>, T)> {
        let a = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (z, ld) = self.inverse_batch(a)?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn log_density(&self, x: &[T]) -> Result<T> {
        let (z, ld) = self.inverse(x)?;
        Ok(standard_normal_log_density(&z) + ld)
    }

    /// `log q(x)` for every row, evaluated in chunks.
    pub fn log_density_batch(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        self.check_dim(x.ncols())?;
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let (z, ld, _) = self.run(chunk, Direction::Inverse, false);
            out.extend(
                z.rows()
                    .into_iter()
                    .zip(ld)
                    .map(|(r, l)| standard_normal_log_density(r.as_slice().expect("row-major")) + l),
            );
        }
        Ok(out)
    }

    /// Pushes given base draws through the flow; returns points and their log-densities.
    pub fn push_forward(&self, z: ArrayView2<T>) -> Result<(Array2<T>, Vec<T>)> {
        self.check_dim(z.ncols())?;
        let mut x = Array2::zeros(z.raw_dim());
        let mut log_q = Vec::with_capacity(z.nrows());
        let mut row = 0;
        for chunk in z.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            let (xc, ld, _) = self.run(chunk, Direction::Forward, false);
            for (zr, l) in chunk.rows().into_iter().zip(ld) {
                let zs: Vec<T> = zr.iter().copied().collect();
                log_q.push(standard_normal_log_density(&zs) - l);
            }
            x.slice_mut(ndarray::s![row..row + xc.nrows(), ..]).assign(&xc);
            row += xc.nrows();
        }
        Ok((x, log_q))
    }

    /// Draws `n` i.i.d. samples with their model log-densities.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Array2<T>, Vec<T>)> {
        let z = standard_normal_draws(n, self.config.dim, seed);
        self.push_forward(z.view())
    }

    /// Density pass that records activations for [`backward`](Self::backward).
    pub fn density_tape(&self, x: ArrayView2<T>) -> Result<Tape<T>> {
        self.check_dim(x.ncols())?;
        let (z, ld, layers) = self.run(x, Direction::Inverse, true);
        let log_q = z
            .rows()
            .into_iter()
            .zip(ld)
            .map(|(r, l)| standard_normal_log_density(r.as_slice().expect("row-major")) + l)
            .collect();
        Ok(Tape {
            dir: Direction::Inverse,
            layers,
            output: z,
            log_q,
        })
    }

    /// Sampling pass from base draws `z` that records activations.
    pub fn sample_tape(&self, z: ArrayView2<T>) -> Result<Tape<T>> {
        self.check_dim(z.ncols())?;
        let (x, ld, layers) = self.run(z, Direction::Forward, true);
        let log_q = z
            .rows()
            .into_iter()
            .zip(ld)
            .map(|(r, l)| {
                let zs: Vec<T> = r.iter().copied().collect();
                standard_normal_log_density(&zs) - l
            })
            .collect();
        Ok(Tape {
            dir: Direction::Forward,
            layers,
            output: x,
            log_q,
        })
    }

    /// Reverse-mode pass. `d_log_q` is dL/d log q per row; `d_output` is
    /// dL/d(tape output) and is only meaningful for sampling tapes (for
    /// density tapes the output `z` is not a free quantity and must be `None`).
    /// Returns the flat parameter gradient.
    pub fn backward(&self, tape: &Tape<T>, d_log_q: &[T], d_output: Option<Array2<T>>) -> Vec<T> {
        let mut grad = vec![T::zero(); self.params.len()];
        let p = self.params.as_slice();
        let clamp = self.clamp();
        match tape.dir {
            Direction::Inverse => {
                // log q = log N(z) + logdet, dlogN/dz = -z
                let mut g = tape.output.clone();
                for (mut row, &a) in g.rows_mut().into_iter().zip(d_log_q) {
                    row.mapv_inplace(|v| -a * v);
                }
                if let Some(extra) = d_output {
                    g += &extra;
                }
                // inverse pass ran layers last→first, so the tape is in that order
                for (layer, lt) in self.layers.iter().rev().zip(&tape.layers).rev() {
                    layer.backward(p, clamp, lt, &mut g, d_log_q, Direction::Inverse, &mut grad);
                }
            }
            Direction::Forward => {
                // log q = log N(z) - logdet, z is parameter-free
                let g_ld: Vec<T> = d_log_q.iter().map(|&a| -a).collect();
                let mut g = d_output.unwrap_or_else(|| Array2::zeros(tape.output.raw_dim()));
                for (layer, lt) in self.layers.iter().zip(&tape.layers).rev() {
                    layer.backward(p, clamp, lt, &mut g, &g_ld, Direction::Forward, &mut grad);
                }
            }
        }
        grad
    }

    /// Gradient of a scalar loss built from `log q` on a fixed batch.
    ///
    /// `loss` receives the model log-densities and returns the loss value and
    /// dL/d log q per row.
    pub fn loss_gradient<F>(&self, x: ArrayView2<T>, loss: F) -> Result<(T, Vec<T>)>
    where
        F: FnOnce(&[T]) -> Result<(T, Vec<T>)>,
    {
        let tape = self.density_tape(x)?;
        let (value, d_log_q) = loss(&tape.log_q)?;
        check_finite_loss(value)?;
        Ok((value, self.backward(&tape, &d_log_q, None)))
    }

    /// Gradient of a scalar loss built from reparameterised samples `x = T(z)`.
    pub fn sample_loss_gradient<F>(&self, z: ArrayView2<T>, loss: F) -> Result<(T, Vec<T>)>
    where
        F: FnOnce(ArrayView2<T>, &[T]) -> Result<SampleGrad<T>>,
    {
        let tape = self.sample_tape(z)?;
        let sg = loss(tape.output.view(), &tape.log_q)?;
        check_finite_loss(sg.value)?;
        Ok((sg.value, self.backward(&tape, &sg.d_log_q, Some(sg.d_x))))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self)
    }
}

fn check_finite_loss<T: Scalar>(value: T) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step: 0,
            reason: format!("non-finite loss value {value}"),
        })
    }
}
