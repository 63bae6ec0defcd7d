//! Multi-output Gaussian process regression.
//!
//! The kernel is an ARD squared exponential plus white noise:
//!
//! ```text
//! k(xi, xj) = sf^2 * exp(-0.5 * (xi - xj)^T Theta (xi - xj)) + sn^2 * delta_ij
//! ```
//!
//! `delta_ij` refers to database indices: the noise term only ever appears on
//! the diagonal of the training Gram matrix and in the prior variance
//! `k(x, x)` of a query, never in the cross-covariance vector `k*`.
//!
//! All output channels of one [`GpModel`] share a single hyperparameter set and
//! a single Cholesky factorization, so a correction to one channel costs one
//! triangular solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Version tag written into serialized models.
pub const GP_FORMAT_VERSION: u32 = 1;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    Empty,
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("Gram matrix is not positive definite (jitter escalated to {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("no optimizer start produced a finite likelihood (best so far: {best:?})")]
    NoFiniteLikelihood { best: Option<Hyperparameters> },
    #[error("correction {epsilon} exceeds the per-tick cap {cap}")]
    CorrectionCapExceeded { epsilon: f64, cap: f64 },
    #[error("output channel {channel} out of range for {outputs} outputs")]
    ChannelOutOfRange { channel: usize, outputs: usize },
    #[error("unsupported model format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
}

/// Kernel hyperparameters.
///
/// `inv_sq_lengthscales` holds the diagonal of `Theta`, i.e. `1 / l_d^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub signal_std: f64,
    pub inv_sq_lengthscales: Vec<f64>,
    pub noise_std: f64,
}

impl Hyperparameters {
    pub fn new(
        signal_std: f64,
        inv_sq_lengthscales: Vec<f64>,
        noise_std: f64,
    ) -> Result<Self, GpError> {
        let hp = Self {
            signal_std,
            inv_sq_lengthscales,
            noise_std,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Same lengthscale `l` (in input units) on every axis.
    pub fn isotropic(
        signal_std: f64,
        lengthscale: f64,
        dim: usize,
        noise_std: f64,
    ) -> Result<Self, GpError> {
        Self::new(
            signal_std,
            vec![1.0 / (lengthscale * lengthscale); dim],
            noise_std,
        )
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_std.is_finite() && self.signal_std > 0.0) {
            return Err(GpError::InvalidHyperparameters(format!(
                "signal_std must be positive, got {}",
                self.signal_std
            )));
        }
        if self.inv_sq_lengthscales.is_empty() {
            return Err(GpError::InvalidHyperparameters(
                "at least one input dimension required".into(),
            ));
        }
        if let Some(t) = self
            .inv_sq_lengthscales
            .iter()
            .find(|t| !(t.is_finite() && **t > 0.0))
        {
            return Err(GpError::InvalidHyperparameters(format!(
                "inverse squared lengthscales must be positive, got {t}"
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(GpError::InvalidHyperparameters(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.inv_sq_lengthscales.len()
    }

    /// `k(x, x)` for a noisy observation: `sf^2 + sn^2`.
    pub fn prior_variance(&self) -> f64 {
        self.signal_std * self.signal_std + self.noise_std * self.noise_std
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.inv_sq_lengthscales
            .iter()
            .map(|t| 1.0 / t.sqrt())
            .collect()
    }

    fn to_log(&self, noise_floor: f64) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim() + 2);
        p.push(self.signal_std.ln());
        p.extend(self.inv_sq_lengthscales.iter().map(|t| t.ln()));
        p.push(self.noise_std.max(noise_floor).ln());
        p
    }

    fn from_log(p: &[f64]) -> Self {
        let d = p.len() - 2;
        Self {
            signal_std: p[0].exp(),
            inv_sq_lengthscales: p[1..=d].iter().map(|v| v.exp()).collect(),
            noise_std: p[d + 1].exp(),
        }
    }
}

/// Box constraints for hyperparameter fitting, `(lower, upper)` per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub signal_std: (f64, f64),
    pub inv_sq_lengthscales: Vec<(f64, f64)>,
    pub noise_std: (f64, f64),
}

impl Bounds {
    /// Desk-scale defaults for positional inputs in meters:
    /// `sf in [1e-3, 10]`, `l in [0.01, 1.0] m`, `sn in [1e-4, 0.1]`.
    pub fn positional(dim: usize) -> Self {
        Self::from_lengthscales((1e-3, 10.0), (0.01, 1.0), dim, (1e-4, 0.1))
    }

    /// Builds bounds from a lengthscale range `(l_min, l_max)` shared by all axes.
    pub fn from_lengthscales(
        signal_std: (f64, f64),
        lengthscale: (f64, f64),
        dim: usize,
        noise_std: (f64, f64),
    ) -> Self {
        let theta = (
            1.0 / (lengthscale.1 * lengthscale.1),
            1.0 / (lengthscale.0 * lengthscale.0),
        );
        Self {
            signal_std,
            inv_sq_lengthscales: vec![theta; dim],
            noise_std,
        }
    }

    pub fn dim(&self) -> usize {
        self.inv_sq_lengthscales.len()
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let check = |name: &str, (lo, hi): (f64, f64), strict: bool| {
            let lower_ok = if strict { lo > 0.0 } else { lo >= 0.0 };
            if !(lo.is_finite() && hi.is_finite() && lower_ok && lo < hi) {
                return Err(GpError::InvalidBounds(format!(
                    "{name}: ({lo}, {hi}) is not a valid interval"
                )));
            }
            Ok(())
        };
        check("signal_std", self.signal_std, true)?;
        if self.inv_sq_lengthscales.is_empty() {
            return Err(GpError::InvalidBounds("no input dimensions".into()));
        }
        for b in &self.inv_sq_lengthscales {
            check("inv_sq_lengthscale", *b, true)?;
        }
        check("noise_std", self.noise_std, false)
    }

    pub fn contains(&self, hp: &Hyperparameters) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        hp.dim() == self.dim()
            && inside(hp.signal_std, self.signal_std)
            && inside(hp.noise_std, self.noise_std)
            && hp
                .inv_sq_lengthscales
                .iter()
                .zip(&self.inv_sq_lengthscales)
                .all(|(t, b)| inside(*t, *b))
    }

    fn noise_floor(&self) -> f64 {
        self.noise_std.0.max(1e-9)
    }

    /// Bounds in the log-parameter space used by the optimizer.
    fn log_box(&self) -> (Vec<f64>, Vec<f64>) {
        let floor = self.noise_floor();
        let mut lo = vec![self.signal_std.0.ln()];
        let mut hi = vec![self.signal_std.1.ln()];
        for (l, h) in &self.inv_sq_lengthscales {
            lo.push(l.ln());
            hi.push(h.ln());
        }
        lo.push(self.noise_std.0.max(floor).ln());
        hi.push(self.noise_std.1.max(floor * 10.0).ln());
        (lo, hi)
    }

    fn clamp(&self, hp: &Hyperparameters) -> Hyperparameters {
        Hyperparameters {
            signal_std: hp.signal_std.clamp(self.signal_std.0, self.signal_std.1),
            inv_sq_lengthscales: hp
                .inv_sq_lengthscales
                .iter()
                .zip(&self.inv_sq_lengthscales)
                .map(|(t, (lo, hi))| t.clamp(*lo, *hi))
                .collect(),
            noise_std: hp.noise_std.clamp(self.noise_std.0, self.noise_std.1),
        }
    }
}

/// Posterior at a query point: mean per output channel and the shared variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[inline]
fn sq_scaled_distance(xi: &[f64], xj: &[f64], theta: &[f64]) -> f64 {
    xi.iter()
        .zip(xj)
        .zip(theta)
        .map(|((a, b), t)| {
            let d = a - b;
            t * d * d
        })
        .sum()
}

/// Evaluates the kernel between two points.
///
/// `same_index` selects the white-noise term: it must be set only when both
/// arguments are the same database entry.
pub fn kernel_eval(
    xi: &[f64],
    xj: &[f64],
    hp: &Hyperparameters,
    same_index: bool,
) -> Result<f64, GpError> {
    let d = hp.dim();
    if xi.len() != d {
        return Err(GpError::DimensionMismatch {
            expected: d,
            got: xi.len(),
        });
    }
    if xj.len() != d {
        return Err(GpError::DimensionMismatch {
            expected: d,
            got: xj.len(),
        });
    }
    let se = hp.signal_std
        * hp.signal_std
        * (-0.5 * sq_scaled_distance(xi, xj, &hp.inv_sq_lengthscales)).exp();
    let noise = if same_index {
        hp.noise_std * hp.noise_std
    } else {
        0.0
    };
    Ok(se + noise)
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Noise-free squared-exponential Gram matrix.
fn se_gram(inputs: &DMatrix<f64>, hp: &Hyperparameters) -> DMatrix<f64> {
    let n = inputs.nrows();
    let sf2 = hp.signal_std * hp.signal_std;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(inputs, i)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sf2;
        for j in 0..i {
            let v = sf2
                * (-0.5 * sq_scaled_distance(&rows[i], &rows[j], &hp.inv_sq_lengthscales)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + sn^2 I`, escalating a diagonal jitter from 1e-10
/// by factors of ten up to 1e-6 when the plain matrix fails.
fn factorize(se: &DMatrix<f64>, noise_var: f64) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let n = se.nrows();
    let mut jitter = 0.0;
    loop {
        let mut k = se.clone();
        for i in 0..n {
            k[(i, i)] += noise_var + jitter;
        }
        if let Some(c) = k.cholesky() {
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 {
            JITTER_START
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(GpError::NotPositiveDefinite { jitter: JITTER_MAX });
        }
    }
}

/// Optimizer settings for [`GpModel::fit_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub seed: u64,
    /// Number of random restarts in addition to the data-driven initial guess.
    pub restarts: usize,
    pub max_iterations: usize,
    /// Optimize the likelihood of an evenly thinned subset of at most this
    /// many rows; the returned model still holds every row.
    #[serde(default)]
    pub max_fit_rows: Option<usize>,
}

impl FitOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            restarts: 5,
            max_iterations: 200,
            max_fit_rows: None,
        }
    }
}

fn thin_rows(m: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(keep.len(), m.ncols(), |i, j| m[(keep[i], j)])
}

/// A fitted regressor: database, hyperparameters and cached factorization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GpModelRecord", into = "GpModelRecord")]
pub struct GpModel {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    hyperparameters: Hyperparameters,
    bounds: Bounds,
    correction_cap: Option<f64>,
    /// Constant prior mean per output channel.
    prior_mean: DVector<f64>,
    jitter: f64,
    factor: Cholesky<f64, Dyn>,
    weights: DMatrix<f64>,
}

/// Two models are equal when their databases and hyperparameters are; the
/// cached factorization is derived from those.
impl PartialEq for GpModel {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.hyperparameters == other.hyperparameters
            && self.bounds == other.bounds
            && self.correction_cap == other.correction_cap
            && self.prior_mean == other.prior_mean
            && self.jitter == other.jitter
    }
}

impl GpModel {
    /// Builds a model with given hyperparameters, no fitting.
    pub fn new(
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        hyperparameters: Hyperparameters,
        bounds: Bounds,
    ) -> Result<Self, GpError> {
        check_data(&inputs, &outputs)?;
        hyperparameters.validate()?;
        bounds.validate()?;
        if hyperparameters.dim() != inputs.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.ncols(),
                got: hyperparameters.dim(),
            });
        }
        if bounds.dim() != inputs.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.ncols(),
                got: bounds.dim(),
            });
        }
        let se = se_gram(&inputs, &hyperparameters);
        let noise_var = hyperparameters.noise_std * hyperparameters.noise_std;
        let (factor, jitter) = factorize(&se, noise_var)?;
        let weights = factor.solve(&outputs);
        let prior_mean = DVector::zeros(outputs.ncols());
        Ok(Self {
            inputs,
            outputs,
            hyperparameters,
            bounds,
            correction_cap: None,
            prior_mean,
            jitter,
            factor,
            weights,
        })
    }

    /// Fits hyperparameters by maximizing the log marginal likelihood
    /// (summed over output channels) inside `bounds`, with the default
    /// five seeded restarts.
    pub fn fit(
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        bounds: Bounds,
        seed: u64,
    ) -> Result<Self, GpError> {
        Self::fit_with(inputs, outputs, bounds, &FitOptions::seeded(seed))
    }

    pub fn fit_with(
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        bounds: Bounds,
        options: &FitOptions,
    ) -> Result<Self, GpError> {
        check_data(&inputs, &outputs)?;
        bounds.validate()?;
        if bounds.dim() != inputs.ncols() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.ncols(),
                got: bounds.dim(),
            });
        }
        let n = inputs.nrows();
        let (fit_inputs, fit_outputs) = match options.max_fit_rows {
            Some(max) if max >= 2 && n > max => {
                let keep: Vec<usize> = (0..max).map(|i| i * (n - 1) / (max - 1)).collect();
                (thin_rows(&inputs, &keep), thin_rows(&outputs, &keep))
            }
            _ => (inputs.clone(), outputs.clone()),
        };
        let objective = Objective {
            inputs: &fit_inputs,
            outputs: &fit_outputs,
            noise_floor: bounds.noise_floor(),
        };
        let (lo, hi) = bounds.log_box();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

        let mut starts =
            vec![initial_guess(&fit_inputs, &fit_outputs, &bounds).to_log(bounds.noise_floor())];
        for _ in 0..options.restarts {
            starts.push(
                lo.iter()
                    .zip(&hi)
                    .map(|(l, h)| rng.random_range(*l..=*h))
                    .collect(),
            );
        }

        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in starts {
            let start: Vec<f64> = start
                .iter()
                .zip(lo.iter().zip(&hi))
                .map(|(v, (l, h))| v.clamp(*l, *h))
                .collect();
            if let Some((f, p)) = minimize_box(&objective, start, &lo, &hi, options.max_iterations)
            {
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, p));
                }
            }
        }
        let Some((_, p)) = best else {
            return Err(GpError::NoFiniteLikelihood { best: None });
        };
        let hp = bounds.clamp(&Hyperparameters::from_log(&p));
        match Self::new(inputs, outputs, hp.clone(), bounds) {
            Err(GpError::NotPositiveDefinite { .. }) => {
                Err(GpError::NoFiniteLikelihood { best: Some(hp) })
            }
            other => other,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        row(&self.inputs, i)
    }

    pub fn output(&self, i: usize) -> Vec<f64> {
        row(&self.outputs, i)
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyperparameters
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    /// Diagonal jitter that was needed to factorize the Gram matrix (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn correction_cap(&self) -> Option<f64> {
        self.correction_cap
    }

    pub fn set_correction_cap(&mut self, cap: Option<f64>) {
        self.correction_cap = cap;
    }

    pub fn with_correction_cap(mut self, cap: f64) -> Self {
        self.correction_cap = Some(cap);
        self
    }

    pub fn prior_mean(&self) -> &[f64] {
        self.prior_mean.as_slice()
    }

    /// Regresses each channel around a constant instead of zero, so the
    /// posterior mean relaxes to `mean[c]` away from the data.
    pub fn with_prior_mean(mut self, mean: &[f64]) -> Result<Self, GpError> {
        if mean.len() != self.output_dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.output_dim(),
                got: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("prior mean"));
        }
        self.prior_mean = DVector::from_column_slice(mean);
        for c in 0..self.output_dim() {
            self.refresh_weights(c);
        }
        Ok(self)
    }

    fn refresh_weights(&mut self, channel: usize) {
        let centered = self
            .outputs
            .column(channel)
            .add_scalar(-self.prior_mean[channel]);
        let col = self.factor.solve(&centered);
        self.weights.set_column(channel, &col);
    }

    fn check_query(&self, x: &[f64]) -> Result<(), GpError> {
        if x.len() != self.input_dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("query point"));
        }
        Ok(())
    }

    /// `k*(xi, x)` without the noise term.
    fn cross_covariance(&self, x: &[f64]) -> DVector<f64> {
        let theta = &self.hyperparameters.inv_sq_lengthscales;
        let sf2 = self.hyperparameters.signal_std * self.hyperparameters.signal_std;
        DVector::from_iterator(
            self.len(),
            self.inputs.row_iter().map(|r| {
                let d: f64 = r
                    .iter()
                    .zip(x)
                    .zip(theta)
                    .map(|((a, b), t)| t * (a - b) * (a - b))
                    .sum();
                sf2 * (-0.5 * d).exp()
            }),
        )
    }

    pub fn predict(&self, x: &[f64]) -> Result<Posterior, GpError> {
        self.check_query(x)?;
        let ks = self.cross_covariance(x);
        let mean = (self.weights.transpose() * &ks + &self.prior_mean)
            .iter()
            .copied()
            .collect();
        let v = self
            .factor
            .l()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a non-zero diagonal");
        let variance = (self.hyperparameters.prior_variance() - v.dot(&v)).max(0.0);
        Ok(Posterior { mean, variance })
    }

    /// Posterior at the `i`-th database input.
    pub fn predict_at_index(&self, i: usize) -> Result<Posterior, GpError> {
        self.predict(&self.input(i))
    }

    /// Analytic gradient of the posterior variance:
    /// `dS/dx = -2 k*^T K^-1 dk*/dx`. Its negative points toward lower uncertainty.
    pub fn variance_gradient(&self, x: &[f64]) -> Result<Vec<f64>, GpError> {
        self.check_query(x)?;
        let ks = self.cross_covariance(x);
        let a = self.factor.solve(&ks);
        let theta = &self.hyperparameters.inv_sq_lengthscales;
        let mut grad = vec![0.0; self.input_dim()];
        for (i, r) in self.inputs.row_iter().enumerate() {
            let w = a[i] * ks[i];
            for (d, g) in grad.iter_mut().enumerate() {
                // dk*_i/dx_d = -k*_i * theta_d * (x_d - xi_id)
                *g += 2.0 * w * theta[d] * (x[d] - r[d]);
            }
        }
        Ok(grad)
    }

    /// Index and coordinates of the database input most correlated with `x`.
    ///
    /// Ranks by the scaled squared distance, which is monotone in the kernel
    /// and does not underflow far from the data. Ties go to the lowest index.
    pub fn mu_project(&self, x: &[f64]) -> Result<(usize, Vec<f64>), GpError> {
        self.check_query(x)?;
        let theta = &self.hyperparameters.inv_sq_lengthscales;
        let mut best = (0, f64::INFINITY);
        for (i, r) in self.inputs.row_iter().enumerate() {
            let d: f64 = r
                .iter()
                .zip(x)
                .zip(theta)
                .map(|((a, b), t)| t * (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok((best.0, self.input(best.0)))
    }

    /// Spreads a correction `epsilon` given at `x` over the outputs of one
    /// channel using the kernel normalized to unit signal variance:
    /// `y_i += k(x, xi_i) / sf^2 * epsilon`. Inputs and hyperparameters are
    /// untouched, so the posterior variance is unchanged everywhere.
    pub fn apply_correction(
        &mut self,
        x: &[f64],
        channel: usize,
        epsilon: f64,
    ) -> Result<(), GpError> {
        self.check_query(x)?;
        if channel >= self.output_dim() {
            return Err(GpError::ChannelOutOfRange {
                channel,
                outputs: self.output_dim(),
            });
        }
        if !epsilon.is_finite() {
            return Err(GpError::NonFinite("correction"));
        }
        if let Some(cap) = self.correction_cap {
            if epsilon.abs() > cap * (1.0 + 1e-12) {
                return Err(GpError::CorrectionCapExceeded { epsilon, cap });
            }
        }
        let sf2 = self.hyperparameters.signal_std * self.hyperparameters.signal_std;
        let ks = self.cross_covariance(x);
        for i in 0..self.len() {
            self.outputs[(i, channel)] += ks[i] / sf2 * epsilon;
        }
        self.refresh_weights(channel);
        Ok(())
    }

    /// Log marginal likelihood of the current outputs, summed over channels.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let m = self.output_dim() as f64;
        let mut data_fit = 0.0;
        for c in 0..self.output_dim() {
            let y = self.outputs.column(c).add_scalar(-self.prior_mean[c]);
            data_fit += y.dot(&self.weights.column(c));
        }
        let log_det: f64 = 2.0
            * self
                .factor
                .l()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        -0.5 * data_fit - 0.5 * m * log_det - 0.5 * n * m * LN_2PI
    }
}

fn check_data(inputs: &DMatrix<f64>, outputs: &DMatrix<f64>) -> Result<(), GpError> {
    if inputs.nrows() == 0 || inputs.ncols() == 0 || outputs.ncols() == 0 {
        return Err(GpError::Empty);
    }
    if inputs.nrows() != outputs.nrows() {
        return Err(GpError::DimensionMismatch {
            expected: inputs.nrows(),
            got: outputs.nrows(),
        });
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("inputs"));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("outputs"));
    }
    Ok(())
}

fn initial_guess(
    inputs: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    bounds: &Bounds,
) -> Hyperparameters {
    let rms = (outputs.iter().map(|v| v * v).sum::<f64>() / outputs.len() as f64).sqrt();
    let theta = inputs
        .column_iter()
        .map(|c| {
            let (lo, hi) = c
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                    (a.min(*v), b.max(*v))
                });
            let l = ((hi - lo) / 4.0).max(1e-6);
            1.0 / (l * l)
        })
        .collect();
    bounds.clamp(&Hyperparameters {
        signal_std: rms.max(1e-12),
        inv_sq_lengthscales: theta,
        noise_std: 0.1 * rms,
    })
}

/// Negative log marginal likelihood over log-hyperparameters.
struct Objective<'a> {
    inputs: &'a DMatrix<f64>,
    outputs: &'a DMatrix<f64>,
    noise_floor: f64,
}

impl Objective<'_> {
    fn eval(&self, p: &[f64]) -> Option<(f64, Vec<f64>)> {
        let hp = Hyperparameters::from_log(p);
        let hp = Hyperparameters {
            noise_std: hp.noise_std.max(self.noise_floor),
            ..hp
        };
        let n = self.inputs.nrows();
        let m = self.outputs.ncols() as f64;
        let se = se_gram(self.inputs, &hp);
        let noise_var = hp.noise_std * hp.noise_std;
        let (chol, _) = factorize(&se, noise_var).ok()?;
        let alpha = chol.solve(self.outputs);
        let data_fit: f64 = self
            .outputs
            .iter()
            .zip(alpha.iter())
            .map(|(y, a)| y * a)
            .sum();
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let nll = 0.5 * data_fit + 0.5 * m * log_det + 0.5 * n as f64 * m * LN_2PI;
        if !nll.is_finite() {
            return None;
        }

        // W = alpha alpha^T - M K^-1 ; dNLL/dp = -0.5 tr(W dK/dp)
        let mut w = &alpha * alpha.transpose();
        w -= chol.inverse() * m;

        let d = self.inputs.ncols();
        let mut grad = vec![0.0; d + 2];
        let rows: Vec<Vec<f64>> = (0..n).map(|i| row(self.inputs, i)).collect();
        let mut g_sf = 0.0;
        let mut g_theta = vec![0.0; d];
        for i in 0..n {
            g_sf += w[(i, i)] * se[(i, i)];
            for j in 0..i {
                let wk = 2.0 * w[(i, j)] * se[(i, j)];
                g_sf += wk;
                for (k, g) in g_theta.iter_mut().enumerate() {
                    let diff = rows[i][k] - rows[j][k];
                    *g += wk * (-0.5 * hp.inv_sq_lengthscales[k] * diff * diff);
                }
            }
        }
        grad[0] = -0.5 * 2.0 * g_sf;
        for k in 0..d {
            grad[1 + k] = -0.5 * g_theta[k];
        }
        grad[d + 1] = -0.5 * 2.0 * noise_var * w.trace();
        Some((nll, grad))
    }
}

/// Projected quasi-Newton (BFGS on the free variables) inside a box.
fn minimize_box(
    objective: &Objective<'_>,
    mut x: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    max_iterations: usize,
) -> Option<(f64, Vec<f64>)> {
    let n = x.len();
    let project = |v: &mut Vec<f64>| {
        for i in 0..n {
            v[i] = v[i].clamp(lo[i], hi[i]);
        }
    };
    let (mut f, mut g) = objective.eval(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    const MAX_STEP: f64 = 2.0;

    for _ in 0..max_iterations {
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = x[i] <= lo[i] + 1e-12 && g[i] > 0.0;
                let at_hi = x[i] >= hi[i] - 1e-12 && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let pg_norm = (0..n)
            .filter(|i| free[*i])
            .map(|i| g[i] * g[i])
            .sum::<f64>()
            .sqrt();
        if pg_norm < 1e-8 {
            break;
        }

        let mut dir = vec![0.0; n];
        for i in 0..n {
            if free[i] {
                dir[i] = -(0..n)
                    .filter(|j| free[*j])
                    .map(|j| h[(i, j)] * g[j])
                    .sum::<f64>();
            }
        }
        let slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if slope >= 0.0 {
            h.fill_with_identity();
            for i in 0..n {
                dir[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }
        let dir_max = dir.iter().fold(0.0_f64, |a, d| a.max(d.abs()));
        let mut t = if dir_max > MAX_STEP {
            MAX_STEP / dir_max
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            project(&mut cand);
            let step: Vec<f64> = cand.iter().zip(&x).map(|(c, a)| c - a).collect();
            let decrease: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
            if let Some((fc, gc)) = objective.eval(&cand) {
                if fc <= f + 1e-4 * decrease.min(0.0) && fc <= f {
                    accepted = Some((cand, fc, gc, step));
                    break;
                }
            }
            t *= 0.5;
            if t * dir_max < 1e-14 {
                break;
            }
        }
        let Some((cand, fc, gc, s)) = accepted else {
            break;
        };
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let s_v = DVector::from_vec(s.clone());
            let y_v = DVector::from_vec(y);
            let rho = 1.0 / sy;
            let i_n = DMatrix::<f64>::identity(n, n);
            let a = &i_n - &s_v * y_v.transpose() * rho;
            let b = &i_n - &y_v * s_v.transpose() * rho;
            h = &a * &h * &b + &s_v * s_v.transpose() * rho;
        }
        let converged = (f - fc).abs() <= 1e-9 * (1.0 + f.abs());
        x = cand;
        f = fc;
        g = gc;
        if converged {
            break;
        }
    }
    Some((f, x))
}

/// On-disk form of a [`GpModel`]; the factorization is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelRecord {
    pub format_version: u32,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub hyperparameters: Hyperparameters,
    pub bounds: Bounds,
    #[serde(default)]
    pub correction_cap: Option<f64>,
    /// Empty means zero for every channel.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_mean: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row(m, i)).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, GpError> {
    let n = rows.len();
    if n == 0 {
        return Err(GpError::Empty);
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(GpError::DimensionMismatch {
            expected: d,
            got: r.len(),
        });
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Builds an `N x D` matrix from row vectors.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, GpError> {
    matrix_from_rows(rows)
}

impl From<GpModel> for GpModelRecord {
    fn from(m: GpModel) -> Self {
        Self {
            format_version: GP_FORMAT_VERSION,
            inputs: rows_of(&m.inputs),
            outputs: rows_of(&m.outputs),
            hyperparameters: m.hyperparameters,
            bounds: m.bounds,
            correction_cap: m.correction_cap,
            prior_mean: if m.prior_mean.iter().all(|v| *v == 0.0) {
                Vec::new()
            } else {
                m.prior_mean.iter().copied().collect()
            },
        }
    }
}

impl TryFrom<GpModelRecord> for GpModel {
    type Error = GpError;

    fn try_from(r: GpModelRecord) -> Result<Self, Self::Error> {
        if r.format_version != GP_FORMAT_VERSION {
            return Err(GpError::UnsupportedVersion {
                found: r.format_version,
                expected: GP_FORMAT_VERSION,
            });
        }
        let mut model = GpModel::new(
            matrix_from_rows(&r.inputs)?,
            matrix_from_rows(&r.outputs)?,
            r.hyperparameters,
            r.bounds,
        )?;
        model.correction_cap = r.correction_cap;
        if !r.prior_mean.is_empty() {
            model = model.with_prior_mean(&r.prior_mean)?;
        }
        Ok(model)
    }
}
