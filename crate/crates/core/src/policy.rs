//! Minimum-uncertainty dynamical system built from four GP models per frame.
//!
//! `gp_delta` predicts the attractor transition, `gp_gamma` a speed scaling,
//! `gp_angles` the sin/cos of the end-effector Euler angles and `gp_width` the
//! gripper opening. Orientation and gripper are read off the most correlated
//! training input so they never fall back to the prior far from the data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::gp::{Bounds, FitOptions, GpError, GpModel, Hyperparameters};
use crate::sim::Vec3;

pub const GAMMA_MIN: f64 = 0.1;
pub const GAMMA_MAX: f64 = 10.0;
pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("{model}: {source}")]
    Gp {
        model: &'static str,
        #[source]
        source: GpError,
    },
    #[error("policy has no frames")]
    NoFrames,
    #[error("frame index {0} out of range")]
    FrameOutOfRange(usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("inconsistent training data: {0}")]
    Inconsistent(String),
}

fn gp_err(model: &'static str) -> impl Fn(GpError) -> PolicyError {
    move |source| PolicyError::Gp { model, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameLabel {
    Object,
    Goal,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Vec3,
    pub label: FrameLabel,
}

impl Frame {
    pub fn global() -> Self {
        Self {
            origin: Vec3::zeros(),
            label: FrameLabel::Global,
        }
    }

    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        x - self.origin
    }

    pub fn to_world(&self, x: &Vec3) -> Vec3 {
        x + self.origin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EulerConvention {
    /// Roll about x, then pitch about the new y, then yaw about the new z.
    IntrinsicXyz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Dimensionless gain of the variance-descent term. The gain applied to
    /// the raw gradient is this times `l^2 / (sf^2 + sn^2)` of the transition
    /// model, so the pull-back rate does not depend on demo speed or scale.
    pub alpha_nominal: f64,
    /// N; bound on the stiffness-weighted stabilization displacement.
    pub alpha_cap: f64,
    /// Per-axis cap on the predicted transition, m.
    pub delta_bound: Option<f64>,
    /// Variance above which motion is arrested. `None` uses half of the
    /// prior variance of the transition model.
    pub confidence_threshold: Option<f64>,
    pub gamma_range: (f64, f64),
    /// Hardware gripper limit, m.
    pub w_max: f64,
    /// Turns the variance-descent term off (the gate is kept).
    pub uncertainty_minimization: bool,
    pub euler: EulerConvention,
    pub delta_correction_cap: f64,
    pub gamma_correction_cap: f64,
    pub width_correction_cap: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha_nominal: 1.0,
            alpha_cap: 15.0,
            delta_bound: None,
            confidence_threshold: None,
            gamma_range: (GAMMA_MIN, GAMMA_MAX),
            w_max: 0.08,
            uncertainty_minimization: true,
            euler: EulerConvention::IntrinsicXyz,
            delta_correction_cap: 0.005,
            gamma_correction_cap: 0.05,
            width_correction_cap: 0.002,
        }
    }
}

/// The four models for one reference frame. Inputs are frame-local positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameModels {
    pub frame: Frame,
    pub gp_delta: GpModel,
    pub gp_gamma: GpModel,
    pub gp_angles: GpModel,
    pub gp_width: GpModel,
}

/// Training data for one frame, positions already expressed in that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    /// Inputs of the transition and scaling models.
    pub transition_inputs: Vec<Vec3>,
    pub transitions: Vec<Vec3>,
    /// Inputs of the orientation and gripper models.
    pub positions: Vec<Vec3>,
    /// `[sin r, sin p, sin y, cos r, cos p, cos y]` per position.
    pub angles: Vec<[f64; 6]>,
    pub widths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub bounds: Bounds,
    pub seed: u64,
    pub restarts: usize,
    pub max_iterations: usize,
    pub max_fit_rows: Option<usize>,
    /// Observation noise of the scaling model.
    pub gamma_noise: f64,
}

/// Lengthscales between 4 cm and 50 cm: shorter ones make the policy
/// forget the motion within a few millimeters of the demonstration. The
/// noise floor of 1 mm keeps the fit from interpolating every wiggle.
pub fn demo_bounds() -> Bounds {
    Bounds::from_lengthscales((1e-3, 10.0), (0.04, 0.25), 3, (1e-3, 0.1))
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            bounds: demo_bounds(),
            seed: 0,
            restarts: 2,
            max_iterations: 100,
            max_fit_rows: Some(100),
            gamma_noise: 0.01,
        }
    }
}

fn vec_rows(v: &[Vec3]) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), 3, |i, j| v[i][j])
}

impl FrameModels {
    pub fn fit(
        frame: Frame,
        data: &FrameData,
        opts: &TrainOptions,
        config: &PolicyConfig,
    ) -> Result<Self, PolicyError> {
        if data.transition_inputs.len() != data.transitions.len()
            || data.positions.len() != data.angles.len()
            || data.positions.len() != data.widths.len()
        {
            return Err(PolicyError::Inconsistent("row counts differ".into()));
        }
        let fit = |seed_offset: u64| FitOptions {
            seed: opts.seed.wrapping_add(seed_offset),
            restarts: opts.restarts,
            max_iterations: opts.max_iterations,
            max_fit_rows: opts.max_fit_rows,
        };
        let x_delta = vec_rows(&data.transition_inputs);
        let y_delta = vec_rows(&data.transitions);
        let gp_delta = GpModel::fit_with(x_delta.clone(), y_delta, opts.bounds.clone(), &fit(0))
            .map_err(gp_err("gp_delta"))?
            .with_correction_cap(config.delta_correction_cap);

        // Neutral scaling on the transition support, sharing its lengthscales
        // so corrections spread like transition corrections do.
        let delta_hp = gp_delta.hyperparameters();
        let gamma_hp =
            Hyperparameters::new(1.0, delta_hp.inv_sq_lengthscales.clone(), opts.gamma_noise)
                .map_err(gp_err("gp_gamma"))?;
        let y_gamma = DMatrix::from_element(x_delta.nrows(), 1, 1.0);
        let gp_gamma = GpModel::new(x_delta, y_gamma, gamma_hp, opts.bounds.clone())
            .map_err(gp_err("gp_gamma"))?
            .with_prior_mean(&[1.0])
            .map_err(gp_err("gp_gamma"))?
            .with_correction_cap(config.gamma_correction_cap);

        let x_pos = vec_rows(&data.positions);
        let y_angles = DMatrix::from_fn(data.angles.len(), 6, |i, j| data.angles[i][j]);
        let gp_angles = GpModel::fit_with(x_pos.clone(), y_angles, opts.bounds.clone(), &fit(1))
            .map_err(gp_err("gp_angles"))?;
        let y_width = DMatrix::from_fn(data.widths.len(), 1, |i, _| data.widths[i]);
        let gp_width = GpModel::fit_with(x_pos, y_width, opts.bounds.clone(), &fit(2))
            .map_err(gp_err("gp_width"))?
            .with_correction_cap(config.width_correction_cap);

        Ok(Self {
            frame,
            gp_delta,
            gp_gamma,
            gp_angles,
            gp_width,
        })
    }

    pub fn model(&self, target: CorrectionTarget) -> &GpModel {
        match target {
            CorrectionTarget::Delta => &self.gp_delta,
            CorrectionTarget::Gamma => &self.gp_gamma,
            CorrectionTarget::Width => &self.gp_width,
        }
    }

    fn model_mut(&mut self, target: CorrectionTarget) -> &mut GpModel {
        match target {
            CorrectionTarget::Delta => &mut self.gp_delta,
            CorrectionTarget::Gamma => &mut self.gp_gamma,
            CorrectionTarget::Width => &mut self.gp_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionTarget {
    Delta,
    Gamma,
    Width,
}

impl CorrectionTarget {
    pub fn name(self) -> &'static str {
        match self {
            CorrectionTarget::Delta => "gp_delta",
            CorrectionTarget::Gamma => "gp_gamma",
            CorrectionTarget::Width => "gp_width",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub delta: Vec3,
    pub gamma: f64,
    pub alpha: f64,
    pub grad: Vec3,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorCommand {
    pub x_des: Vec3,
    pub theta_des: [f64; 3],
    pub w_des: f64,
    pub confidence_ok: bool,
    pub frame: usize,
    pub diagnostics: Diagnostics,
}

/// Scales the variance gradient so that `|K_s * alpha * grad| <= cap`.
pub fn modulate_alpha(grad: &Vec3, stiffness: &Vec3, alpha_cap: f64, alpha_nominal: f64) -> f64 {
    let force = stiffness.component_mul(grad).norm();
    if force == 0.0 {
        return alpha_nominal;
    }
    alpha_nominal.min(alpha_cap / force)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MudsPolicy {
    pub format_version: u32,
    pub models: Vec<FrameModels>,
    pub config: PolicyConfig,
}

impl MudsPolicy {
    pub fn new(models: Vec<FrameModels>, config: PolicyConfig) -> Result<Self, PolicyError> {
        if models.is_empty() {
            return Err(PolicyError::NoFrames);
        }
        Ok(Self {
            format_version: POLICY_FORMAT_VERSION,
            models,
            config,
        })
    }

    pub fn is_two_frame(&self) -> bool {
        self.models.len() == 2
    }

    pub fn frames(&self) -> Vec<Frame> {
        self.models.iter().map(|m| m.frame.clone()).collect()
    }

    pub fn frame_models(&self, frame: usize) -> Result<&FrameModels, PolicyError> {
        self.models
            .get(frame)
            .ok_or(PolicyError::FrameOutOfRange(frame))
    }

    /// Moves every frame with the given label to a new world origin.
    pub fn set_frame_origin(&mut self, label: FrameLabel, origin: Vec3) {
        for m in self.models.iter_mut().filter(|m| m.frame.label == label) {
            m.frame.origin = origin;
        }
    }

    /// Index of the active frame: object frame until the grasp latch fires.
    pub fn select_frame(&self, gripper_latched: bool) -> usize {
        if self.is_two_frame() && gripper_latched {
            1
        } else {
            0
        }
    }

    pub fn confidence_threshold(&self, frame: usize) -> Result<f64, PolicyError> {
        let fm = self.frame_models(frame)?;
        Ok(self
            .config
            .confidence_threshold
            .unwrap_or_else(|| 0.5 * fm.gp_delta.hyperparameters().prior_variance()))
    }

    /// Gain on the raw variance gradient before the force cap.
    pub fn alpha_base(&self, frame: usize) -> Result<f64, PolicyError> {
        let hp = self.frame_models(frame)?.gp_delta.hyperparameters();
        let mean_theta =
            hp.inv_sq_lengthscales.iter().sum::<f64>() / hp.inv_sq_lengthscales.len() as f64;
        Ok(self.config.alpha_nominal / (mean_theta * hp.prior_variance()))
    }

    pub fn variance(&self, frame: usize, x_world: &Vec3) -> Result<f64, PolicyError> {
        let fm = self.frame_models(frame)?;
        let local = fm.frame.to_local(x_world);
        Ok(fm
            .gp_delta
            .predict(local.as_slice())
            .map_err(gp_err("gp_delta"))?
            .variance)
    }

    /// Attractor, orientation and gripper width for a world position.
    pub fn compute_attractor(
        &self,
        frame: usize,
        x_world: &Vec3,
        stiffness: &Vec3,
    ) -> Result<AttractorCommand, PolicyError> {
        if !x_world.iter().all(|v| v.is_finite()) {
            return Err(PolicyError::NonFinite("position"));
        }
        let fm = self.frame_models(frame)?;
        let local = fm.frame.to_local(x_world);
        let q = local.as_slice();
        let post = fm.gp_delta.predict(q).map_err(gp_err("gp_delta"))?;
        let mut delta = Vec3::from_column_slice(&post.mean);
        if let Some(b) = self.config.delta_bound {
            delta = delta.map(|v| v.clamp(-b, b));
        }
        let (g_lo, g_hi) = self.config.gamma_range;
        let gamma = fm.gp_gamma.predict(q).map_err(gp_err("gp_gamma"))?.mean[0].clamp(g_lo, g_hi);
        let grad = Vec3::from_column_slice(
            &fm.gp_delta
                .variance_gradient(q)
                .map_err(gp_err("gp_delta"))?,
        );
        let alpha = if self.config.uncertainty_minimization {
            modulate_alpha(
                &grad,
                stiffness,
                self.config.alpha_cap,
                self.alpha_base(frame)?,
            )
        } else {
            0.0
        };
        let confidence_ok = post.variance <= self.confidence_threshold(frame)?;
        let x_des = if confidence_ok {
            x_world + gamma * delta - alpha * grad
        } else {
            *x_world
        };
        Ok(AttractorCommand {
            x_des,
            theta_des: self.infer_orientation(frame, x_world)?,
            w_des: self.infer_gripper(frame, x_world)?,
            confidence_ok,
            frame,
            diagnostics: Diagnostics {
                delta,
                gamma,
                alpha,
                grad,
                variance: post.variance,
            },
        })
    }

    pub fn infer_orientation(&self, frame: usize, x_world: &Vec3) -> Result<[f64; 3], PolicyError> {
        let fm = self.frame_models(frame)?;
        let local = fm.frame.to_local(x_world);
        let (i, _) = fm
            .gp_angles
            .mu_project(local.as_slice())
            .map_err(gp_err("gp_angles"))?;
        let sc = fm
            .gp_angles
            .predict_at_index(i)
            .map_err(gp_err("gp_angles"))?
            .mean;
        Ok([sc[0].atan2(sc[3]), sc[1].atan2(sc[4]), sc[2].atan2(sc[5])])
    }

    pub fn infer_gripper(&self, frame: usize, x_world: &Vec3) -> Result<f64, PolicyError> {
        let fm = self.frame_models(frame)?;
        let local = fm.frame.to_local(x_world);
        let (i, _) = fm
            .gp_width
            .mu_project(local.as_slice())
            .map_err(gp_err("gp_width"))?;
        let w = fm
            .gp_width
            .predict_at_index(i)
            .map_err(gp_err("gp_width"))?
            .mean[0];
        Ok(w.clamp(0.0, self.config.w_max))
    }

    /// Applies one correction at a world position to a model of `frame`.
    pub fn apply_correction(
        &mut self,
        frame: usize,
        target: CorrectionTarget,
        x_world: &Vec3,
        channel: usize,
        epsilon: f64,
    ) -> Result<(), PolicyError> {
        let fm = self
            .models
            .get_mut(frame)
            .ok_or(PolicyError::FrameOutOfRange(frame))?;
        let local = fm.frame.to_local(x_world);
        fm.model_mut(target)
            .apply_correction(local.as_slice(), channel, epsilon)
            .map_err(gp_err(target.name()))
    }
}

/// One-way latch deciding when the goal frame takes over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLatch {
    latched: bool,
}

impl FrameLatch {
    pub fn update(&mut self, holding_object: bool) -> bool {
        self.latched |= holding_object;
        self.latched
    }

    pub fn is_latched(&self) -> bool {
        self.latched
    }
}

pub fn angles_to_sincos(theta: &[f64; 3]) -> [f64; 6] {
    [
        theta[0].sin(),
        theta[1].sin(),
        theta[2].sin(),
        theta[0].cos(),
        theta[1].cos(),
        theta[2].cos(),
    ]
}
