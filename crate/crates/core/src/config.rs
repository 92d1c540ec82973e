//! Experiment configuration. Keys follow the usual hyperparameter table:
//! `n`, `n_a`, `n_train`, `T`, `L`, cost function, forward schedule and
//! ancilla type, plus the optimizer settings the table leaves open.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ansatz::AncillaKind;
use crate::error::{Error, Result};
use crate::forward::{NoiseSchedule, ScheduleKind, DEFAULT_EPSILON};
use crate::losses::DistanceKind;
use crate::metrics::DEFAULT_HISTOGRAM_BINS;
use crate::state::QUBIT_CAP;
use crate::tasks::TaskSpec;
use crate::trainer::{AdamConfig, GradientEngine, InitScheme, MeasurementKind, TrainConfig};

/// Ancilla registers up to this size enumerate every outcome by default.
pub const ENUMERATE_MAX_ANCILLAS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Linear,
    Cosine,
    CosineSquare,
    /// Needs `schedule_exponent`.
    CosineExponent,
}

impl ScheduleName {
    pub const ALL: [ScheduleName; 3] = [ScheduleName::Linear, ScheduleName::Cosine, ScheduleName::CosineSquare];

    pub fn kind(self, exponent: Option<u32>, epsilon: f64) -> Result<ScheduleKind> {
        let k = match (self, exponent) {
            (ScheduleName::Linear, None) => return Ok(ScheduleKind::Linear),
            (ScheduleName::Cosine, None) => 1,
            (ScheduleName::CosineSquare, None) => 2,
            (ScheduleName::CosineExponent, Some(k)) => k,
            (ScheduleName::CosineExponent, None) => {
                return Err(Error::InvalidArgument("cosine_exponent schedule needs schedule_exponent".into()))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "schedule_exponent only applies to the cosine_exponent schedule".into(),
                ))
            }
        };
        Ok(ScheduleKind::CosineExponent { k, epsilon })
    }
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_init() -> InitScheme {
    InitScheme::Xavier
}

fn default_engine() -> GradientEngine {
    GradientEngine::Adjoint
}

fn default_bins() -> usize {
    DEFAULT_HISTOGRAM_BINS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub n: usize,
    pub n_a: usize,
    pub n_train: usize,
    /// Defaults to `n_train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub cost_function: DistanceKind,
    pub forward_schedule: ScheduleName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_exponent: Option<u32>,
    #[serde(default = "default_epsilon")]
    pub schedule_epsilon: f64,
    pub ancilla_type: AncillaKind,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_engine")]
    pub engine: GradientEngine,
    /// Defaults to enumerate for small ancilla registers, stochastic above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<MeasurementKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Shared defaults; callers fill in the task-specific fields.
    fn base(task: TaskSpec, n: usize, n_train: usize, steps: usize, layers: usize) -> Self {
        Self {
            task,
            n,
            n_a: 2,
            n_train,
            n_test: None,
            steps,
            layers,
            cost_function: DistanceKind::Wasserstein,
            forward_schedule: ScheduleName::Cosine,
            schedule_exponent: None,
            schedule_epsilon: DEFAULT_EPSILON,
            ancilla_type: AncillaKind::AllZero,
            init: InitScheme::Xavier,
            optimizer: AdamConfig::default(),
            engine: GradientEngine::Adjoint,
            mode: None,
            seed: 0,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            output_dir: None,
        }
    }

    /// One qubit, 100 samples, `T = 6`, `L = 4`, Wasserstein, cosine schedule.
    pub fn clustered(ancilla: AncillaKind) -> Self {
        Self { ancilla_type: ancilla, ..Self::base(TaskSpec::clustered(), 1, 100, 6, 4) }
    }

    /// One qubit, 200 samples, `L = 8`, Wasserstein, cosine-square schedule.
    /// Haar ancillas run with `T = 4`, zero ancillas with `T = 6`.
    pub fn circular(ancilla: AncillaKind) -> Self {
        let steps = if ancilla == AncillaKind::HaarFirst { 4 } else { 6 };
        Self {
            ancilla_type: ancilla,
            forward_schedule: ScheduleName::CosineSquare,
            ..Self::base(TaskSpec::circular(), 1, 200, steps, 8)
        }
    }

    /// Four-qubit TFIM ground states, 100 samples, `T = 6`, `L = 12`, MMD.
    /// The optimizer runs longer and hotter than the default; with the
    /// default settings the MMD loss stalls well above its floor.
    pub fn many_body(schedule: ScheduleName) -> Self {
        Self {
            cost_function: DistanceKind::Mmd,
            forward_schedule: schedule,
            optimizer: AdamConfig { iterations: 600, lr: 0.1, decay: 0.997, ..AdamConfig::default() },
            ..Self::base(TaskSpec::many_body(), 4, 100, 6, 12)
        }
    }

    pub fn n_test(&self) -> usize {
        self.n_test.unwrap_or(self.n_train)
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        self.forward_schedule.kind(self.schedule_exponent, self.schedule_epsilon)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_kind(self.schedule_kind()?, self.steps)
    }

    pub fn mode(&self) -> MeasurementKind {
        self.mode.unwrap_or(if self.n_a <= ENUMERATE_MAX_ANCILLAS {
            MeasurementKind::Enumerate
        } else {
            MeasurementKind::Stochastic
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_anc: self.n_a,
            layers: self.layers,
            ancilla: self.ancilla_type,
            loss: self.cost_function,
            init: self.init,
            optimizer: self.optimizer,
            engine: self.engine,
            mode: self.mode(),
            seed: self.seed,
        }
    }

    /// Checks what the data and the forward process need. Forward-only runs
    /// may exceed the simulator's register cap on the backward side.
    pub fn validate_forward(&self) -> Result<()> {
        self.task.validate(self.n)?;
        if self.n_train == 0 || self.n_test() == 0 {
            return Err(Error::InvalidArgument("n_train and n_test must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("T must be positive".into()));
        }
        self.schedule()?;
        Ok(())
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN settings fail too
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.validate_forward()?;
        if self.n_a == 0 {
            return bad("n_a must be at least 1".into());
        }
        if self.n + self.n_a > QUBIT_CAP {
            return Err(Error::QubitCap { requested: self.n + self.n_a, cap: QUBIT_CAP });
        }
        if self.layers == 0 {
            return bad("L must be positive".into());
        }
        let o = &self.optimizer;
        if o.iterations == 0 {
            return bad("optimizer.iterations must be positive".into());
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.decay > 0.0 && o.decay <= 1.0) {
            return bad(format!("optimizer lr {} / decay {} out of range", o.lr, o.decay));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return bad("Adam constants out of range".into());
        }
        let mode = match self.mode() {
            MeasurementKind::Enumerate => crate::ansatz::MeasurementMode::Enumerate,
            MeasurementKind::Stochastic => {
                crate::ansatz::MeasurementMode::Stochastic(crate::rng::StreamKey::new(0, crate::rng::Purpose::Loss))
            }
        };
        self.engine.validate(mode)?;
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for a in [AncillaKind::AllZero, AncillaKind::HaarFirst] {
            ExperimentConfig::clustered(a).validate().unwrap();
            ExperimentConfig::circular(a).validate().unwrap();
        }
        for s in ScheduleName::ALL {
            ExperimentConfig::many_body(s).validate().unwrap();
        }
        assert_eq!(ExperimentConfig::circular(AncillaKind::HaarFirst).steps, 4);
    }

    #[test]
    fn schedule_names() {
        assert_eq!(ScheduleName::Linear.kind(None, 0.008).unwrap(), ScheduleKind::Linear);
        assert_eq!(
            ScheduleName::CosineSquare.kind(None, 0.01).unwrap(),
            ScheduleKind::CosineExponent { k: 2, epsilon: 0.01 }
        );
        assert!(ScheduleName::CosineExponent.kind(None, 0.008).is_err());
        assert!(ScheduleName::Cosine.kind(Some(3), 0.008).is_err());
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = ExperimentConfig::clustered(AncillaKind::AllZero);
        c.n = 2;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::many_body(ScheduleName::Linear);
        c.n_a = 7;
        assert!(matches!(c.validate(), Err(Error::QubitCap { .. })));
        let mut c = ExperimentConfig::many_body(ScheduleName::Linear);
        c.mode = Some(MeasurementKind::Stochastic);
        c.engine = GradientEngine::ParamShift;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::clustered(AncillaKind::AllZero);
        c.optimizer.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_mode_follows_ancilla_count() {
        let mut c = ExperimentConfig::many_body(ScheduleName::Linear);
        assert_eq!(c.mode(), MeasurementKind::Enumerate);
        c.n_a = 4;
        assert_eq!(c.mode(), MeasurementKind::Stochastic);
    }
}
