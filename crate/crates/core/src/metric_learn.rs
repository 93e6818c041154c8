//! Learning a rotation metric from a sequence of measures by alternating
//! inner transport updates with descent on the metric parameters.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geodesic::QuadBasis;
use crate::lagrangian::{LagrangianSpec, MetricField, RotationMetric};
use crate::measure::EmpiricalMeasure;
use crate::nlot::{NlotConfig, NlotState, StepReport};
use crate::nn::{AdamConfig, AdamState, Mlp};

pub const DEFAULT_METRIC_RATE: f64 = 5e-3;
pub const DEFAULT_UPDATE_FREQUENCY: usize = 10;
pub const GRID_POINTS: usize = 20;
/// Fractional growth of the bounding box, split evenly between both sides.
pub const GRID_PADDING: f64 = 0.1;
pub const EIGEN_TIE: f64 = 1e-9;

const METRIC_BATCH_SALT: u64 = 0x6d65_7472_6963_5f62;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricLearnConfig {
    pub inner: NlotConfig,
    pub metric_hidden: Vec<usize>,
    pub metric_rate: f64,
    pub update_frequency: usize,
    /// Number of metric updates.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for MetricLearnConfig {
    fn default() -> Self {
        Self {
            inner: NlotConfig {
                potential_rate: (1e-4, 1e-4),
                conjugate_rate: (1e-4, 1e-4),
                predictor_rate: 1e-4,
                ..NlotConfig::default()
            },
            metric_hidden: vec![64, 64],
            metric_rate: DEFAULT_METRIC_RATE,
            update_frequency: DEFAULT_UPDATE_FREQUENCY,
            rounds: 100,
            seed: 0,
        }
    }
}

impl MetricLearnConfig {
    /// Inner configuration of pair `i`, which differs only in its seed.
    pub fn pair_config(&self, i: usize) -> NlotConfig {
        NlotConfig {
            seed: self.seed.wrapping_add(1 + i as u64),
            steps: self.rounds * self.update_frequency,
            ..self.inner.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    /// Mean frozen-path energy over the pairs, before the metric update.
    pub metric_energy: f64,
    /// Last inner dual loss of each pair.
    pub dual_losses: Vec<f64>,
    pub mean_conjugate_residual: f64,
}

#[derive(Clone, Debug)]
pub struct MetricLearnState {
    pub lag: LagrangianSpec,
    pub pairs: Vec<NlotState>,
    pub adam_metric: AdamState,
    pub update_frequency: usize,
    pub round: u64,
    pub seed: u64,
}

/// Center and scale used to normalize the rotation network's inputs.
pub fn normalization(measures: &[EmpiricalMeasure]) -> ([f64; 2], f64) {
    let all: Vec<f64> = measures.iter().flat_map(|m| m.points().iter().copied()).collect();
    let n = (all.len() / 2) as f64;
    let mut center = [0.0; 2];
    for p in all.chunks(2) {
        center[0] += p[0] / n;
        center[1] += p[1] / n;
    }
    let mut var = [0.0f64; 2];
    for p in all.chunks(2) {
        var[0] += (p[0] - center[0]).powi(2) / n;
        var[1] += (p[1] - center[1]).powi(2) / n;
    }
    let scale = var[0].max(var[1]).sqrt();
    (center, if scale > 0.0 { scale } else { 1.0 })
}

/// Mean path energy of frozen paths `x → y` with chord offsets `offsets`,
/// and its gradient in the rotation network parameters.
pub fn frozen_metric_grad(
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    x: &Tensor,
    y: &Tensor,
    offsets: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let rot = lag
        .learned()
        .ok_or_else(|| Error::InvalidArgument("metric gradients need a learned metric".into()))?;
    let mut tape = Tape::new();
    let p = rot.net.params_leaf(&mut tape);
    let (xv, yv, ov) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(offsets.clone()));
    let (e, l) = basis.record_energy(&mut tape, lag, xv, yv, ov, Some(p))?;
    basis.check_finite(&tape, l)?;
    let total = tape.sum(e)?;
    let mean = tape.scale(total, 1.0 / x.rows() as f64)?;
    let grad = tape.gradient(mean, &[p])?.remove(0).into_data();
    Ok((tape.value(mean).data()[0], grad))
}

/// Envelope gradient of pair `state`'s dual objective in the metric: the
/// c-transform points and the predicted paths are held fixed.
pub fn metric_grad(lag: &LagrangianSpec, state: &NlotState, x: &Tensor) -> Result<(f64, Vec<f64>)> {
    let conj = state.c_transform(lag, x)?;
    let offsets = state.predictor.offsets(x, &conj.points)?;
    frozen_metric_grad(lag, &state.basis, x, &conj.points, &offsets)
}

impl MetricLearnState {
    pub fn new(measures: &[EmpiricalMeasure], config: &MetricLearnConfig) -> Result<Self> {
        if measures.len() < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 measures, got {}", measures.len())));
        }
        if measures.iter().any(|m| m.dim() != 2) {
            return Err(Error::InvalidArgument("metric learning works in the plane".into()));
        }
        if config.update_frequency == 0 {
            return Err(Error::InvalidArgument("update frequency must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mut sizes = vec![2];
        sizes.extend_from_slice(&config.metric_hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, config.inner.slope, &mut rng)?;
        let (center, scale) = normalization(measures);
        let rot = RotationMetric::new(net)?.with_normalization(center, scale);
        let pairs = (0..measures.len() - 1)
            .map(|i| NlotState::new(2, &config.pair_config(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adam_metric: AdamState::new(AdamConfig::constant(config.metric_rate), rot.net.params().len())?,
            lag: LagrangianSpec::Metric(MetricField::Learned(rot)),
            pairs,
            update_frequency: config.update_frequency,
            round: 0,
            seed: config.seed,
        })
    }

    pub fn metric(&self) -> &RotationMetric {
        self.lag.learned().expect("constructed with a learned metric")
    }

    pub fn metric_field(&self) -> MetricField {
        MetricField::Learned(self.metric().clone())
    }

    /// `steps` inner iterations of every pair under the current metric.
    pub fn inner_steps(&mut self, measures: &[EmpiricalMeasure], steps: usize) -> Result<Vec<StepReport>> {
        self.check(measures)?;
        let lag = &self.lag;
        self.pairs
            .par_iter_mut()
            .enumerate()
            .map(|(i, pair)| {
                let mut last = None;
                pair.train(&measures[i], &measures[i + 1], lag, steps, |_, r| {
                    last = Some(r.clone());
                    Ok(())
                })?;
                Ok(last.unwrap_or(StepReport {
                    step: pair.step,
                    dual_loss: f64::NAN,
                    mean_conjugate_residual: f64::NAN,
                    mean_path_energy: f64::NAN,
                    line_search_failures: 0,
                }))
            })
            .collect()
    }

    fn check(&self, measures: &[EmpiricalMeasure]) -> Result<()> {
        if measures.len() != self.pairs.len() + 1 {
            return Err(Error::Dimension { expected: self.pairs.len() + 1, got: measures.len() });
        }
        Ok(())
    }

    /// Metric gradient averaged over pairs, each on a fresh batch from its
    /// source measure.
    pub fn averaged_metric_grad(&self, measures: &[EmpiricalMeasure]) -> Result<(f64, Vec<f64>)> {
        self.check(measures)?;
        let k = self.pairs.len();
        let parts = self
            .pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ METRIC_BATCH_SALT);
                rng.set_stream(self.round * k as u64 + i as u64);
                let x = measures[i].minibatch(pair.batch, &mut rng);
                metric_grad(&self.lag, pair, &x)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; self.metric().net.params().len()];
        let mut energy = 0.0;
        for (e, g) in &parts {
            energy += e / k as f64;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / k as f64;
            }
        }
        Ok((energy, grad))
    }

    /// Descent step on the metric; inner states are untouched.
    pub fn metric_step(&mut self, measures: &[EmpiricalMeasure]) -> Result<f64> {
        let (energy, grad) = self.averaged_metric_grad(measures)?;
        let rot = self.lag.learned_mut().expect("constructed with a learned metric");
        self.adam_metric.step(rot.net.params_mut(), &grad)?;
        Ok(energy)
    }

    /// Inner updates for every pair, then one metric update.
    pub fn round(&mut self, measures: &[EmpiricalMeasure]) -> Result<RoundReport> {
        let reports = self.inner_steps(measures, self.update_frequency)?;
        let metric_energy = self.metric_step(measures)?;
        let report = RoundReport {
            round: self.round,
            metric_energy,
            dual_losses: reports.iter().map(|r| r.dual_loss).collect(),
            mean_conjugate_residual: reports.iter().map(|r| r.mean_conjugate_residual).sum::<f64>()
                / reports.len() as f64,
        };
        self.round += 1;
        Ok(report)
    }

    pub fn train<F>(&mut self, measures: &[EmpiricalMeasure], rounds: usize, mut observer: F) -> Result<()>
    where
        F: FnMut(&MetricLearnState, &RoundReport) -> Result<()>,
    {
        for _ in 0..rounds {
            let report = self.round(measures)?;
            observer(self, &report)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.push_vector("metric", self.metric().net.params().to_vec());
        self.adam_metric.save("adam_metric", &mut ckpt);
        ckpt.push_scalar("round", self.round as f64);
        for (i, pair) in self.pairs.iter().enumerate() {
            pair.to_checkpoint(&mut ckpt, &format!("pair{i}."));
        }
        ckpt.save(dir)
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let ckpt = Checkpoint::load(dir)?;
        let len = self.metric().net.params().len();
        let params = ckpt.vector("metric", len)?;
        self.lag.learned_mut().expect("learned metric").net.set_params(params)?;
        self.adam_metric.load("adam_metric", &ckpt)?;
        self.round = ckpt.scalar("round")? as u64;
        for (i, pair) in self.pairs.iter_mut().enumerate() {
            pair.restore(&ckpt, &format!("pair{i}."))?;
        }
        Ok(())
    }
}

/// Trains from scratch for `config.rounds` rounds.
pub fn train_metric(measures: &[EmpiricalMeasure], config: &MetricLearnConfig) -> Result<MetricLearnState> {
    let mut state = MetricLearnState::new(measures, config)?;
    state.train(measures, config.rounds, |_, _| Ok(()))?;
    Ok(state)
}

/// Uniform `n × n` grid over the bounding box of all samples, grown by
/// [`GRID_PADDING`] of its extent.
pub fn evaluation_grid(measures: &[EmpiricalMeasure], n: usize) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for m in measures {
        for (c, (a, b)) in m.bounds().into_iter().enumerate().take(2) {
            lo[c] = lo[c].min(a);
            hi[c] = hi[c].max(b);
        }
    }
    for c in 0..2 {
        let pad = 0.5 * GRID_PADDING * (hi[c] - lo[c]);
        lo[c] -= pad;
        hi[c] += pad;
    }
    let at = |c: usize, i: usize| {
        if n == 1 {
            0.5 * (lo[c] + hi[c])
        } else {
            lo[c] + (hi[c] - lo[c]) * i as f64 / (n - 1) as f64
        }
    };
    (0..n).flat_map(|i| (0..n).map(move |j| [at(0, i), at(1, j)])).collect()
}

fn check_symmetric(a: [[f64; 2]; 2]) -> Result<()> {
    let scale = a[0][1].abs().max(a[1][0].abs()).max(1.0);
    if (a[0][1] - a[1][0]).abs() > 1e-12 * scale || a.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Eigen(format!("matrix {a:?} is not finite and symmetric")));
    }
    Ok(())
}

/// Alignment of two metric fields: mean over grid points and eigen-indices
/// of `|uᵢ · ûᵢ|`, eigenvectors paired by ascending eigenvalue. Points where
/// either field is undefined or has a repeated eigenvalue are skipped.
pub fn alignment_score(a: &MetricField, b: &MetricField, grid: &[[f64; 2]]) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for p in grid {
        let (Ok(ma), Ok(mb)) = (a.value(p), b.value(p)) else { continue };
        check_symmetric(ma.to_array())?;
        check_symmetric(mb.to_array())?;
        let (la, ua) = ma.eigen();
        let (lb, ub) = mb.eigen();
        if (la[1] - la[0]).abs() < EIGEN_TIE || (lb[1] - lb[0]).abs() < EIGEN_TIE {
            continue;
        }
        for i in 0..2 {
            total += (ua[i][0] * ub[i][0] + ua[i][1] * ub[i][1]).abs();
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no grid point has well-defined eigenvectors in both fields".into()));
    }
    Ok(total / (2 * used) as f64)
}

/// Metric values over `grid` as CSV `x1,x2,a11,a12,a22`; undefined points
/// are left out.
pub fn write_metric_csv<W: Write>(out: &mut W, metric: &MetricField, grid: &[[f64; 2]]) -> Result<()> {
    writeln!(out, "x1,x2,a11,a12,a22")?;
    for p in grid {
        if let Ok(m) = metric.value(p) {
            writeln!(out, "{},{},{},{},{}", p[0], p[1], m.a11, m.a12, m.a22)?;
        }
    }
    Ok(())
}
