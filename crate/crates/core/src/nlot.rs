//! Dual training of a Kantorovich potential under a Lagrangian cost, with an
//! amortized c-transform, L-BFGS refinement, and an amortized spline
//! predictor for the transport paths.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geodesic::{
    predictor_loss_and_grad, solve_geodesics, EnergyQuadrature, QuadBasis, SplinePredictor, DEFAULT_GEODESIC_RATE,
};
use crate::lagrangian::LagrangianSpec;
use crate::measure::EmpiricalMeasure;
use crate::nn::{lbfgs_minimize_batch, AdamConfig, AdamState, CosineSchedule, LbfgsConfig, Mlp, DEFAULT_LEAKY_SLOPE};
use crate::spline::PathSpline;

/// Residuals below this are left out of the conjugate regression.
pub const RESIDUAL_GUARD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct NlotConfig {
    pub knots: usize,
    pub quad_nodes: usize,
    pub potential_hidden: Vec<usize>,
    pub conjugate_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub slope: f64,
    pub potential_rate: (f64, f64),
    pub conjugate_rate: (f64, f64),
    pub predictor_rate: f64,
    pub batch: usize,
    pub lbfgs: LbfgsConfig,
    /// Length of the cosine schedules.
    pub steps: usize,
    pub seed: u64,
}

impl Default for NlotConfig {
    fn default() -> Self {
        Self {
            knots: 30,
            quad_nodes: 100,
            potential_hidden: vec![64; 4],
            conjugate_hidden: vec![64; 4],
            predictor_hidden: vec![1024, 1024],
            slope: DEFAULT_LEAKY_SLOPE,
            potential_rate: (1e-4, 1e-2),
            conjugate_rate: (1e-4, 1e-2),
            predictor_rate: 1e-4,
            batch: 1024,
            lbfgs: LbfgsConfig::default(),
            steps: 1000,
            seed: 0,
        }
    }
}

impl NlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.knots < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 knots, got {}", self.knots)));
        }
        self.lbfgs.validate()
    }
}

/// Result of the c-transform for a batch of source points.
#[derive(Clone, Debug)]
pub struct Conjugates {
    /// Minimizers ŷ as a `[B, d]` tensor.
    pub points: Tensor,
    /// `J(ŷ) = c(x, ŷ) − g(ŷ)`, the c-transform values.
    pub values: Vec<f64>,
    pub warm_values: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Line search gave up; the point is the best iterate found.
    pub flagged: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub dual_loss: f64,
    pub mean_conjugate_residual: f64,
    pub mean_path_energy: f64,
    pub line_search_failures: usize,
}

#[derive(Clone, Debug)]
pub struct NlotState {
    pub g: Mlp,
    /// Residual network: y_ζ(x) = x + net(x).
    pub y_zeta: Mlp,
    pub predictor: SplinePredictor,
    pub adam_g: AdamState,
    pub adam_y: AdamState,
    pub adam_eta: AdamState,
    pub basis: QuadBasis,
    pub lbfgs: LbfgsConfig,
    pub batch: usize,
    pub step: u64,
    pub seed: u64,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn stack(rows: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    Tensor::matrix(rows.len(), dim, rows.concat())
}

impl NlotState {
    pub fn new(dim: usize, config: &NlotConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let sizes = |hidden: &[usize], out: usize| {
            let mut s = vec![dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let g = Mlp::new(&sizes(&config.potential_hidden, 1), config.slope, &mut rng)?;
        let mut y_zeta = Mlp::new(&sizes(&config.conjugate_hidden, dim), config.slope, &mut rng)?;
        y_zeta.zero_output_layer();
        let predictor = SplinePredictor::new(dim, config.knots, &config.predictor_hidden, config.slope, &mut rng)?;
        let total = config.steps as u64;
        let schedule = |(start, end): (f64, f64)| AdamConfig::new(CosineSchedule { start, end, total_steps: total });
        Ok(Self {
            adam_g: AdamState::new(schedule(config.potential_rate), g.params().len())?,
            adam_y: AdamState::new(schedule(config.conjugate_rate), y_zeta.params().len())?,
            adam_eta: AdamState::new(AdamConfig::constant(config.predictor_rate), predictor.net.params().len())?,
            g,
            y_zeta,
            predictor,
            basis: QuadBasis::new(config.knots, EnergyQuadrature::new(config.quad_nodes)?)?,
            lbfgs: config.lbfgs,
            batch: config.batch,
            step: 0,
            seed: config.seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.input_dim()
    }

    pub fn potential(&self, y: &Tensor) -> Result<Vec<f64>> {
        Ok(self.g.forward(y)?.into_data())
    }

    pub fn warm_start(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.y_zeta.forward(x)?;
        for (o, xi) in out.data_mut().iter_mut().zip(x.data()) {
            *o += xi;
        }
        Ok(out)
    }

    /// `J(y; x) = c(x, y) − g(y)` per row with the predictor's path, and its
    /// gradient in `y` (through the predicted offsets as well).
    pub fn conjugate_objective(&self, lag: &LagrangianSpec, x: &Tensor, y: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let rows = x.rows();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.input(y.clone());
        let pp = self.predictor.net.params_const(&mut tape);
        let off = self.predictor.record_offsets(&mut tape, xv, yv, pp)?;
        let (energy, _) = self.basis.record_energy(&mut tape, lag, xv, yv, off, None)?;
        let gp = self.g.params_const(&mut tape);
        let gy = self.g.record(&mut tape, yv, gp)?;
        let gy = tape.reshape(gy, &[rows])?;
        let j = tape.sub(energy, gy)?;
        let total = tape.sum(j)?;
        let grad = tape.gradient(total, &[yv])?.remove(0);
        Ok((tape.value(j).data().to_vec(), grad))
    }

    /// c-transform minimizers from the amortized warm start.
    pub fn c_transform(&self, lag: &LagrangianSpec, x: &Tensor) -> Result<Conjugates> {
        let warm = self.warm_start(x)?;
        self.c_transform_from(lag, x, &warm)
    }

    /// L-BFGS on `J(·; x)` for every row of `x` from the rows of `start`.
    pub fn c_transform_from(&self, lag: &LagrangianSpec, x: &Tensor, start: &Tensor) -> Result<Conjugates> {
        let d = self.dim();
        if x.cols() != d || start.shape() != x.shape() {
            return Err(Error::Dimension { expected: d, got: x.cols() });
        }
        let xs = rows_of(x);
        let mut failure = None;
        let outcomes = lbfgs_minimize_batch(
            |ids, points| {
                let sub: Vec<Vec<f64>> = ids.iter().map(|&i| xs[i].clone()).collect();
                let result = stack(&sub, d)
                    .and_then(|xt| Ok((xt, stack(points, d)?)))
                    .and_then(|(xt, yt)| self.conjugate_objective(lag, &xt, &yt));
                match result {
                    Ok((values, grad)) => (values, rows_of(&grad)),
                    Err(e) => {
                        failure.get_or_insert(e);
                        (vec![f64::NAN; ids.len()], vec![vec![f64::NAN; d]; ids.len()])
                    }
                }
            },
            rows_of(start),
            &self.lbfgs,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let outcomes = outcomes?;
        let points: Vec<Vec<f64>> = outcomes.iter().map(|o| o.point.clone()).collect();
        Ok(Conjugates {
            points: stack(&points, d)?,
            values: outcomes.iter().map(|o| o.value).collect(),
            warm_values: outcomes.iter().map(|o| o.trace[0]).collect(),
            iterations: outcomes.iter().map(|o| o.iterations).collect(),
            flagged: outcomes.iter().map(|o| o.line_search_failed).collect(),
        })
    }

    /// Monte-Carlo dual objective `mean g^c(x) + mean g(y)` and its gradient
    /// in the potential parameters, with the minimizers held constant.
    pub fn dual_loss_and_grad(&self, lag: &LagrangianSpec, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<f64>, Conjugates)> {
        let conj = self.c_transform(lag, x)?;
        let (loss, grad) = self.dual_from_conjugates(&conj, y)?;
        Ok((loss, grad, conj))
    }

    fn dual_from_conjugates(&self, conj: &Conjugates, y: &Tensor) -> Result<(f64, Vec<f64>)> {
        let (nx, ny) = (conj.points.rows(), y.rows());
        let mut tape = Tape::new();
        let p = self.g.params_leaf(&mut tape);
        let yh = tape.constant(conj.points.clone());
        let yv = tape.constant(y.clone());
        let g_hat = self.g.record(&mut tape, yh, p)?;
        let g_y = self.g.record(&mut tape, yv, p)?;
        if let Some(i) = tape.value(g_y).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("potential at target sample {i}")));
        }
        let s_hat = tape.sum(g_hat)?;
        let s_hat = tape.scale(s_hat, -1.0 / nx as f64)?;
        let s_y = tape.sum(g_y)?;
        let s_y = tape.scale(s_y, 1.0 / ny as f64)?;
        let obj = tape.add(s_hat, s_y)?;
        let grad = tape.gradient(obj, &[p])?.remove(0).into_data();
        let conj_mean = conj.values.iter().sum::<f64>() / nx as f64;
        let g_mean = tape.value(g_y).data().iter().sum::<f64>() / ny as f64;
        let loss = conj_mean + g_mean;
        if !loss.is_finite() {
            let i = conj.values.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite(format!("dual loss {loss} (source sample {i})")));
        }
        Ok((loss, grad))
    }

    /// Mean residual `‖ŷ − y_ζ(x)‖` and the gradient of that mean in the
    /// conjugate network parameters.
    fn conjugate_regression(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
        let warm = self.warm_start(x)?;
        let (rows, d) = (x.rows(), x.cols());
        let mut coeff = vec![0.0; rows * d];
        let mut total = 0.0;
        for r in 0..rows {
            let res: Vec<f64> = target.row(r).iter().zip(warm.row(r)).map(|(a, b)| a - b).collect();
            let norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += norm;
            if norm >= RESIDUAL_GUARD {
                for (c, v) in res.iter().enumerate() {
                    coeff[r * d + c] = -v / (norm * rows as f64);
                }
            }
        }
        let mut tape = Tape::new();
        let p = self.y_zeta.params_leaf(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.y_zeta.record(&mut tape, xv, p)?;
        let cv = tape.constant(Tensor::matrix(rows, d, coeff)?);
        let prod = tape.mul(out, cv)?;
        let lin = tape.sum(prod)?;
        let grad = tape.gradient(lin, &[p])?.remove(0).into_data();
        Ok((total / rows as f64, grad))
    }

    /// One iteration: c-transform, then the potential, conjugate and
    /// predictor updates in that order.
    pub fn train_step(&mut self, lag: &LagrangianSpec, x: &Tensor, y: &Tensor) -> Result<StepReport> {
        let (dual_loss, grad, conj) = self.dual_loss_and_grad(lag, x, y)?;
        let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.adam_g.step(self.g.params_mut(), &ascent)?;

        let (residual, grad_y) = self.conjugate_regression(x, &conj.points)?;
        self.adam_y.step(self.y_zeta.params_mut(), &grad_y)?;

        let (energy, grad_eta) = predictor_loss_and_grad(lag, &self.basis, &self.predictor, x, &conj.points)?;
        self.adam_eta.step(self.predictor.net.params_mut(), &grad_eta)?;

        let report = StepReport {
            step: self.step,
            dual_loss,
            mean_conjugate_residual: residual,
            mean_path_energy: energy,
            line_search_failures: conj.flagged.iter().filter(|f| **f).count(),
        };
        self.step += 1;
        Ok(report)
    }

    /// Minibatches for the current step; depends only on the seed and the
    /// step counter, so resumed runs draw the same batches.
    pub fn sample_batch(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step);
        let x = mu.minibatch(self.batch, &mut rng);
        let y = nu.minibatch(self.batch, &mut rng);
        (x, y)
    }

    /// Runs `steps` iterations, calling `observer` after each.
    pub fn train<F>(
        &mut self,
        mu: &EmpiricalMeasure,
        nu: &EmpiricalMeasure,
        lag: &LagrangianSpec,
        steps: usize,
        mut observer: F,
    ) -> Result<()>
    where
        F: FnMut(&NlotState, &StepReport) -> Result<()>,
    {
        if mu.dim() != self.dim() || nu.dim() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: mu.dim().max(nu.dim()) });
        }
        for _ in 0..steps {
            let (x, y) = self.sample_batch(mu, nu);
            let report = self.train_step(lag, &x, &y)?;
            observer(self, &report)?;
        }
        Ok(())
    }

    /// c-transform minimizers of every sample, in batches.
    pub fn push_forward(&self, lag: &LagrangianSpec, samples: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut out = Vec::with_capacity(samples.points().len());
        for chunk in idx.chunks(self.batch) {
            let conj = self.c_transform(lag, &samples.gather(chunk))?;
            out.extend_from_slice(conj.points.data());
        }
        let pushed = EmpiricalMeasure::new(samples.dim(), out)?;
        Ok(match samples.index {
            Some(i) => pushed.with_index(i),
            None => pushed,
        })
    }

    /// Mean `‖ŷ − y_ζ(x)‖` over `x`.
    pub fn mean_conjugate_residual(&self, lag: &LagrangianSpec, x: &Tensor) -> Result<f64> {
        let conj = self.c_transform(lag, x)?;
        let warm = self.warm_start(x)?;
        let total: f64 = (0..x.rows())
            .map(|r| conj.points.row(r).iter().zip(warm.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum();
        Ok(total / x.rows() as f64)
    }

    /// Transport paths from each source to its image, refined by
    /// `fine_tune_steps` Adam steps on the path energy. Returns the paths
    /// and their energies.
    pub fn transport_paths(
        &self,
        lag: &LagrangianSpec,
        sources: &EmpiricalMeasure,
        fine_tune_steps: usize,
    ) -> Result<(Vec<PathSpline>, Vec<f64>)> {
        let pushed = self.push_forward(lag, sources)?;
        let (x, y) = (sources.to_tensor(), pushed.to_tensor());
        let off = self.predictor.offsets(&x, &y)?.into_data();
        let out = solve_geodesics(lag, &self.basis, &x, &y, off, fine_tune_steps, DEFAULT_GEODESIC_RATE)?;
        let w = self.predictor.width();
        let paths = (0..x.rows())
            .map(|r| self.basis.spline(x.row(r), y.row(r), &out.offsets[r * w..(r + 1) * w]))
            .collect::<Result<Vec<_>>>()?;
        Ok((paths, out.energies))
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push_vector(&format!("{prefix}g"), self.g.params().to_vec());
        ckpt.push_vector(&format!("{prefix}y_zeta"), self.y_zeta.params().to_vec());
        ckpt.push_vector(&format!("{prefix}predictor"), self.predictor.net.params().to_vec());
        self.adam_g.save(&format!("{prefix}adam_g"), ckpt);
        self.adam_y.save(&format!("{prefix}adam_y"), ckpt);
        self.adam_eta.save(&format!("{prefix}adam_eta"), ckpt);
        ckpt.push_scalar(&format!("{prefix}step"), self.step as f64);
    }

    /// Restores parameters, optimizer moments and the step counter into a
    /// state built from the same configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let g = ckpt.vector(&format!("{prefix}g"), self.g.params().len())?;
        let y = ckpt.vector(&format!("{prefix}y_zeta"), self.y_zeta.params().len())?;
        let p = ckpt.vector(&format!("{prefix}predictor"), self.predictor.net.params().len())?;
        self.g.set_params(g)?;
        self.y_zeta.set_params(y)?;
        self.predictor.net.set_params(p)?;
        self.adam_g.load(&format!("{prefix}adam_g"), ckpt)?;
        self.adam_y.load(&format!("{prefix}adam_y"), ckpt)?;
        self.adam_eta.load(&format!("{prefix}adam_eta"), ckpt)?;
        self.step = ckpt.scalar(&format!("{prefix}step"))? as u64;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        self.to_checkpoint(&mut ckpt, "");
        ckpt.save(dir)
    }

    pub fn load(&mut self, dir: &Path) -> Result<()> {
        self.restore(&Checkpoint::load(dir)?, "")
    }
}

/// Fresh state trained for `config.steps` iterations.
pub fn train_nlot(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    lag: &LagrangianSpec,
    config: &NlotConfig,
) -> Result<NlotState> {
    let mut state = NlotState::new(mu.dim(), config)?;
    state.train(mu, nu, lag, config.steps, |_, _| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> NlotConfig {
        NlotConfig {
            knots: 6,
            quad_nodes: 16,
            potential_hidden: vec![8, 8],
            conjugate_hidden: vec![8],
            predictor_hidden: vec![8],
            batch: 8,
            steps: 10,
            ..NlotConfig::default()
        }
    }

    fn linear_potential(state: &mut NlotState, a: [f64; 2], b: f64) {
        state.g = Mlp::from_params(&[2, 1], vec![a[0], a[1], b], DEFAULT_LEAKY_SLOPE).unwrap();
    }

    fn points(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.concat()).unwrap()
    }

    fn kinetic() -> LagrangianSpec {
        LagrangianSpec::Kinetic
    }

    #[test]
    fn zero_potential_keeps_points() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        s.g.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = points(&[[0.3, -0.2], [1.0, 2.0]]);
        let c = s.c_transform(&kinetic(), &x).unwrap();
        for (a, b) in c.points.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(c.values.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn linear_potential_shifts_by_its_slope() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        linear_potential(&mut s, [0.5, 0.0], 0.0);
        let c = s.c_transform(&kinetic(), &points(&[[1.0, 0.0]])).unwrap();
        assert!((c.points.data()[0] - 1.5).abs() < 1e-6 && c.points.data()[1].abs() < 1e-6);
        assert!((c.values[0] + 0.625).abs() < 1e-6);
        assert!(c.values[0] <= c.warm_values[0]);
    }

    #[test]
    fn optimal_warm_start_is_kept() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        linear_potential(&mut s, [0.5, 0.0], 0.0);
        let x = points(&[[1.0, 0.0]]);
        let c = s.c_transform_from(&kinetic(), &x, &points(&[[1.5, 0.0]])).unwrap();
        assert!(c.iterations[0] <= 1);
        assert!((c.points.data()[0] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn constant_shift_of_potential_shifts_conjugate() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        let x = points(&[[0.2, 0.1], [-0.4, 0.3]]);
        let before = s.c_transform(&kinetic(), &x).unwrap();
        let n = s.g.params().len();
        s.g.params_mut()[n - 1] += 0.75;
        let after = s.c_transform(&kinetic(), &x).unwrap();
        for (a, b) in before.values.iter().zip(&after.values) {
            assert!((b - (a - 0.75)).abs() < 1e-9, "{a} {b}");
        }
        // the dual objective does not see the shift
        let y = points(&[[1.0, 1.0], [0.0, 0.5]]);
        s.g.params_mut()[n - 1] -= 0.75;
        let (l0, _, _) = s.dual_loss_and_grad(&kinetic(), &x, &y).unwrap();
        s.g.params_mut()[n - 1] += 0.75;
        let (l1, _, _) = s.dual_loss_and_grad(&kinetic(), &x, &y).unwrap();
        assert!((l0 - l1).abs() < 1e-9);
    }

    #[test]
    fn identical_point_masses_have_zero_dual() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        s.g.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let zero = Tensor::zeros(&[4, 2]);
        let (loss, grad, _) = s.dual_loss_and_grad(&kinetic(), &zero, &zero).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    fn directional_check(s: &mut NlotState, x: &Tensor, y: &Tensor, dir: &[f64], h: f64) -> (f64, f64) {
        let (_, grad, _) = s.dual_loss_and_grad(&kinetic(), x, y).unwrap();
        let analytic: f64 = grad.iter().zip(dir).map(|(a, b)| a * b).sum();
        let base = s.g.params().to_vec();
        let mut at = |sign: f64| {
            let p: Vec<f64> = base.iter().zip(dir).map(|(a, b)| a + sign * h * b).collect();
            s.g.set_params(p).unwrap();
            s.dual_loss_and_grad(&kinetic(), x, y).unwrap().0
        };
        let fd = (at(1.0) - at(-1.0)) / (2.0 * h);
        s.g.set_params(base).unwrap();
        (analytic, fd)
    }

    #[test]
    fn danskin_gradient_matches_linear_potential() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        linear_potential(&mut s, [0.5, 0.0], 0.0);
        let x = points(&[[1.0, 0.0]]);
        let y = points(&[[0.5, -1.0]]);
        for dir in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, -0.7, 0.2]] {
            let (a, fd) = directional_check(&mut s, &x, &y, &dir, 1e-4);
            assert!((a - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "{a} vs {fd}");
        }
    }

    #[test]
    fn danskin_gradient_on_random_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let lbfgs = LbfgsConfig { max_iters: 300, grad_tol: 1e-12, ..LbfgsConfig::default() };
            let cfg = NlotConfig { seed: trial, lbfgs, ..small_config() };
            let mut s = NlotState::new(2, &cfg).unwrap();
            // gentle potentials keep the conjugate problem well posed
            s.g.params_mut().iter_mut().for_each(|p| *p *= 0.5);
            // Danskin needs smooth minimizers; drop sources whose ŷ sits on a
            // kink of the piecewise-linear potential
            let cand = Tensor::matrix(12, 2, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let conj = s.c_transform(&kinetic(), &cand).unwrap();
            let (_, gy) = s.conjugate_objective(&kinetic(), &cand, &conj.points).unwrap();
            let keep: Vec<f64> = (0..12)
                .filter(|&r| gy.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-7)
                .take(6)
                .flat_map(|r| cand.row(r).to_vec())
                .collect();
            assert!(keep.len() >= 4, "trial {trial}: too few smooth minimizers");
            let x = Tensor::matrix(keep.len() / 2, 2, keep).unwrap();
            let y = Tensor::matrix(6, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let dir: Vec<f64> = (0..s.g.params().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, fd) = directional_check(&mut s, &x, &y, &dir, 1e-5);
            assert!((a - fd).abs() <= 1e-2 * fd.abs().max(1e-2), "trial {trial}: {a} vs {fd}");
        }
    }

    #[test]
    fn conjugate_is_below_batch_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = NlotState::new(2, &small_config()).unwrap();
        let x = Tensor::matrix(8, 2, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::matrix(8, 2, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let conj = s.c_transform(&kinetic(), &x).unwrap();
        for i in 0..8 {
            let xi = Tensor::matrix(8, 2, x.row(i).repeat(8)).unwrap();
            let (j, _) = s.conjugate_objective(&kinetic(), &xi, &y).unwrap();
            assert!(j.iter().all(|v| conj.values[i] <= v + 1e-6));
            assert!(conj.values[i] <= conj.warm_values[i]);
        }
    }

    #[test]
    fn zero_steps_leave_state_unchanged() {
        let mu = EmpiricalMeasure::new(2, vec![0.0, 0.0, 0.1, 0.2]).unwrap();
        let cfg = NlotConfig { steps: 0, ..small_config() };
        let trained = train_nlot(&mu, &mu, &kinetic(), &cfg).unwrap();
        let fresh = NlotState::new(2, &cfg).unwrap();
        assert_eq!(trained.g, fresh.g);
        assert_eq!(trained.y_zeta, fresh.y_zeta);
        assert_eq!(trained.predictor, fresh.predictor);
        assert_eq!(trained.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let mu = EmpiricalMeasure::new(2, (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let nu = EmpiricalMeasure::new(2, (0..40).map(|i| 1.0 + (i as f64 * 0.11).cos()).collect()).unwrap();
        let cfg = small_config();
        let mut straight = NlotState::new(2, &cfg).unwrap();
        straight.train(&mu, &nu, &kinetic(), 4, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = NlotState::new(2, &cfg).unwrap();
        first.train(&mu, &nu, &kinetic(), 2, |_, _| Ok(())).unwrap();
        first.save(dir.path()).unwrap();
        let mut resumed = NlotState::new(2, &cfg).unwrap();
        resumed.load(dir.path()).unwrap();
        resumed.train(&mu, &nu, &kinetic(), 2, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.g, straight.g);
        assert_eq!(resumed.y_zeta, straight.y_zeta);
        assert_eq!(resumed.predictor, straight.predictor);
        assert_eq!(resumed.step, 4);
    }

    #[test]
    fn push_forward_with_zero_potential_is_identity() {
        let mut s = NlotState::new(2, &small_config()).unwrap();
        s.g.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let m = EmpiricalMeasure::new(2, (0..30).map(|i| (i as f64).sin()).collect()).unwrap();
        let pushed = s.push_forward(&kinetic(), &m).unwrap();
        for (a, b) in pushed.points().iter().zip(m.points()) {
            assert!((a - b).abs() < 1e-6);
        }
        let (paths, _) = s.transport_paths(&kinetic(), &m, 0).unwrap();
        for (i, p) in paths.iter().enumerate() {
            assert_eq!(p.eval_path(0.0).unwrap(), m.point(i));
        }
    }
}
