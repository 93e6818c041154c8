//! Path energies, direct geodesic optimization, and the amortized spline
//! predictor.
//!
//! Paths are parameterized by chord-relative interior knot offsets: knot `j`
//! sits at `x + t_j (y - x) + off_j`. Batched energies are recorded on a tape
//! with one row per path and one column per quadrature node.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::lagrangian::LagrangianSpec;
use crate::nn::{AdamConfig, AdamState, Mlp};
use crate::spline::{build_spline, chord_params, InteriorBasis, PathSpline};

pub const DEFAULT_QUAD_NODES: usize = 100;
pub const DEFAULT_GEODESIC_STEPS: usize = 100;
pub const DEFAULT_GEODESIC_RATE: f64 = 1e-2;
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Composite midpoint rule with `nodes` equal subintervals of [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyQuadrature {
    pub nodes: usize,
}

impl Default for EnergyQuadrature {
    fn default() -> Self {
        Self { nodes: DEFAULT_QUAD_NODES }
    }
}

impl EnergyQuadrature {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidArgument(format!("quadrature needs at least 2 nodes, got {nodes}")));
        }
        Ok(Self { nodes })
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| (i as f64 + 0.5) / self.nodes as f64).collect()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.nodes as f64
    }
}

/// Everything needed to record energies for a fixed knot count and
/// quadrature: basis matrices and the time rows as tensors.
#[derive(Clone, Debug)]
pub struct QuadBasis {
    pub knots: usize,
    pub quad: EnergyQuadrature,
    basis: InteriorBasis,
    start_weight: Tensor,
    end_weight: Tensor,
    ones: Tensor,
    position: Tensor,
    velocity: Tensor,
    weights: Tensor,
}

impl QuadBasis {
    pub fn new(knots: usize, quad: EnergyQuadrature) -> Result<Self> {
        let times = quad.times();
        let q = times.len();
        let basis = InteriorBasis::new(knots, &times)?;
        let inner = knots - 2;
        Ok(Self {
            knots,
            quad,
            start_weight: Tensor::matrix(1, q, times.iter().map(|t| 1.0 - t).collect())?,
            end_weight: Tensor::matrix(1, q, times.clone())?,
            ones: Tensor::full(&[1, q], 1.0),
            position: Tensor::matrix(inner, q, basis.position.clone())?,
            velocity: Tensor::matrix(inner, q, basis.velocity.clone())?,
            weights: Tensor::full(&[q], quad.weight()),
            basis,
        })
    }

    pub fn interior(&self) -> usize {
        self.knots - 2
    }

    pub fn times(&self) -> &[f64] {
        &self.basis.times
    }

    /// Records per-path energies `[B]` for endpoints `x`, `y` of shape
    /// `[B, d]` and offsets of shape `[B, (n - 2) d]`. Also returns the
    /// Lagrangian values `[B, Q]`.
    pub fn record_energy(
        &self,
        tape: &mut Tape,
        lag: &LagrangianSpec,
        x: Var,
        y: Var,
        offsets: Var,
        params: Option<Var>,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || tape.value(y).shape() != shape.as_slice() {
            return Err(Error::InvalidArgument(format!(
                "endpoints must be matching [rows, dim] matrices, got {:?} and {:?}",
                shape,
                tape.value(y).shape()
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        let inner = self.interior();
        if tape.value(offsets).len() != rows * inner * d {
            return Err(Error::Dimension { expected: rows * inner * d, got: tape.value(offsets).len() });
        }
        let start_w = tape.constant(self.start_weight.clone());
        let end_w = tape.constant(self.end_weight.clone());
        let ones = tape.constant(self.ones.clone());
        let (pb, vb) = if inner > 0 {
            (Some(tape.constant(self.position.clone())), Some(tape.constant(self.velocity.clone())))
        } else {
            (None, None)
        };
        let per_knot = if inner > 0 && d > 1 { Some(tape.reshape(offsets, &[rows * inner, d])?) } else { None };
        let mut pos = Vec::with_capacity(d);
        let mut vel = Vec::with_capacity(d);
        for c in 0..d {
            let xc = tape.slice(x, c, c + 1)?;
            let yc = tape.slice(y, c, c + 1)?;
            let a = tape.matmul(xc, start_w)?;
            let b = tape.matmul(yc, end_w)?;
            let mut p = tape.add(a, b)?;
            let delta = tape.sub(yc, xc)?;
            let mut v = tape.matmul(delta, ones)?;
            if let (Some(pb), Some(vb)) = (pb, vb) {
                let oc = match per_knot {
                    Some(k) => {
                        let col = tape.slice(k, c, c + 1)?;
                        tape.reshape(col, &[rows, inner])?
                    }
                    None => tape.reshape(offsets, &[rows, inner])?,
                };
                let dp = tape.matmul(oc, pb)?;
                let dv = tape.matmul(oc, vb)?;
                p = tape.add(p, dp)?;
                v = tape.add(v, dv)?;
            }
            pos.push(p);
            vel.push(v);
        }
        let lagrangian = lag.record(tape, &pos, &vel, params)?;
        let w = tape.constant(self.weights.clone());
        let energy = tape.matmul(lagrangian, w)?;
        Ok((energy, lagrangian))
    }

    /// Errors if any recorded Lagrangian value is non-finite, naming the
    /// path and time.
    pub fn check_finite(&self, tape: &Tape, lagrangian: Var) -> Result<()> {
        let values = tape.value(lagrangian);
        if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
            let q = self.quad.nodes;
            return Err(Error::NonFinite(format!(
                "Lagrangian is {} on path {} at t = {}",
                values.data()[i],
                i / q,
                self.times()[i % q]
            )));
        }
        Ok(())
    }

    /// Energies of a batch of paths, without gradients.
    pub fn energies(&self, lag: &LagrangianSpec, x: &Tensor, y: &Tensor, offsets: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (xv, yv, ov) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(offsets.clone()));
        let (e, l) = self.record_energy(&mut tape, lag, xv, yv, ov, None)?;
        self.check_finite(&tape, l)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Energies and their gradients with respect to the endpoints, holding
    /// the chord-relative offsets fixed.
    pub fn energies_and_endpoint_grads(
        &self,
        lag: &LagrangianSpec,
        x: &Tensor,
        y: &Tensor,
        offsets: &Tensor,
    ) -> Result<(Vec<f64>, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (xv, yv, ov) = (tape.input(x.clone()), tape.input(y.clone()), tape.constant(offsets.clone()));
        let (e, l) = self.record_energy(&mut tape, lag, xv, yv, ov, None)?;
        self.check_finite(&tape, l)?;
        let total = tape.sum(e)?;
        let mut g = tape.gradient(total, &[xv, yv])?;
        let gy = g.pop().expect("two gradients");
        let gx = g.pop().expect("two gradients");
        Ok((tape.value(e).data().to_vec(), gx, gy))
    }

    pub fn spline(&self, x: &[f64], y: &[f64], offsets: &[f64]) -> Result<PathSpline> {
        let phi: Vec<f64> = chord_params(x, y, self.knots).iter().zip(offsets).map(|(a, b)| a + b).collect();
        build_spline(x, y, &phi, self.knots)
    }
}

/// Chord-relative offsets of a spline's interior knots.
pub fn offsets_of(spline: &PathSpline) -> Vec<f64> {
    let chord = chord_params(spline.start(), spline.end(), spline.knots());
    spline.params().iter().zip(&chord).map(|(p, c)| p - c).collect()
}

/// Energy of a single spline by direct evaluation of the path and velocity
/// at the quadrature nodes.
pub fn path_energy(lag: &LagrangianSpec, spline: &PathSpline, quad: &EnergyQuadrature) -> Result<f64> {
    let mut total = 0.0;
    for t in quad.times() {
        let l = lag.value(&spline.eval_path(t)?, &spline.eval_velocity(t)?)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("Lagrangian is {l} at t = {t}")));
        }
        total += l;
    }
    Ok(total * quad.weight())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicBatch {
    /// Best offsets found per path, `[B, (n - 2) d]` row-major.
    pub offsets: Vec<f64>,
    pub energies: Vec<f64>,
}

/// Adam descent on the energies of `B` independent paths. Adam acts
/// elementwise, so one optimizer over all offsets is `B` independent runs.
/// Returns the lowest-energy iterate of each path.
pub fn solve_geodesics(
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    x: &Tensor,
    y: &Tensor,
    init_offsets: Vec<f64>,
    steps: usize,
    rate: f64,
) -> Result<GeodesicBatch> {
    let rows = x.rows();
    let width = init_offsets.len() / rows.max(1);
    let mut adam = AdamState::new(AdamConfig::constant(rate), init_offsets.len())?;
    let mut current = init_offsets;
    let mut best = current.clone();
    let mut best_energy = vec![f64::INFINITY; rows];
    for step in 0..=steps {
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let ov = tape.input(Tensor::matrix(rows, width, current.clone())?);
        let (e, l) = basis.record_energy(&mut tape, lag, xv, yv, ov, None)?;
        basis.check_finite(&tape, l)?;
        let energies = tape.value(e).data().to_vec();
        for (i, &en) in energies.iter().enumerate() {
            if en > DIVERGENCE_LIMIT {
                return Err(Error::Divergence(format!("path {i} energy {en} at step {step}")));
            }
            // ignore round-off sized improvements so exact optima stay put
            if step == 0 || en < best_energy[i] - 1e-14 * best_energy[i].abs() {
                best_energy[i] = en;
                best[i * width..(i + 1) * width].copy_from_slice(&current[i * width..(i + 1) * width]);
            }
        }
        if step == steps {
            break;
        }
        let total = tape.sum(e)?;
        let grad = tape.gradient(total, &[ov])?.remove(0);
        adam.step(&mut current, grad.data())?;
    }
    Ok(GeodesicBatch { offsets: best, energies: best_energy })
}

/// Single-path form of [`solve_geodesics`] starting from absolute interior
/// knot values `init`.
pub fn solve_geodesic(
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    x: &[f64],
    y: &[f64],
    init: &[f64],
    steps: usize,
    rate: f64,
) -> Result<(PathSpline, f64)> {
    let d = x.len();
    if init.len() != basis.interior() * d {
        return Err(Error::Dimension { expected: basis.interior() * d, got: init.len() });
    }
    let chord = chord_params(x, y, basis.knots);
    let off: Vec<f64> = init.iter().zip(&chord).map(|(a, b)| a - b).collect();
    let xt = Tensor::matrix(1, d, x.to_vec())?;
    let yt = Tensor::matrix(1, d, y.to_vec())?;
    let out = solve_geodesics(lag, basis, &xt, &yt, off, steps, rate)?;
    Ok((basis.spline(x, y, &out.offsets)?, out.energies[0]))
}

/// Smallest offset used to smooth the endpoint distance; a power of two so
/// that the smoothed distance of coincident endpoints is exactly zero.
const DISTANCE_SMOOTHING: f64 = 1.0 / 1048576.0;

/// Amortized spline predictor: offsets `s(x, y) · net([x, y])` with
/// `s = √(‖y − x‖² + ε²) − ε`, so coincident endpoints give constant paths.
#[derive(Clone, Debug, PartialEq)]
pub struct SplinePredictor {
    pub net: Mlp,
    pub knots: usize,
    pub dim: usize,
}

impl SplinePredictor {
    /// Random hidden layers and a zero output layer, so predictions start on
    /// the chord.
    pub fn new<R: Rng + ?Sized>(dim: usize, knots: usize, hidden: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        if knots < 2 {
            return Err(Error::InvalidArgument(format!("a spline needs at least 2 knots, got {knots}")));
        }
        let mut sizes = vec![2 * dim];
        sizes.extend_from_slice(hidden);
        sizes.push(((knots - 2) * dim).max(1));
        let mut net = Mlp::new(&sizes, slope, rng)?;
        net.zero_output_layer();
        Ok(Self { net, knots, dim })
    }

    pub fn width(&self) -> usize {
        (self.knots - 2) * self.dim
    }

    fn check(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim || x.shape() != y.shape() {
            return Err(Error::Dimension { expected: self.dim, got: x.cols() });
        }
        Ok(())
    }

    /// Predicted offsets `[B, (n - 2) d]` for endpoint rows.
    pub fn offsets(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.check(x, y)?;
        let rows = x.rows();
        if self.width() == 0 {
            return Tensor::matrix(rows, 0, vec![]);
        }
        let d = self.dim;
        let mut input = Vec::with_capacity(rows * 2 * d);
        let mut scale = Vec::with_capacity(rows);
        for r in 0..rows {
            input.extend_from_slice(x.row(r));
            input.extend_from_slice(y.row(r));
            let dist2: f64 = x.row(r).iter().zip(y.row(r)).map(|(a, b)| (b - a) * (b - a)).sum();
            let eps = DISTANCE_SMOOTHING;
            scale.push((dist2 + eps * eps).sqrt() - eps);
        }
        let mut out = self.net.forward(&Tensor::matrix(rows, 2 * d, input)?)?;
        let w = self.width();
        for (row, s) in out.data_mut().chunks_mut(w).zip(scale) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    /// Records the offsets with the network reading from `params`.
    pub fn record_offsets(&self, tape: &mut Tape, x: Var, y: Var, params: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        let input = tape.concat(&[x, y])?;
        let raw = self.net.record(tape, input, params)?;
        let diff = tape.sub(y, x)?;
        let sq = tape.unary(diff, Unary::Square)?;
        let ones = tape.constant(Tensor::full(&[self.dim], 1.0));
        let dist2 = tape.matmul(sq, ones)?;
        let eps = DISTANCE_SMOOTHING;
        let shifted = tape.unary(dist2, Unary::Affine(1.0, eps * eps))?;
        let dist = tape.unary(shifted, Unary::Sqrt)?;
        let dist = tape.unary(dist, Unary::Affine(1.0, -eps))?;
        let dist = tape.reshape(dist, &[rows, 1])?;
        let spread = tape.constant(Tensor::full(&[1, self.width()], 1.0));
        let scale = tape.matmul(dist, spread)?;
        tape.mul(raw, scale)
    }
}

fn pair_tensors(x: &[f64], y: &[f64]) -> Result<(Tensor, Tensor)> {
    Ok((Tensor::matrix(1, x.len(), x.to_vec())?, Tensor::matrix(1, y.len(), y.to_vec())?))
}

/// Cost `c(x, y)` from the predictor's spline, optionally refined by
/// `fine_tune_steps` Adam steps at the default geodesic rate. Refinement
/// keeps the best iterate, so more steps never give a larger cost.
pub fn displacement_cost(
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    predictor: &SplinePredictor,
    x: &[f64],
    y: &[f64],
    fine_tune_steps: usize,
) -> Result<(f64, PathSpline)> {
    if predictor.knots != basis.knots || predictor.dim != x.len() {
        return Err(Error::InvalidArgument(format!(
            "predictor is for {} knots in dimension {}, basis has {} knots and the points dimension {}",
            predictor.knots,
            predictor.dim,
            basis.knots,
            x.len()
        )));
    }
    let (xt, yt) = pair_tensors(x, y)?;
    let off = predictor.offsets(&xt, &yt)?.into_data();
    let out = solve_geodesics(lag, basis, &xt, &yt, off, fine_tune_steps, DEFAULT_GEODESIC_RATE)?;
    Ok((out.energies[0], basis.spline(x, y, &out.offsets)?))
}

/// Envelope-rule gradients `(∂c/∂x, ∂c/∂y)` at a returned path, holding its
/// chord-relative offsets fixed.
pub fn displacement_cost_grad(
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    spline: &PathSpline,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (xt, yt) = pair_tensors(spline.start(), spline.end())?;
    let off = offsets_of(spline);
    let width = off.len();
    let (_, gx, gy) = basis.energies_and_endpoint_grads(lag, &xt, &yt, &Tensor::matrix(1, width, off)?)?;
    Ok((gx.into_data(), gy.into_data()))
}

/// Mean energy of predicted paths and its gradient in the predictor
/// parameters, with the endpoints held constant.
pub fn predictor_loss_and_grad(
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    predictor: &SplinePredictor,
    x: &Tensor,
    y: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let rows = x.rows();
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let params = predictor.net.params_leaf(&mut tape);
    let off = predictor.record_offsets(&mut tape, xv, yv, params)?;
    let (e, l) = basis.record_energy(&mut tape, lag, xv, yv, off, None)?;
    basis.check_finite(&tape, l)?;
    let total = tape.sum(e)?;
    let mean = tape.scale(total, 1.0 / rows as f64)?;
    let grad = tape.gradient(mean, &[params])?.remove(0);
    Ok((tape.value(mean).data()[0], grad.into_data()))
}

/// Trains the predictor against mean path energy on pairs from `sampler`,
/// which receives the step index. Returns the per-step mean energies.
pub fn train_spline_predictor<F>(
    predictor: &mut SplinePredictor,
    lag: &LagrangianSpec,
    basis: &QuadBasis,
    adam: &mut AdamState,
    mut sampler: F,
    steps: usize,
) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<(Tensor, Tensor)>,
{
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (x, y) = sampler(step)?;
        let (loss, grad) = predictor_loss_and_grad(lag, basis, predictor, &x, &y)?;
        adam.step(predictor.net.params_mut(), &grad)?;
        trace.push(loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lagrangian::{MetricField, PotentialKind, PotentialSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(knots: usize, nodes: usize) -> QuadBasis {
        QuadBasis::new(knots, EnergyQuadrature::new(nodes).unwrap()).unwrap()
    }

    fn straight(x: &[f64], y: &[f64], n: usize) -> PathSpline {
        build_spline(x, y, &chord_params(x, y, n), n).unwrap()
    }

    #[test]
    fn straight_line_energies() {
        let q = EnergyQuadrature::default();
        let kin = LagrangianSpec::Kinetic;
        assert!((path_energy(&kin, &straight(&[0.0, 0.0], &[1.0, 0.0], 30), &q).unwrap() - 0.5).abs() < 1e-12);
        assert!((path_energy(&kin, &straight(&[0.0, 0.0], &[2.0, 0.0], 30), &q).unwrap() - 2.0).abs() < 1e-12);
        let hill = LagrangianSpec::KineticMinusPotential(PotentialSpec::new(PotentialKind::Hill));
        let e = path_energy(&hill, &straight(&[-1.0, 0.0], &[1.0, 0.0], 30), &q).unwrap();
        assert!((e - (2.0 + 0.05 / 3.0)).abs() < 1e-4);
    }

    #[test]
    fn tape_energy_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = basis(9, 40);
        let lags = [
            LagrangianSpec::Kinetic,
            LagrangianSpec::KineticMinusPotential(PotentialSpec::new(PotentialKind::Slit)),
            LagrangianSpec::Metric(MetricField::Circle { eps: 0.1 }),
            LagrangianSpec::Metric(MetricField::XPaths { delta: 0.1 }),
        ];
        for lag in &lags {
            let rows = 5;
            let x: Vec<f64> = (0..rows * 2).map(|_| rng.gen_range(0.5..1.5)).collect();
            let y: Vec<f64> = (0..rows * 2).map(|_| rng.gen_range(0.5..1.5)).collect();
            let off: Vec<f64> = (0..rows * 14).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let e = b
                .energies(lag, &Tensor::matrix(rows, 2, x.clone()).unwrap(), &Tensor::matrix(rows, 2, y.clone()).unwrap(), &Tensor::matrix(rows, 14, off.clone()).unwrap())
                .unwrap();
            for r in 0..rows {
                let s = b.spline(&x[2 * r..2 * r + 2], &y[2 * r..2 * r + 2], &off[14 * r..14 * r + 14]).unwrap();
                let direct = path_energy(lag, &s, &b.quad).unwrap();
                assert!((direct - e[r]).abs() < 1e-12 * (1.0 + direct.abs()), "{direct} vs {}", e[r]);
            }
        }
    }

    #[test]
    fn one_dimensional_paths_are_supported() {
        let b = basis(5, 20);
        let e = b
            .energies(&LagrangianSpec::Kinetic, &Tensor::matrix(1, 1, vec![0.0]).unwrap(), &Tensor::matrix(1, 1, vec![3.0]).unwrap(), &Tensor::matrix(1, 3, vec![0.0; 3]).unwrap())
            .unwrap();
        assert!((e[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn quadrature_refinement_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lag = LagrangianSpec::Metric(MetricField::MassSplitting { delta: 0.1 });
        let (coarse, fine) = (EnergyQuadrature::new(100).unwrap(), EnergyQuadrature::new(400).unwrap());
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(0.5..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(0.5..1.0)];
            let phi: Vec<f64> = chord_params(&x, &y, 8).iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            let s = build_spline(&x, &y, &phi, 8).unwrap();
            let (a, b) = (path_energy(&lag, &s, &coarse).unwrap(), path_energy(&lag, &s, &fine).unwrap());
            assert!((a - b).abs() / b < 1e-3);
        }
    }

    #[test]
    fn metric_energies_are_nonnegative_and_vanish_on_constant_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lag = LagrangianSpec::Metric(MetricField::XPaths { delta: 0.1 });
        let q = EnergyQuadrature::default();
        for _ in 0..20 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let phi: Vec<f64> = chord_params(&x, &y, 6).iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
            assert!(path_energy(&lag, &build_spline(&x, &y, &phi, 6).unwrap(), &q).unwrap() > 0.0);
            assert_eq!(path_energy(&lag, &straight(&x, &x, 6), &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn non_finite_lagrangian_names_the_time() {
        let b = basis(3, 4);
        let lag = LagrangianSpec::Metric(MetricField::Circle { eps: 0.1 });
        // constant path at the origin where the metric is undefined
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let err = b.energies(&lag, &z, &z, &Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("t = 0.125"), "{err}");
    }

    #[test]
    fn kinetic_straight_line_is_already_optimal() {
        let b = basis(10, 50);
        let (x, y) = ([0.3, -0.2], [1.7, 0.9]);
        let init = chord_params(&x, &y, 10);
        let (s, e) = solve_geodesic(&LagrangianSpec::Kinetic, &b, &x, &y, &init, 50, 1e-2).unwrap();
        let moved = s.params().iter().zip(&init).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // the midpoint rule differentiates the chord only up to quadrature error
        assert!(moved < 1e-4, "moved {moved}");
        let exact = 0.5 * (1.4f64.powi(2) + 1.1f64.powi(2));
        assert!(e <= exact && exact - e < 1e-6, "{e} vs {exact}");
        let (s, _) = solve_geodesic(&LagrangianSpec::Kinetic, &b, &x, &y, &init, 0, 1e-2).unwrap();
        assert_eq!(s.params(), init);
    }

    #[test]
    fn optimization_avoids_obstacles() {
        let b = basis(12, 60);
        let lag = LagrangianSpec::KineticMinusPotential(PotentialSpec::new(PotentialKind::Gmm));
        // the chord passes through the ball around (6, 6)
        let (x, y) = ([3.0, 6.0], [9.0, 6.2]);
        let init = chord_params(&x, &y, 12);
        let before = path_energy(&lag, &straight(&x, &y, 12), &b.quad).unwrap();
        let (_, after) = solve_geodesic(&lag, &b, &x, &y, &init, 300, 1e-2).unwrap();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn energy_never_exceeds_the_initial_path() {
        let b = basis(8, 40);
        let lag = LagrangianSpec::Metric(MetricField::Circle { eps: 0.1 });
        let (x, y) = ([1.0, 0.0], [-0.2, 1.0]);
        let init: Vec<f64> = chord_params(&x, &y, 8).iter().map(|v| v + 0.05).collect();
        let e0 = path_energy(&lag, &build_spline(&x, &y, &init, 8).unwrap(), &b.quad).unwrap();
        let mut prev = e0 + 1e-9;
        for steps in [0, 1, 5, 20, 80] {
            let (_, e) = solve_geodesic(&lag, &b, &x, &y, &init, steps, 5e-2).unwrap();
            assert!(e <= prev + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let b = basis(4, 8);
        let mut p = PotentialSpec::new(PotentialKind::Hill);
        // U = -1e14‖x‖², so ℒ ≥ 1e14 away from the origin
        p.m[2] = 1e14;
        let lag = LagrangianSpec::KineticMinusPotential(p);
        let err = solve_geodesic(&lag, &b, &[1.0, 0.0], &[2.0, 0.0], &chord_params(&[1.0, 0.0], &[2.0, 0.0], 4), 3, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    #[test]
    fn fresh_predictor_follows_the_chord() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SplinePredictor::new(2, 8, &[16, 16], 0.01, &mut rng).unwrap();
        let b = basis(8, 30);
        let (c, s) = displacement_cost(&LagrangianSpec::Kinetic, &b, &p, &[0.0, 0.0], &[1.0, 1.0], 0).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        assert!(offsets_of(&s).iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn coincident_endpoints_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = SplinePredictor::new(2, 8, &[16], 0.01, &mut rng).unwrap();
        for v in p.net.params_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        let b = basis(8, 30);
        for lag in [LagrangianSpec::Kinetic, LagrangianSpec::Metric(MetricField::XPaths { delta: 0.1 })] {
            let (c, _) = displacement_cost(&lag, &b, &p, &[0.4, -0.3], &[0.4, -0.3], 0).unwrap();
            assert_eq!(c, 0.0);
        }
    }

    #[test]
    fn recorded_offsets_match_plain_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = SplinePredictor::new(2, 6, &[8, 8], 0.01, &mut rng).unwrap();
        for v in p.net.params_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let y = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.3, 0.4, -1.0, 2.0]).unwrap();
        let plain = p.offsets(&x, &y).unwrap();
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let params = p.net.params_const(&mut tape);
        let rec = p.record_offsets(&mut tape, xv, yv, params).unwrap();
        for (a, b) in tape.value(rec).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(plain.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn envelope_gradient_matches_reoptimized_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = basis(8, 40);
        let mut pot = PotentialSpec::new(PotentialKind::Well);
        pot.m[3] = 0.5;
        let lags = [LagrangianSpec::Kinetic, LagrangianSpec::KineticMinusPotential(pot)];
        let mut p = SplinePredictor::new(2, 8, &[16], 0.01, &mut rng).unwrap();
        for v in p.net.params_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let reopt = |lag: &LagrangianSpec, x: &[f64], y: &[f64]| {
            solve_geodesic(lag, &b, x, y, &chord_params(x, y, 8), 600, 1e-2).unwrap().1
        };
        for lag in &lags {
            for _ in 0..20 {
                let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let y = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let (_, s) = displacement_cost(lag, &b, &p, &x, &y, 600).unwrap();
                let (_, gy) = displacement_cost_grad(lag, &b, &s).unwrap();
                let h = 1e-4;
                let mut fd = [0.0; 2];
                for k in 0..2 {
                    let mut yp = y;
                    yp[k] += h;
                    let mut ym = y;
                    ym[k] -= h;
                    fd[k] = (reopt(lag, &x, &yp) - reopt(lag, &x, &ym)) / (2.0 * h);
                }
                let err = ((gy[0] - fd[0]).powi(2) + (gy[1] - fd[1]).powi(2)).sqrt();
                let scale = (fd[0].powi(2) + fd[1].powi(2)).sqrt();
                assert!(err / scale < 1e-2, "{gy:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn zero_training_steps_leave_the_predictor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = SplinePredictor::new(2, 6, &[8], 0.01, &mut rng).unwrap();
        let before = p.clone();
        let b = basis(6, 20);
        let mut adam = AdamState::new(AdamConfig::constant(1e-3), p.net.params().len()).unwrap();
        let trace = train_spline_predictor(&mut p, &LagrangianSpec::Kinetic, &b, &mut adam, |_| unreachable!(), 0).unwrap();
        assert!(trace.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn kinetic_training_straightens_predicted_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let knots = 8;
        let mut p = SplinePredictor::new(2, knots, &[32, 32], 0.01, &mut rng).unwrap();
        // start away from the chord
        let mut init = ChaCha8Rng::seed_from_u64(10);
        let fresh = Mlp::new(p.net.layer_sizes(), 0.01, &mut init).unwrap();
        p.net.set_params(fresh.params().to_vec()).unwrap();
        let b = basis(knots, 24);
        let mut adam = AdamState::new(AdamConfig::constant(3e-3), p.net.params().len()).unwrap();
        let sample = |rng: &mut ChaCha8Rng, center: f64, rows: usize| {
            let data = (0..rows * 2)
                .map(|i| if i % 2 == 0 { center } else { 0.0 } + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            Tensor::matrix(rows, 2, data).unwrap()
        };
        let mut data_rng = ChaCha8Rng::seed_from_u64(11);
        let trace = train_spline_predictor(
            &mut p,
            &LagrangianSpec::Kinetic,
            &b,
            &mut adam,
            |_| Ok((sample(&mut data_rng, 0.0, 64), sample(&mut data_rng, 2.0, 64))),
            1500,
        )
        .unwrap();
        let head: f64 = trace[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = trace[trace.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(tail < head);
        let (x, y) = (sample(&mut data_rng, 0.0, 200), sample(&mut data_rng, 2.0, 200));
        let off = p.offsets(&x, &y).unwrap();
        let msd = off.data().iter().map(|v| v * v).sum::<f64>() / (200 * (knots - 2)) as f64;
        assert!(msd < 1e-3, "mean squared deviation {msd}");
    }
}
