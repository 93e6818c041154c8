//! Lagrangians ℒ(x, v): kinetic, kinetic minus a potential, and Riemannian
//! ½ vᵀA(x)v for fixed or learned metric fields.
//!
//! Every quantity has two routes. The scalar functions evaluate one point in
//! plain arithmetic. The `record_*` functions build the same expression on a
//! [`Tape`] over batches, where each coordinate is its own tensor.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::autodiff::{sigmoid, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;

pub const DEFAULT_SHARPNESS: f64 = 20.0;
pub const DEFAULT_M: [f64; 5] = [0.01, 1.0, 0.05, 0.01, 0.1];
pub const GMM_CENTERS: [[f64; 2]; 3] = [[6.0, 6.0], [6.0, -6.0], [-6.0, -6.0]];
pub const GMM_RADIUS: f64 = 1.5;
pub const BOX_HALF_WIDTH: f64 = 0.5;
pub const SLIT_HALF_WIDTH: f64 = 0.1;
pub const SLIT_GAP: f64 = 0.25;
pub const DEFAULT_METRIC_EPS: f64 = 0.1;
pub const LEARNED_EIGENVALUES: [f64; 2] = [1.0, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialKind {
    Box,
    Slit,
    Hill,
    Well,
    Gmm,
}

impl PotentialKind {
    pub const ALL: [PotentialKind; 5] =
        [PotentialKind::Box, PotentialKind::Slit, PotentialKind::Hill, PotentialKind::Well, PotentialKind::Gmm];

    pub fn name(self) -> &'static str {
        match self {
            PotentialKind::Box => "box",
            PotentialKind::Slit => "slit",
            PotentialKind::Hill => "hill",
            PotentialKind::Well => "well",
            PotentialKind::Gmm => "gmm",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Smoothed potential. Indicators of intervals become products of sigmoids
/// whose slopes are `sharpness` divided by the interval's half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub m: [f64; 5],
    pub sharpness: f64,
}

impl PotentialSpec {
    pub fn new(kind: PotentialKind) -> Self {
        Self { kind, m: DEFAULT_M, sharpness: DEFAULT_SHARPNESS }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let [x1, x2] = planar(x)?;
        let k = self.sharpness;
        let up = |v: f64, edge: f64, scale: f64| sigmoid(k * (v - edge) / scale);
        let down = |v: f64, edge: f64, scale: f64| sigmoid(k * (edge - v) / scale);
        Ok(match self.kind {
            PotentialKind::Box => {
                let h = BOX_HALF_WIDTH;
                -self.m[0] * down(x1, h, h) * up(x1, -h, h) * down(x2, h, h) * up(x2, -h, h)
            }
            PotentialKind::Slit => {
                let w = SLIT_HALF_WIDTH;
                let bar = down(x1, w, w) * up(x1, -w, w);
                let lower = down(x2, -SLIT_GAP, SLIT_GAP);
                let upper = up(x2, SLIT_GAP, SLIT_GAP);
                -self.m[1] * (bar * lower + bar * upper)
            }
            PotentialKind::Hill => -self.m[2] * (x1 * x1 + x2 * x2),
            PotentialKind::Well => -self.m[3] * (-(x1 * x1 + x2 * x2)).exp(),
            PotentialKind::Gmm => {
                let r = GMM_RADIUS;
                let total: f64 = GMM_CENTERS
                    .iter()
                    .map(|c| {
                        let d2 = (x1 - c[0]).powi(2) + (x2 - c[1]).powi(2);
                        sigmoid(k * (r * r - d2) / (2.0 * r))
                    })
                    .sum();
                -self.m[4] * total
            }
        })
    }

    /// Whether `x` lies inside the hard obstacle region of this potential.
    pub fn in_obstacle(&self, x: &[f64]) -> bool {
        let (x1, x2) = (x[0], x[1]);
        match self.kind {
            PotentialKind::Box => x1.abs() <= BOX_HALF_WIDTH && x2.abs() <= BOX_HALF_WIDTH,
            PotentialKind::Slit => x1.abs() <= SLIT_HALF_WIDTH && x2.abs() >= SLIT_GAP,
            PotentialKind::Gmm => GMM_CENTERS
                .iter()
                .any(|c| (x1 - c[0]).powi(2) + (x2 - c[1]).powi(2) <= GMM_RADIUS * GMM_RADIUS),
            PotentialKind::Hill | PotentialKind::Well => false,
        }
    }

    /// Records U on the tape for coordinate tensors `pos = [x1, x2]`.
    pub fn record(&self, tape: &mut Tape, pos: &[Var]) -> Result<Var> {
        let [x1, x2] = planar_vars(pos)?;
        let k = self.sharpness;
        let up = |tape: &mut Tape, v: Var, edge: f64, scale: f64| -> Result<Var> {
            let z = tape.unary(v, Unary::Affine(k / scale, -k * edge / scale))?;
            tape.unary(z, Unary::Sigmoid)
        };
        let down = |tape: &mut Tape, v: Var, edge: f64, scale: f64| -> Result<Var> {
            let z = tape.unary(v, Unary::Affine(-k / scale, k * edge / scale))?;
            tape.unary(z, Unary::Sigmoid)
        };
        let r2 = |tape: &mut Tape| -> Result<Var> {
            let a = tape.unary(x1, Unary::Square)?;
            let b = tape.unary(x2, Unary::Square)?;
            tape.add(a, b)
        };
        match self.kind {
            PotentialKind::Box => {
                let h = BOX_HALF_WIDTH;
                let a = down(tape, x1, h, h)?;
                let b = up(tape, x1, -h, h)?;
                let c = down(tape, x2, h, h)?;
                let d = up(tape, x2, -h, h)?;
                let ab = tape.mul(a, b)?;
                let cd = tape.mul(c, d)?;
                let all = tape.mul(ab, cd)?;
                tape.scale(all, -self.m[0])
            }
            PotentialKind::Slit => {
                let w = SLIT_HALF_WIDTH;
                let a = down(tape, x1, w, w)?;
                let b = up(tape, x1, -w, w)?;
                let bar = tape.mul(a, b)?;
                let lower = down(tape, x2, -SLIT_GAP, SLIT_GAP)?;
                let upper = up(tape, x2, SLIT_GAP, SLIT_GAP)?;
                let gaps = tape.add(lower, upper)?;
                let both = tape.mul(bar, gaps)?;
                tape.scale(both, -self.m[1])
            }
            PotentialKind::Hill => {
                let r = r2(tape)?;
                tape.scale(r, -self.m[2])
            }
            PotentialKind::Well => {
                let r = r2(tape)?;
                let e = tape.unary(r, Unary::Affine(-1.0, 0.0))?;
                let e = tape.unary(e, Unary::Exp)?;
                tape.scale(e, -self.m[3])
            }
            PotentialKind::Gmm => {
                let r = GMM_RADIUS;
                let mut total: Option<Var> = None;
                for c in GMM_CENTERS {
                    let d1 = tape.unary(x1, Unary::Affine(1.0, -c[0]))?;
                    let d2 = tape.unary(x2, Unary::Affine(1.0, -c[1]))?;
                    let s1 = tape.unary(d1, Unary::Square)?;
                    let s2 = tape.unary(d2, Unary::Square)?;
                    let dist = tape.add(s1, s2)?;
                    let z = tape.unary(dist, Unary::Affine(-k / (2.0 * r), k * r / 2.0))?;
                    let ind = tape.unary(z, Unary::Sigmoid)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, ind)?,
                        None => ind,
                    });
                }
                tape.scale(total.expect("three centers"), -self.m[4])
            }
        }
    }
}

/// Symmetric 2×2 matrix `[[a11, a12], [a12, a22]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Sym2 {
    pub fn new(a11: f64, a12: f64, a22: f64) -> Self {
        Self { a11, a12, a22 }
    }

    pub fn to_array(self) -> [[f64; 2]; 2] {
        [[self.a11, self.a12], [self.a12, self.a22]]
    }

    /// ½ vᵀ A v.
    pub fn half_quadratic(self, v: &[f64]) -> f64 {
        0.5 * (self.a11 * v[0] * v[0] + 2.0 * self.a12 * v[0] * v[1] + self.a22 * v[1] * v[1])
    }

    /// Eigenvalues in ascending order with matching unit eigenvectors.
    pub fn eigen(self) -> ([f64; 2], [[f64; 2]; 2]) {
        let Sym2 { a11, a12, a22 } = self;
        if a12 == 0.0 {
            return if a11 <= a22 {
                ([a11, a22], [[1.0, 0.0], [0.0, 1.0]])
            } else {
                ([a22, a11], [[0.0, 1.0], [1.0, 0.0]])
            };
        }
        let mean = 0.5 * (a11 + a22);
        let radius = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
        let vals = [mean - radius, mean + radius];
        let vector = |lambda: f64| {
            let (p, q) = ((a12, lambda - a11), (lambda - a22, a12));
            let (u, w) = if p.0.hypot(p.1) >= q.0.hypot(q.1) { p } else { q };
            let n = u.hypot(w);
            [u / n, w / n]
        };
        (vals, [vector(vals[0]), vector(vals[1])])
    }
}

/// Metric field θ ↦ R(θ(x)) diag(λ) R(θ(x))ᵀ with θ an MLP of the
/// normalized position `(x - center) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationMetric {
    pub net: Mlp,
    pub eigenvalues: [f64; 2],
    pub center: [f64; 2],
    pub scale: f64,
}

impl RotationMetric {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.input_dim() != 2 || net.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "rotation network must map 2 inputs to 1 angle, got {:?}",
                net.layer_sizes()
            )));
        }
        Ok(Self { net, eigenvalues: LEARNED_EIGENVALUES, center: [0.0, 0.0], scale: 1.0 })
    }

    pub fn with_normalization(mut self, center: [f64; 2], scale: f64) -> Self {
        self.center = center;
        self.scale = scale;
        self
    }

    fn normalize(&self, x: &[f64]) -> [f64; 2] {
        [(x[0] - self.center[0]) / self.scale, (x[1] - self.center[1]) / self.scale]
    }

    pub fn angle(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.eval(&self.normalize(x))?[0])
    }

    pub fn angles(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        let data = points.iter().flat_map(|p| self.normalize(p)).collect();
        Ok(self.net.forward(&Tensor::matrix(points.len(), 2, data)?)?.into_data())
    }

    pub fn matrix_at_angle(&self, theta: f64) -> Sym2 {
        let (s, c) = theta.sin_cos();
        let [l1, l2] = self.eigenvalues;
        Sym2::new(l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c)
    }

    /// Records θ for coordinate tensors `pos = [x1, x2]` of a common shape.
    fn record_angle(&self, tape: &mut Tape, pos: &[Var], params: Var) -> Result<Var> {
        let shape = tape.value(pos[0]).shape().to_vec();
        let rows = tape.value(pos[0]).len();
        let mut cols = Vec::with_capacity(2);
        for c in 0..2 {
            let z = tape.unary(pos[c], Unary::Affine(1.0 / self.scale, -self.center[c] / self.scale))?;
            cols.push(tape.reshape(z, &[rows, 1])?);
        }
        let input = tape.concat(&cols)?;
        let theta = self.net.record(tape, input, params)?;
        tape.reshape(theta, &shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricField {
    /// x̂x̂ᵀ + εI, undefined at the origin.
    Circle { eps: f64 },
    /// (1 + δ)I − wwᵀ with w = (1, ±1)/√2 by the sign of x₂.
    MassSplitting { delta: f64 },
    /// (1 + δ)I − wwᵀ with w = α w₁ + β w₂, |α|, |β| ≤ 1.
    XPaths { delta: f64 },
    Learned(RotationMetric),
}

fn x_paths_weights(x1: f64, x2: f64) -> (f64, f64) {
    let p = x1 * x2;
    let alpha = (1.25 * p.max(0.0).tanh()).min(1.0);
    let beta = -(1.25 * (-p).max(0.0).tanh()).min(1.0);
    (alpha, beta)
}

impl MetricField {
    pub fn name(&self) -> &'static str {
        match self {
            MetricField::Circle { .. } => "circle",
            MetricField::MassSplitting { .. } => "mass_splitting",
            MetricField::XPaths { .. } => "x_paths",
            MetricField::Learned(_) => "learned",
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<Sym2> {
        let [x1, x2] = planar(x)?;
        Ok(match self {
            MetricField::Circle { eps } => {
                let r2 = x1 * x1 + x2 * x2;
                if r2 == 0.0 {
                    return Err(Error::MetricUndefined(x.to_vec()));
                }
                Sym2::new(x1 * x1 / r2 + eps, x1 * x2 / r2, x2 * x2 / r2 + eps)
            }
            MetricField::MassSplitting { delta } => {
                let w = [FRAC_1_SQRT_2, if x2 >= 0.0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 }];
                rank_one_complement(w, *delta)
            }
            MetricField::XPaths { delta } => {
                let (alpha, beta) = x_paths_weights(x1, x2);
                let w = [(alpha + beta) * FRAC_1_SQRT_2, (alpha - beta) * FRAC_1_SQRT_2];
                rank_one_complement(w, *delta)
            }
            MetricField::Learned(rot) => rot.matrix_at_angle(rot.angle(x)?),
        })
    }

    /// Records ½ vᵀA(x)v. `params` supplies the rotation network's parameter
    /// node for learned metrics; it is added as a constant when absent.
    pub fn record_half_quadratic(
        &self,
        tape: &mut Tape,
        pos: &[Var],
        vel: &[Var],
        params: Option<Var>,
    ) -> Result<Var> {
        let [x1, x2] = planar_vars(pos)?;
        let [v1, v2] = planar_vars(vel)?;
        let speed2 = |tape: &mut Tape| -> Result<Var> {
            let a = tape.unary(v1, Unary::Square)?;
            let b = tape.unary(v2, Unary::Square)?;
            tape.add(a, b)
        };
        match self {
            MetricField::Circle { eps } => {
                // ½ [ε‖v‖² + (x·v)²/‖x‖²]
                let s = speed2(tape)?;
                let a = tape.mul(x1, v1)?;
                let b = tape.mul(x2, v2)?;
                let xv = tape.add(a, b)?;
                let xv2 = tape.unary(xv, Unary::Square)?;
                let p = tape.unary(x1, Unary::Square)?;
                let q = tape.unary(x2, Unary::Square)?;
                let r2 = tape.add(p, q)?;
                let inv = tape.unary(r2, Unary::Recip)?;
                let radial = tape.mul(xv2, inv)?;
                let iso = tape.scale(s, *eps)?;
                let total = tape.add(iso, radial)?;
                tape.scale(total, 0.5)
            }
            MetricField::MassSplitting { delta } => {
                // w·v = (v₁ + σ v₂)/√2 with σ = 2·step(x₂) − 1
                let sign = tape.unary(x2, Unary::Step)?;
                let sign = tape.unary(sign, Unary::Affine(2.0, -1.0))?;
                let sv2 = tape.mul(sign, v2)?;
                let wv = tape.add(v1, sv2)?;
                let wv = tape.scale(wv, FRAC_1_SQRT_2)?;
                let s = speed2(tape)?;
                complement_quadratic(tape, s, wv, *delta)
            }
            MetricField::XPaths { delta } => {
                let p = tape.mul(x1, x2)?;
                let clip = |tape: &mut Tape, z: Var| -> Result<Var> {
                    let z = tape.unary(z, Unary::LeakyRelu(0.0))?;
                    let z = tape.unary(z, Unary::Tanh)?;
                    let z = tape.unary(z, Unary::Affine(1.25, 0.0))?;
                    tape.unary(z, Unary::Clamp(f64::NEG_INFINITY, 1.0))
                };
                let alpha = clip(tape, p)?;
                let neg = tape.scale(p, -1.0)?;
                let beta = clip(tape, neg)?;
                // w·v = [α(v₁ + v₂) − β'(v₁ − v₂)]/√2 with β = −β'
                let sum = tape.add(v1, v2)?;
                let diff = tape.sub(v1, v2)?;
                let a = tape.mul(alpha, sum)?;
                let b = tape.mul(beta, diff)?;
                let wv = tape.sub(a, b)?;
                let wv = tape.scale(wv, FRAC_1_SQRT_2)?;
                let s = speed2(tape)?;
                complement_quadratic(tape, s, wv, *delta)
            }
            MetricField::Learned(rot) => {
                let params = match params {
                    Some(p) => p,
                    None => rot.net.params_const(tape),
                };
                let theta = rot.record_angle(tape, pos, params)?;
                let c = tape.unary(theta, Unary::Cos)?;
                let s = tape.unary(theta, Unary::Sin)?;
                let cv1 = tape.mul(c, v1)?;
                let sv2 = tape.mul(s, v2)?;
                let sv1 = tape.mul(s, v1)?;
                let cv2 = tape.mul(c, v2)?;
                let along = tape.add(cv1, sv2)?;
                let across = tape.sub(cv2, sv1)?;
                let along = tape.unary(along, Unary::Square)?;
                let across = tape.unary(across, Unary::Square)?;
                let along = tape.scale(along, 0.5 * rot.eigenvalues[0])?;
                let across = tape.scale(across, 0.5 * rot.eigenvalues[1])?;
                tape.add(along, across)
            }
        }
    }
}

fn rank_one_complement(w: [f64; 2], delta: f64) -> Sym2 {
    Sym2::new(1.0 + delta - w[0] * w[0], -w[0] * w[1], 1.0 + delta - w[1] * w[1])
}

/// ½[(1 + δ)‖v‖² − (w·v)²]
fn complement_quadratic(tape: &mut Tape, speed2: Var, wv: Var, delta: f64) -> Result<Var> {
    let iso = tape.scale(speed2, 1.0 + delta)?;
    let wv2 = tape.unary(wv, Unary::Square)?;
    let total = tape.sub(iso, wv2)?;
    tape.scale(total, 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LagrangianSpec {
    Kinetic,
    KineticMinusPotential(PotentialSpec),
    Metric(MetricField),
}

impl LagrangianSpec {
    pub fn value(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        if x.len() != v.len() {
            return Err(Error::Dimension { expected: x.len(), got: v.len() });
        }
        let kinetic = 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        match self {
            LagrangianSpec::Kinetic => Ok(kinetic),
            LagrangianSpec::KineticMinusPotential(p) => Ok(kinetic - p.value(x)?),
            LagrangianSpec::Metric(m) => Ok(m.value(x)?.half_quadratic(v)),
        }
    }

    pub fn learned(&self) -> Option<&RotationMetric> {
        match self {
            LagrangianSpec::Metric(MetricField::Learned(r)) => Some(r),
            _ => None,
        }
    }

    pub fn learned_mut(&mut self) -> Option<&mut RotationMetric> {
        match self {
            LagrangianSpec::Metric(MetricField::Learned(r)) => Some(r),
            _ => None,
        }
    }

    /// Whether ℒ(x, 0) = 0 for every x.
    pub fn vanishes_at_rest(&self) -> bool {
        !matches!(self, LagrangianSpec::KineticMinusPotential(_))
    }

    /// Records ℒ elementwise over coordinate tensors of a common shape.
    pub fn record(&self, tape: &mut Tape, pos: &[Var], vel: &[Var], params: Option<Var>) -> Result<Var> {
        if pos.len() != vel.len() || pos.is_empty() {
            return Err(Error::Dimension { expected: pos.len(), got: vel.len() });
        }
        let kinetic = |tape: &mut Tape| -> Result<Var> {
            let mut total = tape.unary(vel[0], Unary::Square)?;
            for &v in &vel[1..] {
                let s = tape.unary(v, Unary::Square)?;
                total = tape.add(total, s)?;
            }
            tape.scale(total, 0.5)
        };
        match self {
            LagrangianSpec::Kinetic => kinetic(tape),
            LagrangianSpec::KineticMinusPotential(p) => {
                let k = kinetic(tape)?;
                let u = p.record(tape, pos)?;
                tape.sub(k, u)
            }
            LagrangianSpec::Metric(m) => m.record_half_quadratic(tape, pos, vel, params),
        }
    }
}

fn planar(x: &[f64]) -> Result<[f64; 2]> {
    match x {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::Dimension { expected: 2, got: x.len() }),
    }
}

fn planar_vars(x: &[Var]) -> Result<[Var; 2]> {
    match x {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::Dimension { expected: 2, got: x.len() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn constant_angle(theta: f64) -> RotationMetric {
        let net = Mlp::from_params(&[2, 1], vec![0.0, 0.0, theta], 0.01).unwrap();
        RotationMetric::new(net).unwrap()
    }

    fn close(a: Sym2, b: [[f64; 2]; 2], tol: f64) -> bool {
        let a = a.to_array();
        (0..2).all(|i| (0..2).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn potential_examples() {
        assert_eq!(PotentialSpec::new(PotentialKind::Hill).value(&[1.0, 1.0]).unwrap(), -0.1);
        assert_eq!(PotentialSpec::new(PotentialKind::Well).value(&[0.0, 0.0]).unwrap(), -0.01);
        let slit = PotentialSpec::new(PotentialKind::Slit);
        assert!(slit.value(&[0.0, 0.0]).unwrap().abs() < 1e-3);
        assert!((slit.value(&[0.0, 0.5]).unwrap() + 1.0).abs() < 1e-3);
        let gmm = PotentialSpec::new(PotentialKind::Gmm);
        assert!((gmm.value(&[6.0, 6.0]).unwrap() + 0.1).abs() < 1e-6);
        let bx = PotentialSpec::new(PotentialKind::Box);
        assert!((bx.value(&[0.0, 0.0]).unwrap() + 0.01).abs() < 1e-6);
    }

    #[test]
    fn smoothed_potentials_track_hard_indicators_off_the_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [PotentialKind::Box, PotentialKind::Slit, PotentialKind::Gmm] {
            let p = PotentialSpec::new(kind);
            let m = p.m[match kind {
                PotentialKind::Box => 0,
                PotentialKind::Slit => 1,
                _ => 4,
            }];
            let mut checked = 0;
            while checked < 300 {
                let x = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
                let near = (-1..=1).any(|a| {
                    (-1..=1).any(|b| {
                        let y = [x[0] + a as f64 * 0.15, x[1] + b as f64 * 0.15];
                        p.in_obstacle(&y) != p.in_obstacle(&x)
                    })
                });
                if near {
                    continue;
                }
                let hard = if p.in_obstacle(&x) { -m } else { 0.0 };
                assert!((p.value(&x).unwrap() - hard).abs() < 0.03 * m, "{kind:?} at {x:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn metric_examples() {
        let circle = MetricField::Circle { eps: 0.1 };
        assert!(close(circle.value(&[1.0, 0.0]).unwrap(), [[1.1, 0.0], [0.0, 0.1]], 1e-15));
        assert!(matches!(circle.value(&[0.0, 0.0]), Err(Error::MetricUndefined(_))));
        let flat = MetricField::Learned(constant_angle(0.0));
        assert!(close(flat.value(&[3.0, -2.0]).unwrap(), [[1.0, 0.0], [0.0, 0.1]], 1e-15));
        let tilted = MetricField::Learned(constant_angle(FRAC_PI_4));
        assert!(close(tilted.value(&[0.3, 0.1]).unwrap(), [[0.55, 0.45], [0.45, 0.55]], 1e-12));
        let split = MetricField::MassSplitting { delta: 0.1 };
        assert!(close(split.value(&[0.0, 1.0]).unwrap(), [[0.6, -0.5], [-0.5, 0.6]], 1e-12));
    }

    #[test]
    fn lagrangian_examples() {
        assert_eq!(LagrangianSpec::Kinetic.value(&[5.0, 5.0], &[2.0, 0.0]).unwrap(), 2.0);
        let hill = LagrangianSpec::KineticMinusPotential(PotentialSpec::new(PotentialKind::Hill));
        assert!((hill.value(&[1.0, 1.0], &[0.0, 0.0]).unwrap() - 0.1).abs() < 1e-15);
        let circle = LagrangianSpec::Metric(MetricField::Circle { eps: 0.1 });
        assert!((circle.value(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 0.55).abs() < 1e-15);
    }

    fn random_lagrangians(rng: &mut ChaCha8Rng) -> Vec<LagrangianSpec> {
        let mut all = vec![LagrangianSpec::Kinetic];
        for kind in PotentialKind::ALL {
            let mut p = PotentialSpec::new(kind);
            // tamer slopes keep finite differences meaningful
            p.sharpness = 2.0;
            all.push(LagrangianSpec::KineticMinusPotential(p));
        }
        all.push(LagrangianSpec::Metric(MetricField::Circle { eps: 0.1 }));
        all.push(LagrangianSpec::Metric(MetricField::MassSplitting { delta: 0.1 }));
        all.push(LagrangianSpec::Metric(MetricField::XPaths { delta: 0.1 }));
        let net = Mlp::new(&[2, 16, 16, 1], 0.01, rng).unwrap();
        let rot = RotationMetric::new(net).unwrap().with_normalization([0.5, -0.5], 2.0);
        all.push(LagrangianSpec::Metric(MetricField::Learned(rot)));
        all
    }

    #[test]
    fn tape_route_matches_scalar_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for lag in random_lagrangians(&mut rng) {
            let pts: Vec<[f64; 4]> = (0..12)
                .map(|_| [rng.gen_range(-7.0..7.0), rng.gen_range(-7.0..7.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                .collect();
            let mut tape = Tape::new();
            let col = |k: usize| Tensor::matrix(3, 4, pts.iter().map(|p| p[k]).collect()).unwrap();
            let pos = [tape.input(col(0)), tape.input(col(1))];
            let vel = [tape.input(col(2)), tape.input(col(3))];
            let out = lag.record(&mut tape, &pos, &vel, None).unwrap();
            assert_eq!(tape.value(out).shape(), &[3, 4]);
            for (i, p) in pts.iter().enumerate() {
                let want = lag.value(&p[..2], &p[2..]).unwrap();
                let got = tape.value(out).data()[i];
                assert!((want - got).abs() < 1e-12 * (1.0 + want.abs()), "{lag:?}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn tape_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for lag in random_lagrangians(&mut rng) {
            for _ in 0..5 {
                let p = [rng.gen_range(-3.0..3.0), rng.gen_range(0.2..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let mut tape = Tape::new();
                let vars: Vec<Var> = p.iter().map(|&v| tape.input(Tensor::vector(vec![v]))).collect();
                let out = lag.record(&mut tape, &vars[..2], &vars[2..], None).unwrap();
                let s = tape.sum(out).unwrap();
                let g = tape.gradient(s, &vars).unwrap();
                let h = 1e-6;
                for k in 0..4 {
                    let mut a = p;
                    a[k] += h;
                    let mut b = p;
                    b[k] -= h;
                    let fd = (lag.value(&a[..2], &a[2..]).unwrap() - lag.value(&b[..2], &b[2..]).unwrap()) / (2.0 * h);
                    let an = g[k].data()[0];
                    assert!((an - fd).abs() < 1e-5 * (1.0 + an.abs()), "{lag:?} coord {k}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn learned_eigenvalues_are_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let net = Mlp::new(&[2, 8, 1], 0.01, &mut rng).unwrap();
            let m = MetricField::Learned(RotationMetric::new(net).unwrap());
            let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let (vals, _) = m.value(&x).unwrap().eigen();
            assert!((vals[0] - 0.1).abs() < 1e-10 && (vals[1] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_metrics_are_symmetric_positive_definite_on_dataset_boxes() {
        let fields = [
            (MetricField::Circle { eps: 0.1 }, [-1.4, 1.4, -1.4, 1.4]),
            (MetricField::MassSplitting { delta: 0.1 }, [-3.0, 13.0, -13.0, 13.0]),
            (MetricField::XPaths { delta: 0.1 }, [-1.4, 1.4, -1.4, 1.4]),
        ];
        for (field, [x0, x1, y0, y1]) in fields {
            for i in 0..50 {
                for j in 0..50 {
                    let x = [x0 + (x1 - x0) * (i as f64 + 0.5) / 50.0, y0 + (y1 - y0) * (j as f64 + 0.5) / 50.0];
                    let a = field.value(&x).unwrap();
                    assert_eq!(a.to_array()[0][1], a.to_array()[1][0]);
                    assert!(a.eigen().0[0] > 0.0, "{} at {x:?}", field.name());
                }
            }
        }
    }

    #[test]
    fn eigen_decomposition_reconstructs_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let a = Sym2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let (vals, vecs) = a.eigen();
            assert!(vals[0] <= vals[1]);
            let mut r = [[0.0; 2]; 2];
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        r[i][j] += vals[k] * vecs[k][i] * vecs[k][j];
                    }
                }
            }
            assert!(close(a, r, 1e-12));
        }
    }
}
