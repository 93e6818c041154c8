//! Natural cubic splines with fixed endpoints on uniform knots over [0, 1].
//!
//! The free parameters of a path are its interior knot values, stored
//! knot-major: knot `j` (1-based interior index) occupies
//! `phi[(j - 1) * d .. j * d]`.

use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_KNOTS: usize = 30;
pub const DEFAULT_EXPORT_SAMPLES: usize = 64;

/// Second derivatives of the natural cubic spline through `values` sampled
/// on a uniform grid with spacing `h`.
fn natural_second_derivatives(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // M[j-1] + 4 M[j] + M[j+1] = 6 (k[j+1] - 2 k[j] + k[j-1]) / h², M[0] = M[n-1] = 0
    let inner = n - 2;
    let mut diag = vec![4.0; inner];
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|j| 6.0 * (values[j + 1] - 2.0 * values[j] + values[j - 1]) / (h * h))
        .collect();
    for i in 1..inner {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    m[inner] = rhs[inner - 1] / diag[inner - 1];
    for i in (0..inner - 1).rev() {
        m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
    }
    m
}

/// Cubic `a + b s + c s² + d s³` in the local coordinate `s = t - t_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cubic {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Cubic {
    fn value(&self, s: f64) -> f64 {
        self.a + s * (self.b + s * (self.c + s * self.d))
    }

    fn slope(&self, s: f64) -> f64 {
        self.b + s * (2.0 * self.c + 3.0 * s * self.d)
    }

    fn curvature(&self, s: f64) -> f64 {
        2.0 * self.c + 6.0 * self.d * s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    knots: usize,
    /// `segments[c][j]` is coordinate `c` on `[t_j, t_{j+1}]`.
    segments: Vec<Vec<Cubic>>,
}

pub fn build_spline(x: &[f64], y: &[f64], phi: &[f64], n: usize) -> Result<PathSpline> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a spline needs at least 2 knots, got {n}")));
    }
    let d = x.len();
    if y.len() != d {
        return Err(Error::Dimension { expected: d, got: y.len() });
    }
    if phi.len() != (n - 2) * d {
        return Err(Error::Dimension { expected: (n - 2) * d, got: phi.len() });
    }
    if let Some(i) = phi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("spline parameter {i} is {}", phi[i])));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spline endpoint is not finite".into()));
    }
    let h = 1.0 / (n - 1) as f64;
    let mut segments = Vec::with_capacity(d);
    let mut values = vec![0.0; n];
    for c in 0..d {
        values[0] = x[c];
        values[n - 1] = y[c];
        for j in 1..n - 1 {
            values[j] = phi[(j - 1) * d + c];
        }
        let m = natural_second_derivatives(&values, h);
        let coord = (0..n - 1)
            .map(|j| Cubic {
                a: values[j],
                b: (values[j + 1] - values[j]) / h - h * (2.0 * m[j] + m[j + 1]) / 6.0,
                c: m[j] / 2.0,
                d: (m[j + 1] - m[j]) / (6.0 * h),
            })
            .collect();
        segments.push(coord);
    }
    Ok(PathSpline { x: x.to_vec(), y: y.to_vec(), knots: n, segments })
}

/// Interior knot values of the straight segment from `x` to `y`.
pub fn chord_params(x: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let h = 1.0 / (n.max(2) - 1) as f64;
    (1..n.saturating_sub(1))
        .flat_map(|j| {
            let t = j as f64 * h;
            x.iter().zip(y).map(move |(a, b)| a + t * (b - a))
        })
        .collect()
}

impl PathSpline {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn knots(&self) -> usize {
        self.knots
    }

    pub fn start(&self) -> &[f64] {
        &self.x
    }

    pub fn end(&self) -> &[f64] {
        &self.y
    }

    pub fn knot_time(&self, j: usize) -> f64 {
        j as f64 / (self.knots - 1) as f64
    }

    /// Interior knot values in the parameter layout.
    pub fn params(&self) -> Vec<f64> {
        let d = self.dim();
        let mut phi = vec![0.0; (self.knots - 2) * d];
        for (c, coord) in self.segments.iter().enumerate() {
            for j in 1..self.knots - 1 {
                phi[(j - 1) * d + c] = coord[j].a;
            }
        }
        phi
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let segs = self.knots - 1;
        let j = ((t * segs as f64) as usize).min(segs - 1);
        Ok((j, t - self.knot_time(j)))
    }

    fn check_segment(&self, seg: usize, t: f64) -> Result<f64> {
        if seg + 1 >= self.knots {
            return Err(Error::InvalidArgument(format!("segment {seg} out of range")));
        }
        Ok(t - self.knot_time(seg))
    }

    pub fn eval_path(&self, t: f64) -> Result<Vec<f64>> {
        let (j, s) = self.locate(t)?;
        if t == 0.0 {
            return Ok(self.x.clone());
        }
        if t == 1.0 {
            return Ok(self.y.clone());
        }
        Ok(self.segments.iter().map(|c| c[j].value(s)).collect())
    }

    pub fn eval_velocity(&self, t: f64) -> Result<Vec<f64>> {
        let (j, s) = self.locate(t)?;
        Ok(self.segments.iter().map(|c| c[j].slope(s)).collect())
    }

    pub fn eval_accel(&self, t: f64) -> Result<Vec<f64>> {
        let (j, s) = self.locate(t)?;
        Ok(self.segments.iter().map(|c| c[j].curvature(s)).collect())
    }

    /// Position, velocity and acceleration from the cubic of segment `seg`,
    /// which may be evaluated slightly outside its own interval.
    pub fn eval_on_segment(&self, seg: usize, t: f64) -> Result<[Vec<f64>; 3]> {
        let s = self.check_segment(seg, t)?;
        Ok([
            self.segments.iter().map(|c| c[seg].value(s)).collect(),
            self.segments.iter().map(|c| c[seg].slope(s)).collect(),
            self.segments.iter().map(|c| c[seg].curvature(s)).collect(),
        ])
    }

    pub fn sample(&self, count: usize) -> Result<Vec<(f64, Vec<f64>)>> {
        let count = count.max(2);
        (0..count)
            .map(|i| {
                let t = if i + 1 == count { 1.0 } else { i as f64 / (count - 1) as f64 };
                Ok((t, self.eval_path(t)?))
            })
            .collect()
    }
}

/// Linear maps from interior knot values to positions and velocities at
/// fixed times, for a spline whose endpoints are zero. Each is stored
/// row-major as `[(n - 2), times.len()]`.
///
/// A natural spline reproduces straight lines, so for endpoints `x`, `y` and
/// interior values `chord + offsets` the path is
/// `x (1 - t) + y t + offsetsᵀ P` and the velocity `y - x + offsetsᵀ V`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorBasis {
    pub knots: usize,
    pub times: Vec<f64>,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl InteriorBasis {
    pub fn new(knots: usize, times: &[f64]) -> Result<Self> {
        if knots < 2 {
            return Err(Error::InvalidArgument(format!("a spline needs at least 2 knots, got {knots}")));
        }
        let inner = knots - 2;
        let q = times.len();
        let mut position = vec![0.0; inner * q];
        let mut velocity = vec![0.0; inner * q];
        let mut phi = vec![0.0; inner];
        for j in 0..inner {
            phi.iter_mut().for_each(|v| *v = 0.0);
            phi[j] = 1.0;
            let s = build_spline(&[0.0], &[0.0], &phi, knots)?;
            for (i, &t) in times.iter().enumerate() {
                position[j * q + i] = s.eval_path(t)?[0];
                velocity[j * q + i] = s.eval_velocity(t)?[0];
            }
        }
        Ok(Self { knots, times: times.to_vec(), position, velocity })
    }

    pub fn interior(&self) -> usize {
        self.knots - 2
    }
}

/// Writes sampled paths as CSV rows `pair_id,t,x1,...,xd`.
pub fn write_paths_csv<W: Write>(out: &mut W, paths: &[PathSpline], samples: usize) -> Result<()> {
    let d = paths.first().map_or(0, PathSpline::dim);
    let header: Vec<String> = ["pair_id".to_string(), "t".to_string()]
        .into_iter()
        .chain((1..=d).map(|c| format!("x{c}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (id, path) in paths.iter().enumerate() {
        for (t, p) in path.sample(samples)? {
            let coords: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{id},{t},{}", coords.join(","))?;
        }
    }
    Ok(())
}
