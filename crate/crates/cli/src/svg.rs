//! Minimal static SVG figures in data coordinates.

use std::fmt::Write as _;

use lagot::lagrangian::MetricField;

pub struct Figure {
    lo: [f64; 2],
    hi: [f64; 2],
    width: f64,
    height: f64,
    body: String,
}

fn padded_bounds(points: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    if !lo[0].is_finite() {
        return ([-1.0, -1.0], [1.0, 1.0]);
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    for c in 0..2 {
        let mid = 0.5 * (lo[c] + hi[c]);
        lo[c] = mid - 0.55 * span;
        hi[c] = mid + 0.55 * span;
    }
    (lo, hi)
}

impl Figure {
    /// Square figure framing `points` with a margin.
    pub fn framing(points: &[[f64; 2]], size: f64) -> Self {
        let (lo, hi) = padded_bounds(points);
        Self { lo, hi, width: size, height: size, body: String::new() }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let x = (p[0] - self.lo[0]) / (self.hi[0] - self.lo[0]) * self.width;
        let y = (self.hi[1] - p[1]) / (self.hi[1] - self.lo[1]) * self.height;
        (x, y)
    }

    pub fn points(&mut self, points: &[[f64; 2]], color: &str, radius: f64, opacity: f64) {
        let _ = writeln!(self.body, r#"<g fill="{color}" fill-opacity="{opacity}">"#);
        for &p in points {
            let (x, y) = self.map(p);
            let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{radius}"/>"#);
        }
        self.body.push_str("</g>\n");
    }

    pub fn polyline(&mut self, points: &[[f64; 2]], color: &str, width: f64, opacity: f64) {
        let coords: Vec<String> = points
            .iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
            coords.join(" ")
        );
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], color: &str, width: f64) {
        let (x1, y1) = self.map(a);
        let (x2, y2) = self.map(b);
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}" stroke-width="{width}"/>"#
        );
    }

    /// Iso-lines of `f` at `levels` evenly spaced values, by marching squares.
    pub fn contours<F>(&mut self, f: F, levels: usize, resolution: usize)
    where
        F: Fn([f64; 2]) -> Option<f64>,
    {
        let n = resolution.max(2);
        let (lo, hi) = (self.lo, self.hi);
        let at = move |i: usize, j: usize| {
            [
                lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64,
                lo[1] + (hi[1] - lo[1]) * j as f64 / (n - 1) as f64,
            ]
        };
        let values: Vec<Option<f64>> = (0..n * n).map(|k| f(at(k / n, k % n))).collect();
        let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let (Some(min), Some(max)) =
            (finite.iter().copied().reduce(f64::min), finite.iter().copied().reduce(f64::max))
        else {
            return;
        };
        if max - min < 1e-12 {
            return;
        }
        self.body.push_str("<g class=\"contours\">\n");
        for l in 1..=levels {
            let level = min + (max - min) * l as f64 / (levels + 1) as f64;
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
                    let vals: Option<Vec<f64>> = corners.iter().map(|&(a, b)| values[a * n + b]).collect();
                    let Some(vals) = vals else { continue };
                    let mut cuts = Vec::with_capacity(4);
                    for e in 0..4 {
                        let (va, vb) = (vals[e], vals[(e + 1) % 4]);
                        if (va < level) != (vb < level) {
                            let s = (level - va) / (vb - va);
                            let (pa, pb) = (at(corners[e].0, corners[e].1), at(corners[(e + 1) % 4].0, corners[(e + 1) % 4].1));
                            cuts.push([pa[0] + s * (pb[0] - pa[0]), pa[1] + s * (pb[1] - pa[1])]);
                        }
                    }
                    for pair in cuts.chunks_exact(2) {
                        self.segment(pair[0], pair[1], "#8c6d31", 0.8);
                    }
                }
            }
        }
        self.body.push_str("</g>\n");
    }

    /// Eigenvector crosses of `metric` on an `n × n` grid: the cheap
    /// direction drawn long, the expensive one shortened by √(λ₁/λ₂).
    pub fn glyphs(&mut self, metric: &MetricField, n: usize) {
        let n = n.max(2);
        let cell = (self.hi[0] - self.lo[0]) / n as f64;
        self.body.push_str("<g class=\"glyphs\">\n");
        for i in 0..n {
            for j in 0..n {
                let p = [
                    self.lo[0] + cell * (i as f64 + 0.5),
                    self.lo[1] + (self.hi[1] - self.lo[1]) * (j as f64 + 0.5) / n as f64,
                ];
                let Ok(m) = metric.value(&p) else { continue };
                let (lam, u) = m.eigen();
                if !(lam[0] > 0.0 && lam[1] > 0.0) {
                    continue;
                }
                let lengths = [0.4 * cell, 0.4 * cell * (lam[0] / lam[1]).sqrt()];
                for k in 0..2 {
                    let d = [u[k][0] * lengths[k], u[k][1] * lengths[k]];
                    let color = if k == 0 { "#4b2991" } else { "#c0b3dd" };
                    self.segment([p[0] - d[0], p[1] - d[1]], [p[0] + d[0], p[1] + d[1]], color, 1.2);
                }
            }
        }
        self.body.push_str("</g>\n");
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}
