//! Cubic convolution (Catmull-Rom) interpolation on uniform axes.
//!
//! Shared by the grid metric, grid tensor fields and boundary samples. The
//! kernel reproduces quadratics and gives a C¹ interpolant.

/// A uniform 1-D axis of `n` nodes at `origin + i * spacing`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub origin: f64,
    pub spacing: f64,
    pub n: usize,
    pub periodic: bool,
}

/// Four node indices with value and derivative weights.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dweight: [f64; 4],
}

pub fn cubic_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t + 2.0 * t2 - t3),
        0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
        0.5 * (t + 4.0 * t2 - 3.0 * t3),
        0.5 * (-t2 + t3),
    ];
    let d = [
        0.5 * (-1.0 + 4.0 * t - 3.0 * t2),
        0.5 * (-10.0 * t + 9.0 * t2),
        0.5 * (1.0 + 8.0 * t - 9.0 * t2),
        0.5 * (-2.0 * t + 3.0 * t2),
    ];
    (w, d)
}

impl Axis {
    pub fn new(origin: f64, spacing: f64, n: usize, periodic: bool) -> Self {
        Self { origin, spacing, n, periodic }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.spacing
    }

    /// Stencil for evaluating at `x`. Non-periodic axes return `None` when the
    /// four-point stencil would leave the node range, unless `clamp` is set, in
    /// which case out-of-range indices are clamped to the end nodes.
    pub fn stencil(&self, x: f64, clamp: bool) -> Option<Stencil> {
        let u = (x - self.origin) / self.spacing;
        if !u.is_finite() {
            return None;
        }
        let i0 = u.floor();
        let t = u - i0;
        let i0 = i0 as i64;
        let n = self.n as i64;
        let (w, d) = cubic_weights(t);
        let mut index = [0usize; 4];
        for (k, slot) in index.iter_mut().enumerate() {
            let i = i0 - 1 + k as i64;
            *slot = if self.periodic {
                i.rem_euclid(n) as usize
            } else if (0..n).contains(&i) {
                i as usize
            } else if clamp {
                i.clamp(0, n - 1) as usize
            } else {
                return None;
            };
        }
        let inv = 1.0 / self.spacing;
        Some(Stencil { index, weight: w, dweight: d.map(|v| v * inv) })
    }
}

/// Fourth-order central difference coefficients for offsets -2, -1, 1, 2.
pub const CENTRAL4: [(i64, f64); 4] = [(-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0)];

/// Fourth-order central derivative of a scalar function.
pub fn central_diff4(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    CENTRAL4.iter().map(|&(o, c)| c * f(x + o as f64 * step)).sum::<f64>() / step
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity_and_reproduce_quadratics() {
        for &t in &[0.0, 0.13, 0.5, 0.97] {
            let (w, d) = cubic_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(d.iter().sum::<f64>().abs() < 1e-14);
            let nodes = [-1.0, 0.0, 1.0, 2.0];
            let quad = |x: f64| 0.3 + 1.7 * x - 0.8 * x * x;
            let v: f64 = nodes.iter().zip(w).map(|(x, w)| w * quad(*x)).sum();
            assert!((v - quad(t)).abs() < 1e-13);
            let dv: f64 = nodes.iter().zip(d).map(|(x, d)| d * quad(*x)).sum();
            assert!((dv - (1.7 - 1.6 * t)).abs() < 1e-13);
        }
    }

    #[test]
    fn periodic_axis_wraps() {
        let ax = Axis::new(0.0, 0.5, 8, true);
        let st = ax.stencil(0.1, false).unwrap();
        assert_eq!(st.index, [7, 0, 1, 2]);
        let ax = Axis::new(0.0, 0.5, 8, false);
        assert!(ax.stencil(0.1, false).is_none());
        assert_eq!(ax.stencil(0.1, true).unwrap().index, [0, 0, 1, 2]);
    }
}
