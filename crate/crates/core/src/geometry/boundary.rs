//! Arclength parametrization of the boundary components.
//!
//! A global arclength `s` in `[0, L)` runs over component 0, then component 1,
//! and so on. Each component is a periodic chart curve with its own map from
//! local arclength to curve parameter.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum ArcMap {
    /// Constant metric speed along the curve.
    Uniform { speed: f64 },
    /// Monotone table of (parameter, arclength) pairs, both ending at the period.
    Table { u: Vec<f64>, s: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ComponentParam {
    length: f64,
    period: f64,
    map: ArcMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryParam {
    components: Vec<ComponentParam>,
}

const TABLE_SIZE: usize = 4096;

impl BoundaryParam {
    /// Build from a metric speed function `speed(comp, u) = |c'(u)|_g`.
    pub fn from_speed(components: usize, period: f64, speed: impl Fn(usize, f64) -> f64) -> Self {
        let components = (0..components)
            .map(|comp| {
                let probe: Vec<f64> = (0..256).map(|k| speed(comp, period * k as f64 / 256.0)).collect();
                let lo = probe.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = probe.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if (hi - lo) <= 1e-13 * hi {
                    ComponentParam { length: hi * period, period, map: ArcMap::Uniform { speed: hi } }
                } else {
                    let du = period / TABLE_SIZE as f64;
                    let mut u = Vec::with_capacity(TABLE_SIZE + 1);
                    let mut s = Vec::with_capacity(TABLE_SIZE + 1);
                    let mut acc = 0.0;
                    let mut prev = speed(comp, 0.0);
                    u.push(0.0);
                    s.push(0.0);
                    for k in 1..=TABLE_SIZE {
                        let uk = du * k as f64;
                        let cur = speed(comp, uk);
                        acc += 0.5 * (prev + cur) * du;
                        prev = cur;
                        u.push(uk);
                        s.push(acc);
                    }
                    ComponentParam { length: acc, period, map: ArcMap::Table { u, s } }
                }
            })
            .collect();
        Self { components }
    }

    pub fn total_length(&self) -> f64 {
        self.components.iter().map(|c| c.length).sum()
    }

    pub fn components(&self) -> usize {
        self.components.len()
    }

    pub fn component_length(&self, comp: usize) -> f64 {
        self.components[comp].length
    }

    /// Offset of component `comp` in the global arclength.
    pub fn component_offset(&self, comp: usize) -> f64 {
        self.components[..comp].iter().map(|c| c.length).sum()
    }

    /// Split a global arclength into (component, local arclength).
    pub fn split(&self, s: f64) -> (usize, f64) {
        let total = self.total_length();
        let mut s = s.rem_euclid(total);
        for (k, c) in self.components.iter().enumerate() {
            if s < c.length || k + 1 == self.components.len() {
                return (k, s.min(c.length));
            }
            s -= c.length;
        }
        unreachable!()
    }

    /// Curve parameter of the point at global arclength `s`.
    pub fn parameter(&self, s: f64) -> (usize, f64) {
        let (comp, local) = self.split(s);
        let c = &self.components[comp];
        let u = match &c.map {
            ArcMap::Uniform { speed } => local / speed,
            ArcMap::Table { u, s } => interpolate(s, u, local),
        };
        (comp, u)
    }

    /// Global arclength of the curve point `(comp, u)`.
    pub fn arclength(&self, comp: usize, u: f64) -> f64 {
        let c = &self.components[comp];
        let u = u.rem_euclid(c.period);
        let local = match &c.map {
            ArcMap::Uniform { speed } => u * speed,
            ArcMap::Table { u: us, s } => interpolate(us, s, u),
        };
        self.component_offset(comp) + local
    }

    /// Signed distance `b - a` along the boundary, reduced to the component
    /// period. Points on different components are `None`.
    pub fn separation(&self, a: f64, b: f64) -> Option<f64> {
        let (ca, la) = self.split(a);
        let (cb, lb) = self.split(b);
        if ca != cb {
            return None;
        }
        let len = self.components[ca].length;
        let mut d = (lb - la).rem_euclid(len);
        if d > 0.5 * len {
            d -= len;
        }
        Some(d)
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(k) => return ys[k],
        Err(k) => k.clamp(1, xs.len() - 1),
    };
    let t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + t * (ys[k] - ys[k - 1])
}
