use std::f64::consts::TAU;

use super::Point;

/// Coordinate domain of a surface with boundary.
///
/// `Disk` is the Euclidean disk `|x| < radius`; `Strip` is the annulus
/// `[-half_width, half_width] x R/circumference Z` in coordinates `(r, phi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Chart {
    Disk { radius: f64 },
    Strip { half_width: f64, circumference: f64 },
}

/// Boundary curve point with first and second parameter derivatives.
#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub point: Point,
    pub d1: Point,
    pub d2: Point,
}

impl Chart {
    /// Boundary defining function, positive inside.
    pub fn rho(&self, x: &Point) -> f64 {
        match *self {
            Chart::Disk { radius } => radius - x.norm(),
            Chart::Strip { half_width, .. } => half_width - x[0].abs(),
        }
    }

    /// Differential of `rho`, as a covector in chart coordinates.
    pub fn grad_rho(&self, x: &Point) -> Point {
        match *self {
            Chart::Disk { .. } => {
                let r = x.norm();
                if r == 0.0 {
                    Point::zeros()
                } else {
                    -x / r
                }
            }
            Chart::Strip { .. } => Point::new(-x[0].signum(), 0.0),
        }
    }

    pub fn components(&self) -> usize {
        match self {
            Chart::Disk { .. } => 1,
            Chart::Strip { .. } => 2,
        }
    }

    /// Period of the boundary curve parameter.
    pub fn parameter_period(&self) -> f64 {
        match *self {
            Chart::Disk { .. } => TAU,
            Chart::Strip { circumference, .. } => circumference,
        }
    }

    /// Positively oriented boundary curve of component `comp` at parameter `u`.
    pub fn curve(&self, comp: usize, u: f64) -> CurvePoint {
        match *self {
            Chart::Disk { radius } => {
                let (s, c) = u.sin_cos();
                CurvePoint {
                    point: Point::new(radius * c, radius * s),
                    d1: Point::new(-radius * s, radius * c),
                    d2: Point::new(-radius * c, -radius * s),
                }
            }
            Chart::Strip { half_width, .. } => {
                if comp == 0 {
                    CurvePoint { point: Point::new(half_width, u), d1: Point::new(0.0, 1.0), d2: Point::zeros() }
                } else {
                    CurvePoint { point: Point::new(-half_width, -u), d1: Point::new(0.0, -1.0), d2: Point::zeros() }
                }
            }
        }
    }

    /// Component and curve parameter of the boundary point nearest to `x`.
    pub fn locate(&self, x: &Point) -> (usize, f64) {
        match *self {
            Chart::Disk { .. } => (0, x[1].atan2(x[0]).rem_euclid(TAU)),
            Chart::Strip { circumference, .. } => {
                if x[0] >= 0.0 {
                    (0, x[1].rem_euclid(circumference))
                } else {
                    (1, (-x[1]).rem_euclid(circumference))
                }
            }
        }
    }

    /// Chart enlarged by the fraction `margin`.
    pub fn enlarged(&self, margin: f64) -> Chart {
        match *self {
            Chart::Disk { radius } => Chart::Disk { radius: radius * (1.0 + margin) },
            Chart::Strip { half_width, circumference } => {
                Chart::Strip { half_width: half_width * (1.0 + margin), circumference }
            }
        }
    }

    /// Characteristic size used to scale steps and slacks.
    pub fn size(&self) -> f64 {
        match *self {
            Chart::Disk { radius } => radius,
            Chart::Strip { half_width, .. } => half_width,
        }
    }

    /// Whether `x` lies in the chart dilated by `slack` (absolute).
    pub fn contains_dilated(&self, x: &Point, slack: f64) -> bool {
        self.rho(x) > -slack
    }

    /// Axis-aligned bounding box `[lo, hi]` of the closed domain.
    pub fn bounding_box(&self) -> (Point, Point) {
        match *self {
            Chart::Disk { radius } => (Point::new(-radius, -radius), Point::new(radius, radius)),
            Chart::Strip { half_width, circumference } => {
                (Point::new(-half_width, 0.0), Point::new(half_width, circumference))
            }
        }
    }

    /// Whether the second coordinate is periodic.
    pub fn periodic_second(&self) -> bool {
        matches!(self, Chart::Strip { .. })
    }
}
