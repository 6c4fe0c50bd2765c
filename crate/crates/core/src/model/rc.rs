//! Scalar reaction coordinates ξ with nonvanishing gradient, mapping into
//! an interval or a torus.

use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

type MapFn = dyn Fn([f64; 2]) -> f64 + Send + Sync;
type GradFn = dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync;

/// Value range of a reaction coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RcRange {
    Interval(f64, f64),
    /// Periodic range; values are identified modulo the length.
    Torus(f64, f64),
}

impl RcRange {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            RcRange::Interval(a, b) | RcRange::Torus(a, b) => (*a, *b),
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self, RcRange::Torus(..))
    }

    pub fn width(&self) -> f64 {
        let (a, b) = self.bounds();
        b - a
    }

    /// Wrap a value into a torus range; identity on intervals.
    pub fn wrap(&self, z: f64) -> f64 {
        match self {
            RcRange::Interval(..) => z,
            RcRange::Torus(a, b) => a + (z - a).rem_euclid(b - a),
        }
    }
}

#[derive(Clone)]
enum RcForm {
    /// Coordinate projection x ↦ x_axis.
    Axis(usize),
    /// Linear form x ↦ c·x.
    Linear([f64; 2]),
    Custom { map: Arc<MapFn>, grad: Arc<GradFn> },
}

/// Reaction coordinate ξ together with its range.
#[derive(Clone)]
pub struct ReactionCoordinate {
    name: String,
    form: RcForm,
    range: RcRange,
}

impl fmt::Debug for ReactionCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReactionCoordinate")
            .field("name", &self.name)
            .field("range", &self.range)
            .finish()
    }
}

impl ReactionCoordinate {
    pub fn axis(axis: usize, range: RcRange) -> Result<ReactionCoordinate> {
        if axis > 1 {
            return Err(Error::config("axis projection supports axes 0 and 1"));
        }
        let name = if axis == 0 { "x" } else { "y" };
        Ok(ReactionCoordinate { name: name.into(), form: RcForm::Axis(axis), range })
    }

    pub fn linear(c: [f64; 2], range: RcRange) -> Result<ReactionCoordinate> {
        if c[0] * c[0] + c[1] * c[1] <= 0.0 {
            return Err(Error::config("linear reaction coordinate needs a nonzero direction"));
        }
        Ok(ReactionCoordinate {
            name: format!("{}*x+{}*y", c[0], c[1]),
            form: RcForm::Linear(c),
            range,
        })
    }

    pub fn custom(
        name: impl Into<String>,
        range: RcRange,
        map: impl Fn([f64; 2]) -> f64 + Send + Sync + 'static,
        grad: impl Fn([f64; 2]) -> [f64; 2] + Send + Sync + 'static,
    ) -> ReactionCoordinate {
        ReactionCoordinate {
            name: name.into(),
            range,
            form: RcForm::Custom { map: Arc::new(map), grad: Arc::new(grad) },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn range(&self) -> RcRange {
        self.range
    }

    /// Axis index if ξ is a coordinate projection.
    pub fn as_axis(&self) -> Option<usize> {
        match self.form {
            RcForm::Axis(a) => Some(a),
            _ => None,
        }
    }

    #[inline]
    pub fn value(&self, x: [f64; 2]) -> f64 {
        let z = match &self.form {
            RcForm::Axis(a) => x[*a],
            RcForm::Linear(c) => c[0] * x[0] + c[1] * x[1],
            RcForm::Custom { map, .. } => map(x),
        };
        self.range.wrap(z)
    }

    #[inline]
    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        match &self.form {
            RcForm::Axis(a) => {
                let mut g = [0.0; 2];
                g[*a] = 1.0;
                g
            }
            RcForm::Linear(c) => *c,
            RcForm::Custom { grad, .. } => grad(x),
        }
    }

    /// Laplacian of ξ. Zero for affine coordinates, central differences of
    /// the gradient otherwise.
    pub fn laplacian(&self, x: [f64; 2], dim: usize) -> f64 {
        match &self.form {
            RcForm::Axis(_) | RcForm::Linear(_) => 0.0,
            RcForm::Custom { .. } => {
                let h = 1e-5;
                let mut lap = 0.0;
                for a in 0..dim {
                    let mut xp = x;
                    let mut xm = x;
                    xp[a] += h;
                    xm[a] -= h;
                    lap += (self.gradient(xp)[a] - self.gradient(xm)[a]) / (2.0 * h);
                }
                lap
            }
        }
    }

    /// Divergence of ∇ξ/|∇ξ|², the geometric part of the local mean force.
    /// Zero for affine coordinates, finite differences otherwise.
    pub fn div_grad_over_norm2(&self, x: [f64; 2], dim: usize) -> Result<f64> {
        match &self.form {
            RcForm::Axis(_) | RcForm::Linear(_) => Ok(0.0),
            RcForm::Custom { .. } => {
                let h = 1e-5;
                let field = |y: [f64; 2]| -> Result<[f64; 2]> {
                    let g = self.gradient(y);
                    let n2 = g[0] * g[0] + g[1] * g[1];
                    if n2 < 1e-16 {
                        return Err(Error::numerics(
                            "reaction coordinate gradient vanishes inside the domain",
                        ));
                    }
                    Ok([g[0] / n2, g[1] / n2])
                };
                let mut div = 0.0;
                for a in 0..dim {
                    let mut xp = x;
                    let mut xm = x;
                    xp[a] += h;
                    xm[a] -= h;
                    div += (field(xp)?[a] - field(xm)?[a]) / (2.0 * h);
                }
                Ok(div)
            }
        }
    }
}
