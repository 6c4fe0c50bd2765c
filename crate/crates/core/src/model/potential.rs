//! Potential energy landscapes with analytic gradients.
//!
//! Built-in landscapes:
//!
//! * `double-well-1d`: v(x) = h (x² - 1)², barrier height h (default 1),
//! * `harmonic-1d`: v(x) = α x² / 2,
//! * `energetic-2d`: V(x, y) = (x² - 1)² + 2 y² + a x y (default a = 0),
//! * `entropic-2d`: zero energy on [-1,1]² minus two slabs that leave a
//!   corridor |y| ≤ w around the origin (default w = 0.1),
//! * `flat`: zero energy on a hard-wall box.

use super::domain::{Block, Domain};
use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

type EnergyFn = dyn Fn([f64; 2]) -> f64 + Send + Sync;
type GradientFn = dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync;

#[derive(Clone)]
enum Form {
    DoubleWell { h: f64 },
    Harmonic { alpha: f64 },
    Energetic { a: f64 },
    Flat,
    Custom { energy: Arc<EnergyFn>, gradient: Arc<GradientFn> },
}

/// A potential on a [`Domain`]. Energy and gradient are defined on all of
/// space; the domain decides where the dynamics and quadrature live.
#[derive(Clone)]
pub struct Potential {
    name: String,
    dim: usize,
    domain: Domain,
    form: Form,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

pub const BUILTIN_NAMES: [&str; 5] =
    ["double-well-1d", "harmonic-1d", "energetic-2d", "entropic-2d", "flat"];

impl Potential {
    /// Construct a built-in potential by name.
    pub fn builtin(name: &str, params: &[f64]) -> Result<Potential> {
        match name {
            "double-well-1d" => {
                let h = match params {
                    [] => 1.0,
                    [h] => *h,
                    _ => return Err(bad_params(name, "[h]", params)),
                };
                if !(h > 0.0) {
                    return Err(Error::config("double-well-1d: barrier height must be positive"));
                }
                Ok(Potential {
                    name: name.into(),
                    dim: 1,
                    domain: Domain::all_space(1),
                    form: Form::DoubleWell { h },
                })
            }
            "harmonic-1d" => {
                let alpha = match params {
                    [] => 1.0,
                    [a] => *a,
                    _ => return Err(bad_params(name, "[alpha]", params)),
                };
                if !(alpha > 0.0) {
                    return Err(Error::config("harmonic-1d: stiffness must be positive"));
                }
                Ok(Potential {
                    name: name.into(),
                    dim: 1,
                    domain: Domain::all_space(1),
                    form: Form::Harmonic { alpha },
                })
            }
            "energetic-2d" => {
                let a = match params {
                    [] => 0.0,
                    [a] => *a,
                    _ => return Err(bad_params(name, "[a]", params)),
                };
                if !a.is_finite() {
                    return Err(Error::config("energetic-2d: coupling must be finite"));
                }
                Ok(Potential {
                    name: name.into(),
                    dim: 2,
                    domain: Domain::all_space(2),
                    form: Form::Energetic { a },
                })
            }
            "entropic-2d" => {
                let w = match params {
                    [] => 0.1,
                    [w] => *w,
                    _ => return Err(bad_params(name, "[corridor half-width]", params)),
                };
                if !(w > 0.0 && w < 1.0) {
                    return Err(Error::config("entropic-2d: corridor half-width must be in (0, 1)"));
                }
                let domain = Domain::boxed(
                    2,
                    [-1.0, -1.0],
                    [1.0, 1.0],
                    [false, false],
                    vec![
                        Block { lo: [-0.2, w], hi: [0.2, 1.0] },
                        Block { lo: [-0.2, -1.0], hi: [0.2, -w] },
                    ],
                )?;
                Ok(Potential { name: name.into(), dim: 2, domain, form: Form::Flat })
            }
            "flat" => {
                let domain = match params {
                    [] => Domain::interval(0.0, 1.0)?,
                    [lo, hi] => Domain::interval(*lo, *hi)?,
                    [lo0, hi0, lo1, hi1] => Domain::rectangle([*lo0, *lo1], [*hi0, *hi1])?,
                    _ => return Err(bad_params(name, "[] | [lo, hi] | [lo0, hi0, lo1, hi1]", params)),
                };
                let dim = domain.dim();
                Ok(Potential { name: name.into(), dim, domain, form: Form::Flat })
            }
            _ => Err(Error::config(format!(
                "unknown potential '{name}' (expected one of {})",
                BUILTIN_NAMES.join(", ")
            ))),
        }
    }

    /// A user-defined potential from closures.
    pub fn custom(
        name: impl Into<String>,
        domain: Domain,
        energy: impl Fn([f64; 2]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn([f64; 2]) -> [f64; 2] + Send + Sync + 'static,
    ) -> Potential {
        let dim = domain.dim();
        Potential {
            name: name.into(),
            dim,
            domain,
            form: Form::Custom { energy: Arc::new(energy), gradient: Arc::new(gradient) },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Replace the domain (bounds or periodicity), keeping the energy.
    pub fn with_domain(mut self, domain: Domain) -> Result<Potential> {
        if domain.dim() != self.dim {
            return Err(Error::config("replacement domain has wrong dimension"));
        }
        self.domain = domain;
        Ok(self)
    }

    #[inline]
    pub fn energy(&self, x: [f64; 2]) -> f64 {
        match &self.form {
            Form::DoubleWell { h } => {
                let s = x[0] * x[0] - 1.0;
                h * s * s
            }
            Form::Harmonic { alpha } => 0.5 * alpha * x[0] * x[0],
            Form::Energetic { a } => {
                let s = x[0] * x[0] - 1.0;
                s * s + 2.0 * x[1] * x[1] + a * x[0] * x[1]
            }
            Form::Flat => 0.0,
            Form::Custom { energy, .. } => energy(x),
        }
    }

    #[inline]
    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        match &self.form {
            Form::DoubleWell { h } => [4.0 * h * x[0] * (x[0] * x[0] - 1.0), 0.0],
            Form::Harmonic { alpha } => [alpha * x[0], 0.0],
            Form::Energetic { a } => [
                4.0 * x[0] * (x[0] * x[0] - 1.0) + a * x[1],
                4.0 * x[1] + a * x[0],
            ],
            Form::Flat => [0.0, 0.0],
            Form::Custom { gradient, .. } => gradient(x),
        }
    }
}

fn bad_params(name: &str, expected: &str, got: &[f64]) -> Error {
    Error::config(format!(
        "{name}: invalid parameter count, expected {expected}, got {} values",
        got.len()
    ))
}
