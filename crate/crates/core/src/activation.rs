//! Sigmoidal activations with limits 0 at -inf and 1 at +inf.

use crate::error::{Error, Result};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ActivationKind {
    #[default]
    Logistic,
    TanhRescaled,
    ArctanRescaled,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Logistic => "logistic",
            ActivationKind::TanhRescaled => "tanh",
            ActivationKind::ArctanRescaled => "arctan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logistic" => Ok(ActivationKind::Logistic),
            "tanh" | "tanhrescaled" => Ok(ActivationKind::TanhRescaled),
            "arctan" | "arctanrescaled" => Ok(ActivationKind::ArctanRescaled),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }

    pub fn eval(self, t: f64) -> f64 {
        activation(self, t)
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            ActivationKind::Logistic => {
                let s = logistic(t);
                s * (1.0 - s)
            }
            ActivationKind::TanhRescaled => {
                let c = (0.5 * t).cosh();
                0.25 / (c * c)
            }
            ActivationKind::ArctanRescaled => 1.0 / (PI * (1.0 + t * t)),
        }
    }

    pub fn inverse(self, v: f64) -> Result<f64> {
        activation_inverse(self, v)
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `sigma(t)`. TanhRescaled is `(1 + tanh(t/2))/2`, which coincides with the
/// logistic function analytically but is evaluated through `tanh`.
pub fn activation(kind: ActivationKind, t: f64) -> f64 {
    match kind {
        ActivationKind::Logistic => logistic(t),
        ActivationKind::TanhRescaled => {
            let u = 0.5 * t;
            if u >= 0.0 {
                0.5 * (1.0 + u.tanh())
            } else {
                // avoids cancellation in 1 + tanh(u)
                0.5 * u.exp() / u.cosh()
            }
        }
        ActivationKind::ArctanRescaled => 0.5 + t.atan() / PI,
    }
}

pub fn activation_inverse(kind: ActivationKind, v: f64) -> Result<f64> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::OutOfRange(v));
    }
    Ok(match kind {
        ActivationKind::Logistic => (v / (1.0 - v)).ln(),
        ActivationKind::TanhRescaled if v < 0.5 => (v / (1.0 - v)).ln(),
        ActivationKind::TanhRescaled => 2.0 * (2.0 * v - 1.0).atanh(),
        ActivationKind::ArctanRescaled => (PI * (v - 0.5)).tan(),
    })
}
