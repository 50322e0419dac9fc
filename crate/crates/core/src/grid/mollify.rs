use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::{DiscreteDomain, ScalarField};

/// Exponential integral `E1(1)`.
const E1_AT_ONE: f64 = 0.219_383_934_395_520_27;

/// Radial bump `χ(z) = C exp(-1 / (1 - |z|^2))` on the unit disk, with unit
/// mass, rescaled as `χ_ε(z) = χ(z / ε) / ε^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mollifier {
    pub scale: f64,
}

impl Mollifier {
    pub fn new(scale: f64) -> Self {
        Mollifier { scale }
    }

    /// `1 / ∫ exp(-1/(1-|z|^2))`, using `∫_0^1 e^{-1/v} dv = e^{-1} - E1(1)`.
    pub fn normalization() -> f64 {
        1.0 / (PI * ((-1.0f64).exp() - E1_AT_ONE))
    }

    /// Unit-scale profile as a function of the radius.
    pub fn profile(s: f64) -> f64 {
        if s >= 1.0 {
            0.0
        } else {
            Self::normalization() * (-1.0 / (1.0 - s * s)).exp()
        }
    }

    /// `χ_ε` at radius `s`.
    pub fn eval(&self, s: f64) -> f64 {
        Self::profile(s / self.scale) / (self.scale * self.scale)
    }

    /// Sampled kernel on a lattice of spacing `h`, renormalized to unit sum.
    pub fn kernel(&self, h: f64) -> Vec<(i64, i64, f64)> {
        let reach = (self.scale / h).ceil() as i64;
        let mut taps = Vec::new();
        for dj in -reach..=reach {
            for di in -reach..=reach {
                let s = ((di * di + dj * dj) as f64).sqrt() * h;
                let w = self.eval(s) * h * h;
                if w > 0.0 {
                    taps.push((di, dj, w));
                }
            }
        }
        let total: f64 = taps.iter().map(|t| t.2).sum();
        for t in &mut taps {
            t.2 /= total;
        }
        taps
    }
}

/// Mollified field together with the nodes where it is defined.
#[derive(Clone, Debug)]
pub struct Mollified {
    pub field: ScalarField,
    pub defined: Vec<bool>,
}

impl Mollified {
    /// Interior nodes whose full 5-point stencil is defined and finite.
    pub fn stencil_nodes(&self, dom: &DiscreteDomain) -> Vec<usize> {
        dom.interior()
            .iter()
            .copied()
            .filter(|&k| {
                std::iter::once(k)
                    .chain(dom.neighbours(k))
                    .all(|n| self.defined[n] && self.field.values[n].is_finite())
            })
            .collect()
    }
}

/// Discrete convolution with the sampled `χ_ε`, defined at every domain node
/// whose kernel footprint lies inside the domain.
pub fn mollify(u: &ScalarField, m: &Mollifier, dom: &DiscreteDomain) -> Result<Mollified> {
    let h = dom.h();
    if !(m.scale >= 2.0 * h) {
        return Err(Error::Invalid(format!(
            "mollifier scale {} is below 2h = {}",
            m.scale,
            2.0 * h
        )));
    }
    let taps = m.kernel(h);
    let mut field = ScalarField::zeros(dom);
    let mut defined = vec![false; dom.len()];
    for k in dom.nodes() {
        let mut acc = 0.0;
        let mut ok = true;
        for &(di, dj, w) in &taps {
            match dom.offset(k, di, dj) {
                Some(n) if dom.kind(n).in_domain() => acc += w * u.values[n],
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            field.values[k] = acc;
            defined[k] = true;
        }
    }
    Ok(Mollified { field, defined })
}
