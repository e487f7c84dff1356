//! Feature maps `φ(s, a) ∈ R^d` with `‖φ‖₂ ≤ 1`, and the learned weight vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::linalg::norm2;

/// Learned weight vector `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub weights: Vec<f64>,
}

impl Parameter {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn distance(&self, other: &Parameter) -> f64 {
        crate::linalg::dist2(&self.weights, &other.weights)
    }

    pub fn squared_distance(&self, other: &Parameter) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<Vec<f64>> for Parameter {
    fn from(weights: Vec<f64>) -> Self {
        Self { weights }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    /// `φ(s,a) = e_{(s mod d1)·d2 + a mod d2}`
    Tiled { d1: usize, d2: usize },
    /// `φ(s,a) = e_{s·A + a}`
    Full,
    /// Dense `[state][action][dim]` table.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    kind: Kind,
}

impl FeatureMap {
    pub fn tiled(num_states: usize, num_actions: usize, d1: usize, d2: usize) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || d1 == 0 || d2 == 0 {
            return Err(invalid("tiled features need positive sizes"));
        }
        Ok(Self {
            num_states,
            num_actions,
            dim: d1 * d2,
            kind: Kind::Tiled { d1, d2 },
        })
    }

    /// One coordinate per state-action pair; `θ` is then the Q-table.
    pub fn full_indicator(num_states: usize, num_actions: usize) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("indicator features need positive sizes"));
        }
        Ok(Self {
            num_states,
            num_actions,
            dim: num_states * num_actions,
            kind: Kind::Full,
        })
    }

    /// Arbitrary features laid out `[state][action][dim]`; every vector must have norm ≤ 1.
    pub fn table(num_states: usize, num_actions: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || dim == 0 {
            return Err(invalid("feature table needs positive sizes"));
        }
        let expected = num_states * num_actions * dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "feature table entries",
                expected,
                found: values.len(),
            });
        }
        for (i, phi) in values.chunks_exact(dim).enumerate() {
            let n = norm2(phi);
            if !n.is_finite() || n > 1.0 + 1e-12 {
                return Err(invalid(format!(
                    "feature vector at (state {}, action {}) has norm {n} > 1",
                    i / num_actions,
                    i % num_actions
                )));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            dim,
            kind: Kind::Table { values },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn is_full_indicator(&self) -> bool {
        matches!(self.kind, Kind::Full)
    }

    /// Tile sizes `(d1, d2)` when this is a tiled map.
    pub fn tiles(&self) -> Option<(usize, usize)> {
        match self.kind {
            Kind::Tiled { d1, d2 } => Some((d1, d2)),
            _ => None,
        }
    }

    /// Active coordinate for one-hot kinds.
    #[inline]
    pub fn indicator_index(&self, s: usize, a: usize) -> Option<usize> {
        match self.kind {
            Kind::Tiled { d1, d2 } => Some((s % d1) * d2 + a % d2),
            Kind::Full => Some(s * self.num_actions + a),
            Kind::Table { .. } => None,
        }
    }

    /// Calls `f(k, φ_k(s,a))` for every nonzero coordinate.
    #[inline]
    pub fn for_each_nonzero(&self, s: usize, a: usize, mut f: impl FnMut(usize, f64)) {
        match &self.kind {
            Kind::Table { values } => {
                let start = (s * self.num_actions + a) * self.dim;
                for (k, &v) in values[start..start + self.dim].iter().enumerate() {
                    if v != 0.0 {
                        f(k, v);
                    }
                }
            }
            _ => f(self.indicator_index(s, a).unwrap_or_default(), 1.0),
        }
    }

    /// `φ(s,a)ᵀθ` without bounds checks beyond slice indexing.
    #[inline]
    pub fn dot(&self, s: usize, a: usize, theta: &[f64]) -> f64 {
        match &self.kind {
            Kind::Table { values } => {
                let start = (s * self.num_actions + a) * self.dim;
                values[start..start + self.dim]
                    .iter()
                    .zip(theta)
                    .map(|(x, y)| x * y)
                    .sum()
            }
            _ => theta[self.indicator_index(s, a).unwrap_or_default()],
        }
    }

    /// `out += scale · φ(s,a)`
    #[inline]
    pub fn add_scaled(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        self.for_each_nonzero(s, a, |k, v| out[k] += scale * v);
    }

    /// Dense copy of `φ(s,a)`.
    pub fn vector(&self, s: usize, a: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_scaled(s, a, 1.0, &mut v);
        v
    }

    pub(crate) fn check_pair(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                bound: self.num_states,
            });
        }
        if a >= self.num_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                bound: self.num_actions,
            });
        }
        Ok(())
    }

    pub(crate) fn check_theta(&self, theta: &Parameter) -> Result<()> {
        if theta.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "parameter length",
                expected: self.dim,
                found: theta.dim(),
            });
        }
        Ok(())
    }
}

/// Linear action value `Q_θ(s,a) = φ(s,a)ᵀθ`.
pub fn q_value(features: &FeatureMap, theta: &Parameter, s: usize, a: usize) -> Result<f64> {
    features.check_pair(s, a)?;
    features.check_theta(theta)?;
    Ok(features.dot(s, a, &theta.weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_parameter_gives_zero_values() {
        let f = FeatureMap::tiled(10, 7, 3, 2).unwrap();
        let theta = Parameter::zeros(f.dim());
        for s in 0..10 {
            for a in 0..7 {
                assert_eq!(q_value(&f, &theta, s, a).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn full_indicator_reads_table_entry() {
        let f = FeatureMap::full_indicator(4, 3).unwrap();
        let theta = Parameter::new((0..12).map(|i| i as f64 * 1.5).collect());
        for s in 0..4 {
            for a in 0..3 {
                assert_eq!(q_value(&f, &theta, s, a).unwrap(), theta.weights[s * 3 + a]);
            }
        }
    }

    #[test]
    fn tiled_index_arithmetic() {
        let f = FeatureMap::tiled(100, 100, 5, 5).unwrap();
        assert_eq!(f.indicator_index(7, 13), Some(13));
        let mut theta = Parameter::zeros(25);
        theta.weights[13] = 4.0;
        assert_eq!(q_value(&f, &theta, 7, 13).unwrap(), 4.0);
    }

    #[test]
    fn out_of_range_rejected() {
        let f = FeatureMap::tiled(4, 3, 2, 2).unwrap();
        let theta = Parameter::zeros(4);
        assert!(matches!(q_value(&f, &theta, 4, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(q_value(&f, &theta, 0, 3), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(
            q_value(&f, &Parameter::zeros(3), 0, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn table_norm_enforced() {
        assert!(FeatureMap::table(1, 1, 2, vec![0.8, 0.7]).is_err());
        let f = FeatureMap::table(1, 2, 2, vec![0.6, 0.8, 0.0, -0.5]).unwrap();
        let theta = Parameter::new(vec![1.0, 2.0]);
        assert!((q_value(&f, &theta, 0, 0).unwrap() - 2.2).abs() < 1e-15);
        assert_eq!(q_value(&f, &theta, 0, 1).unwrap(), -1.0);
    }

    proptest! {
        #[test]
        fn tiled_index_in_range_and_unit_norm(
            s in 0usize..200, a in 0usize..200, d1 in 1usize..12, d2 in 1usize..12
        ) {
            let f = FeatureMap::tiled(200, 200, d1, d2).unwrap();
            let k = f.indicator_index(s, a).unwrap();
            prop_assert!(k < f.dim());
            prop_assert!((norm2(&f.vector(s, a)) - 1.0).abs() < 1e-15);
        }
    }
}
