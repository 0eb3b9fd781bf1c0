//! Directional asymmetry of a channel.
//!
//! Global magnitude is the normalized Frobenius index `‖C − Cᵀ‖ / ‖C‖`, with
//! an off-diagonal variant computed on the error mass alone. The pair
//! decomposition splits asymmetry into *breadth* (how many class pairs are
//! imbalanced beyond a threshold) and *strength* (mean imbalance among those
//! pairs).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{smoothed_channel, zero_diagonal, Channel, ChannelError, ConfusionCounts};

/// Pair threshold for empirical confusion data.
pub const EPSILON_EMPIRICAL: f64 = 1e-12;
/// Pair threshold for simulated channels.
pub const EPSILON_SIMULATION: f64 = 1e-6;
/// Default add-α weight for the smoothed sensitivity variant.
pub const DEFAULT_LAPLACE_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsymmetryError {
    #[error("channel has no off-diagonal mass; collapse-filter this block instead")]
    DiagonalOnly,
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDecomposition {
    pub n_pairs: usize,
    /// `n_pairs / C(K, 2)`.
    pub f_pairs: f64,
    /// Mean `|C_ij − C_ji|` over counted pairs; `None` when no pair counts.
    pub mean_delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetrySummary {
    pub frobenius_index: f64,
    /// `None` when the channel has no off-diagonal mass.
    pub offdiag_frobenius: Option<f64>,
    pub n_pairs: usize,
    pub f_pairs: f64,
    pub mean_delta: Option<f64>,
    pub epsilon: f64,
}

/// `‖C − Cᵀ‖_F / ‖C‖_F`.
pub fn frobenius_asymmetry(ch: &Channel) -> f64 {
    let m = ch.matrix();
    m.sub(&m.transpose()).frobenius_norm() / m.frobenius_norm()
}

/// `‖C₀ − C₀ᵀ‖_F / ‖C₀‖_F` with `C₀` the diagonal-zeroed channel.
pub fn offdiag_frobenius_asymmetry(ch: &Channel) -> Result<f64, AsymmetryError> {
    let c0 = zero_diagonal(ch).into_inner();
    let denom = c0.frobenius_norm();
    if denom == 0.0 {
        return Err(AsymmetryError::DiagonalOnly);
    }
    Ok(c0.sub(&c0.transpose()).frobenius_norm() / denom)
}

/// Counts pairs `i < j` with `|C_ij − C_ji| > epsilon`.
pub fn pair_decomposition(ch: &Channel, epsilon: f64) -> PairDecomposition {
    assert!(epsilon >= 0.0, "pair threshold must be nonnegative");
    let k = ch.k();
    let mut n_pairs = 0usize;
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let d = (ch.get(i, j) - ch.get(j, i)).abs();
            if d > epsilon {
                n_pairs += 1;
                sum += d;
            }
        }
    }
    let total_pairs = k * (k - 1) / 2;
    PairDecomposition {
        n_pairs,
        f_pairs: n_pairs as f64 / total_pairs as f64,
        mean_delta: (n_pairs > 0).then(|| sum / n_pairs as f64),
    }
}

pub fn summarize(ch: &Channel, epsilon: f64) -> AsymmetrySummary {
    let pairs = pair_decomposition(ch, epsilon);
    AsymmetrySummary {
        frobenius_index: frobenius_asymmetry(ch),
        offdiag_frobenius: offdiag_frobenius_asymmetry(ch).ok(),
        n_pairs: pairs.n_pairs,
        f_pairs: pairs.f_pairs,
        mean_delta: pairs.mean_delta,
        epsilon,
    }
}

/// Sensitivity variant: the same summary on the add-`alpha` smoothed channel.
pub fn smoothed_summary(
    counts: &ConfusionCounts,
    alpha: f64,
    epsilon: f64,
) -> Result<AsymmetrySummary, AsymmetryError> {
    Ok(summarize(&smoothed_channel(counts, alpha)?, epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SquareMatrix;

    fn worked_example() -> Channel {
        Channel::with_uniform(
            SquareMatrix::from_rows(&[[0.8, 0.2, 0.0], [0.1, 0.8, 0.1], [0.0, 0.3, 0.7]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn worked_example_by_hand() {
        // C − Cᵀ has off-diagonal entries ±0.1 and ±0.2: squared sum 0.1.
        // ‖C‖² = 0.64+0.04+0.01+0.64+0.01+0.09+0.49 = 1.92.
        let ch = worked_example();
        let af = frobenius_asymmetry(&ch);
        assert!((af - (0.1f64 / 1.92).sqrt()).abs() < 1e-12);
        assert!((af - 0.2282).abs() < 1e-4);

        let off = offdiag_frobenius_asymmetry(&ch).unwrap();
        assert!((off - (0.1f64 / 0.15).sqrt()).abs() < 1e-12);
        assert!((off - 0.8165).abs() < 1e-4);

        // Pairs: (0,1) |0.2−0.1| = 0.1, (0,2) 0, (1,2) |0.1−0.3| = 0.2.
        let p = pair_decomposition(&ch, EPSILON_EMPIRICAL);
        assert_eq!(p.n_pairs, 2);
        assert!((p.f_pairs - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.mean_delta.unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn symmetric_channels_have_no_asymmetry() {
        let sym = Channel::with_uniform(
            SquareMatrix::from_rows(&[[0.6, 0.3, 0.1], [0.3, 0.4, 0.3], [0.1, 0.3, 0.6]]).unwrap(),
        )
        .unwrap();
        assert_eq!(frobenius_asymmetry(&sym), 0.0);
        assert_eq!(offdiag_frobenius_asymmetry(&sym).unwrap(), 0.0);
        let p = pair_decomposition(&sym, EPSILON_EMPIRICAL);
        assert_eq!(p.n_pairs, 0);
        assert_eq!(p.f_pairs, 0.0);
        assert_eq!(p.mean_delta, None);

        let swap = Channel::with_uniform(SquareMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap())
            .unwrap();
        assert_eq!(frobenius_asymmetry(&swap), 0.0);
    }

    #[test]
    fn identity_has_no_off_diagonal_mass() {
        let id = Channel::with_uniform(SquareMatrix::identity(4)).unwrap();
        assert_eq!(
            offdiag_frobenius_asymmetry(&id),
            Err(AsymmetryError::DiagonalOnly)
        );
        assert_eq!(summarize(&id, EPSILON_EMPIRICAL).offdiag_frobenius, None);
    }

    #[test]
    fn every_pair_asymmetric_gives_full_breadth() {
        // Upper triangle carries more mass than the lower one everywhere.
        let k = 16;
        let mut m = SquareMatrix::zeros(k);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] = if j > i { 2.0 } else { 1.0 };
            }
            let s: f64 = m.row(i).iter().sum();
            for v in m.row_mut(i) {
                *v /= s;
            }
        }
        let ch = Channel::with_uniform(m).unwrap();
        let p = pair_decomposition(&ch, EPSILON_SIMULATION);
        assert_eq!(p.n_pairs, 120);
        assert_eq!(p.f_pairs, 1.0);
    }
}
