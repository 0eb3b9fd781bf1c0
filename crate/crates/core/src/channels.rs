//! Confusion counts as probabilistic channels.
//!
//! A confusion table `N[i][j]` counts responses of class `j` to stimuli of
//! class `i`. Row-normalizing it gives the conditional channel `C(y|x)`, which
//! together with a stimulus prior `p(x)` is everything the information and
//! asymmetry measures need. All information quantities are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::SquareMatrix;

/// Rows must sum to one within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-9;
/// Mean row entropy (nats) below which a channel counts as collapsed.
pub const COLLAPSE_ENTROPY_THRESHOLD: f64 = 1e-3;
/// Mean row-maximum probability above which a channel counts as collapsed.
pub const COLLAPSE_ROW_MAX_THRESHOLD: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("class count must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("count table has {got} entries, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("all rows are empty")]
    NoTrials,
    #[error("stimulus class {0} has no trials")]
    ZeroRow(usize),
    #[error("row {row} sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} is outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("prior is invalid: {0}")]
    InvalidPrior(String),
    #[error("block label `{0}` must be non-empty")]
    EmptyLabel(&'static str),
}

/// Identifies one unit of analysis: experiment × condition × model instance,
/// plus the system group it belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub system_group: String,
    pub experiment: String,
    pub condition: String,
    /// Empty for human observers.
    pub model_instance: String,
}

impl BlockKey {
    pub fn new(
        system_group: impl Into<String>,
        experiment: impl Into<String>,
        condition: impl Into<String>,
        model_instance: impl Into<String>,
    ) -> Result<Self, ChannelError> {
        let key = Self {
            system_group: system_group.into(),
            experiment: experiment.into(),
            condition: condition.into(),
            model_instance: model_instance.into(),
        };
        if key.system_group.is_empty() {
            return Err(ChannelError::EmptyLabel("system_group"));
        }
        if key.experiment.is_empty() {
            return Err(ChannelError::EmptyLabel("experiment"));
        }
        if key.condition.is_empty() {
            return Err(ChannelError::EmptyLabel("condition"));
        }
        Ok(key)
    }

    /// Key used for simulated tables.
    pub fn simulated() -> Self {
        Self {
            system_group: "simulation".into(),
            experiment: "simulation".into(),
            condition: "generated".into(),
            model_instance: String::new(),
        }
    }

    /// The (experiment, condition) pair used for block demeaning.
    pub fn experiment_condition(&self) -> (String, String) {
        (self.experiment.clone(), self.condition.clone())
    }
}

/// Raw K×K response counts for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    k: usize,
    counts: Vec<u64>,
    pub block: BlockKey,
}

impl ConfusionCounts {
    /// `counts` is row-major: `counts[i * k + j]` is the number of class-`j`
    /// responses to class-`i` stimuli.
    pub fn new(k: usize, counts: Vec<u64>, block: BlockKey) -> Result<Self, ChannelError> {
        if k < 2 {
            return Err(ChannelError::TooFewClasses(k));
        }
        if counts.len() != k * k {
            return Err(ChannelError::ShapeMismatch {
                expected: k * k,
                got: counts.len(),
            });
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(ChannelError::NoTrials);
        }
        Ok(Self { k, counts, block })
    }

    pub fn from_rows(rows: &[Vec<u64>], block: BlockKey) -> Result<Self, ChannelError> {
        let k = rows.len();
        let mut flat = Vec::with_capacity(k * k);
        for r in rows {
            if r.len() != k {
                return Err(ChannelError::ShapeMismatch {
                    expected: k * k,
                    got: rows.iter().map(Vec::len).sum(),
                });
            }
            flat.extend_from_slice(r);
        }
        Self::new(k, flat, block)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.k..(i + 1) * self.k]
    }

    pub fn as_flat(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts as reals, for likelihood evaluation.
    pub fn to_matrix(&self) -> SquareMatrix {
        SquareMatrix::from_flat(self.k, self.counts.iter().map(|&c| c as f64).collect())
            .expect("shape checked at construction")
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.k).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Row-stochastic conditional matrix `C(y|x)` with a stimulus prior `p(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    matrix: SquareMatrix,
    prior: Vec<f64>,
}

impl Channel {
    pub fn new(matrix: SquareMatrix, prior: Vec<f64>) -> Result<Self, ChannelError> {
        let k = matrix.dim();
        if k < 2 {
            return Err(ChannelError::TooFewClasses(k));
        }
        for (i, row) in matrix.rows().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ChannelError::EntryOutOfRange {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ChannelError::NotStochastic { row: i, sum });
            }
        }
        validate_prior(&prior, k)?;
        Ok(Self { matrix, prior })
    }

    /// Channel with the uniform prior `p(x) = 1/K`.
    pub fn with_uniform(matrix: SquareMatrix) -> Result<Self, ChannelError> {
        let k = matrix.dim();
        Self::new(matrix, vec![1.0 / k as f64; k])
    }

    /// Skips validation. Callers guarantee the invariants (used by solvers
    /// whose output is stochastic by construction).
    pub(crate) fn from_parts_unchecked(matrix: SquareMatrix, prior: Vec<f64>) -> Self {
        Self { matrix, prior }
    }

    /// Same conditional matrix, uniform prior.
    pub fn into_uniform_prior(self) -> Self {
        let k = self.k();
        Self {
            matrix: self.matrix,
            prior: vec![1.0 / k as f64; k],
        }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.matrix.dim()
    }

    #[inline]
    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    #[inline]
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    /// Output marginal `p(y) = Σ_x p(x) C(y|x)`.
    pub fn output_marginal(&self) -> Vec<f64> {
        let k = self.k();
        let mut py = vec![0.0; k];
        for (x, row) in self.matrix.rows().enumerate() {
            let px = self.prior[x];
            for (y, &c) in row.iter().enumerate() {
                py[y] += px * c;
            }
        }
        py
    }

    /// Applies a simultaneous class relabelling to rows, columns and prior.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            matrix: self.matrix.permuted(perm),
            prior: perm.iter().map(|&p| self.prior[p]).collect(),
        }
    }
}

fn validate_prior(prior: &[f64], k: usize) -> Result<(), ChannelError> {
    if prior.len() != k {
        return Err(ChannelError::InvalidPrior(format!(
            "length {} for {k} classes",
            prior.len()
        )));
    }
    if prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ChannelError::InvalidPrior("entry outside [0, 1]".into()));
    }
    let s: f64 = prior.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(ChannelError::InvalidPrior(format!("sums to {s}")));
    }
    Ok(())
}

/// C with its diagonal set to zero, i.e. only the error mass.
#[derive(Clone, Debug, PartialEq)]
pub struct OffDiagonalMatrix(SquareMatrix);

impl OffDiagonalMatrix {
    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn into_inner(self) -> SquareMatrix {
        self.0
    }
}

/// What to do with stimulus classes that have no trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroRowPolicy {
    #[default]
    Error,
    /// Remove the class from both axes and renormalize what remains.
    DropClass,
}

/// Result of [`normalize_rows`]: the channel plus the original indices of the
/// classes it retains (identity unless classes were dropped).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedChannel {
    pub channel: Channel,
    pub retained: Vec<usize>,
}

/// Row-normalizes counts into `C_ij = N_ij / Σ_j' N_ij'`, with the empirical
/// row mass as prior.
///
/// Under [`ZeroRowPolicy::DropClass`], classes with empty rows are removed
/// from rows and columns; responses naming a dropped class are discarded, and
/// removal repeats until every remaining row has trials.
pub fn normalize_rows(
    counts: &ConfusionCounts,
    policy: ZeroRowPolicy,
) -> Result<NormalizedChannel, ChannelError> {
    let k = counts.k();
    let mut retained: Vec<usize> = (0..k).collect();
    loop {
        let zero = retained
            .iter()
            .copied()
            .find(|&i| retained.iter().map(|&j| counts.get(i, j)).sum::<u64>() == 0);
        match (zero, policy) {
            (None, _) => break,
            (Some(i), ZeroRowPolicy::Error) => return Err(ChannelError::ZeroRow(i)),
            (Some(i), ZeroRowPolicy::DropClass) => {
                retained.retain(|&r| r != i);
                if retained.len() < 2 {
                    return Err(ChannelError::TooFewClasses(retained.len()));
                }
            }
        }
    }
    let kr = retained.len();
    let mut m = SquareMatrix::zeros(kr);
    let mut mass = vec![0.0; kr];
    for (a, &i) in retained.iter().enumerate() {
        let row_total: u64 = retained.iter().map(|&j| counts.get(i, j)).sum();
        mass[a] = row_total as f64;
        for (b, &j) in retained.iter().enumerate() {
            m[(a, b)] = counts.get(i, j) as f64 / row_total as f64;
        }
    }
    let total: f64 = mass.iter().sum();
    let prior = mass.into_iter().map(|v| v / total).collect();
    Ok(NormalizedChannel {
        channel: Channel::from_parts_unchecked(m, prior),
        retained,
    })
}

/// Add-`alpha` smoothed channel `(N_ij + α) / (Σ_j N_ij + Kα)`; the prior is
/// the smoothed row mass. Never has empty rows when `alpha > 0`.
pub fn smoothed_channel(counts: &ConfusionCounts, alpha: f64) -> Result<Channel, ChannelError> {
    assert!(alpha >= 0.0, "smoothing weight must be nonnegative");
    let k = counts.k();
    let mut m = SquareMatrix::zeros(k);
    let mut mass = vec![0.0; k];
    for i in 0..k {
        let row_total = counts.row(i).iter().sum::<u64>() as f64 + alpha * k as f64;
        if row_total <= 0.0 {
            return Err(ChannelError::ZeroRow(i));
        }
        mass[i] = row_total;
        for j in 0..k {
            m[(i, j)] = (counts.get(i, j) as f64 + alpha) / row_total;
        }
    }
    let total: f64 = mass.iter().sum();
    Ok(Channel::from_parts_unchecked(
        m,
        mass.into_iter().map(|v| v / total).collect(),
    ))
}

pub fn zero_diagonal(ch: &Channel) -> OffDiagonalMatrix {
    let mut m = ch.matrix().clone();
    for i in 0..m.dim() {
        m[(i, i)] = 0.0;
    }
    OffDiagonalMatrix(m)
}

/// `-p ln p` with the `0 ln 0 = 0` convention.
#[inline]
pub(crate) fn neg_plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().copied().map(neg_plogp).sum()
}

/// `I(X;Y) = Σ_x p(x) Σ_y C(y|x) ln(C(y|x) / p(y))`, in nats.
pub fn mutual_information(ch: &Channel) -> f64 {
    mutual_information_parts(ch.matrix(), ch.prior())
}

pub(crate) fn mutual_information_parts(q: &SquareMatrix, prior: &[f64]) -> f64 {
    let k = q.dim();
    let mut py = vec![0.0; k];
    for (x, row) in q.rows().enumerate() {
        for (y, &v) in row.iter().enumerate() {
            py[y] += prior[x] * v;
        }
    }
    let mut total = 0.0;
    for (x, row) in q.rows().enumerate() {
        if prior[x] == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for (y, &v) in row.iter().enumerate() {
            if v > 0.0 && py[y] > 0.0 {
                s += v * (v / py[y]).ln();
            }
        }
        total += prior[x] * s;
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    pub flagged: bool,
    /// Nats.
    pub mean_row_entropy: f64,
    pub mean_row_max: f64,
}

/// Flags near-deterministic channels: mean row entropy below `1e-3` nats or
/// mean row maximum above `0.999`. Rows are averaged without prior weighting.
pub fn collapse_flag(ch: &Channel) -> CollapseDiagnostics {
    let k = ch.k() as f64;
    let (mut h, mut mx) = (0.0, 0.0);
    for row in ch.matrix().rows() {
        h += entropy(row);
        mx += row.iter().copied().fold(0.0, f64::max);
    }
    let mean_row_entropy = h / k;
    let mean_row_max = mx / k;
    CollapseDiagnostics {
        flagged: mean_row_entropy < COLLAPSE_ENTROPY_THRESHOLD
            || mean_row_max > COLLAPSE_ROW_MAX_THRESHOLD,
        mean_row_entropy,
        mean_row_max,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyWeighting {
    /// `(1/K) Σ_i C_ii`.
    #[default]
    Unweighted,
    /// `Σ_i p(i) C_ii`.
    Prior,
}

/// Mean diagonal probability.
pub fn accuracy(ch: &Channel) -> f64 {
    accuracy_weighted(ch, AccuracyWeighting::Unweighted)
}

pub fn accuracy_weighted(ch: &Channel, weighting: AccuracyWeighting) -> f64 {
    let diag = ch.matrix().diagonal();
    match weighting {
        AccuracyWeighting::Unweighted => diag.iter().sum::<f64>() / diag.len() as f64,
        AccuracyWeighting::Prior => diag.iter().zip(ch.prior()).map(|(c, p)| c * p).sum(),
    }
}
