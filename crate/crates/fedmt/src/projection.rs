//! Label-space and noise projection matrices.
//!
//! Two matrices drive loss correction: the label-space map `Q` (J rows of
//! mixing weights over K fine classes) and the square noise transition `T`
//! (row i is the distribution of observed labels for true class i). Both are
//! carried together with a cached Moore-Penrose pseudo-inverse and are
//! immutable after construction, so they can be shared freely across
//! concurrent training tasks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for stochastic rows.
const ROW_SUM_TOL: f64 = 1e-9;
/// A noise matrix must keep its smallest singular value above this.
const NOISE_MIN_SV: f64 = 1e-12;
/// Elementwise tolerance for the Penrose identity checked at construction.
const PENROSE_TOL: f64 = 1e-8;
/// Relative singular-value cutoff for the SVD pseudo-inverse.
const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// What a projection matrix encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    /// J x K correspondence between coarse and fine label spaces.
    LabelSpaceMap,
    /// K x K label-noise transition matrix.
    NoiseMap,
}

/// A validated projection matrix and its cached pseudo-inverse.
///
/// Equality compares the defining data (shape, role, entries). The cached
/// pseudo-inverse is derived and may differ in final bits between a
/// closed-form construction and a deserialized copy (which recomputes it by
/// SVD), so it does not participate in equality.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    entries: DMatrix<f64>,
    role: MatrixRole,
    pinv: DMatrix<f64>,
}

impl PartialEq for ProjectionMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.role == other.role
            && self.entries == other.entries
    }
}

/// How the desired space with `k` classes maps onto the other space with
/// `j` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaceSpec {
    /// Desired-space class count K.
    pub k: usize,
    /// Other-space class count J.
    pub j: usize,
    pub kind: SpaceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// Fine classes are grouped into J consecutive blocks of the given sizes.
    Hierarchical(Vec<usize>),
    /// Explicit Q rows (each a distribution over the K fine classes).
    Overlapping(Vec<Vec<f64>>),
}

impl LabelSpaceSpec {
    /// A hierarchical spec for consecutive blocks of the given sizes.
    pub fn hierarchical(sizes: &[usize]) -> Self {
        LabelSpaceSpec {
            k: sizes.iter().sum(),
            j: sizes.len(),
            kind: SpaceKind::Hierarchical(sizes.to_vec()),
        }
    }

    /// An overlapping spec from explicit Q rows.
    pub fn overlapping(rows: Vec<Vec<f64>>) -> Result<Self> {
        let j = rows.len();
        let k = rows.first().map(Vec::len).unwrap_or(0);
        if j == 0 || k == 0 {
            return Err(Error::ShapeMismatch("label-space rows must be non-empty".into()));
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("label-space rows have unequal lengths".into()));
        }
        Ok(LabelSpaceSpec { k, j, kind: SpaceKind::Overlapping(rows) })
    }

    /// The identity partition (every fine class is its own coarse class).
    pub fn identity(k: usize) -> Self {
        LabelSpaceSpec::hierarchical(&vec![1; k])
    }
}

impl ProjectionMatrix {
    /// Validates `entries` for `role` and caches an SVD pseudo-inverse.
    pub fn new(entries: DMatrix<f64>, role: MatrixRole) -> Result<Self> {
        let pinv = svd_pinv(&entries);
        Self::with_pinv(entries, role, pinv)
    }

    /// Validates `entries` and adopts a caller-supplied pseudo-inverse
    /// (used by the closed-form constructors). The Penrose identity is
    /// still checked, so a wrong closed form cannot slip through.
    fn with_pinv(entries: DMatrix<f64>, role: MatrixRole, pinv: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = entries.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch("projection matrix must be non-empty".into()));
        }
        if entries.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(Error::ShapeMismatch("projection entries must lie in [0, 1]".into()));
        }
        for i in 0..rows {
            let sum: f64 = entries.row(i).iter().sum();
            match role {
                // Noise rows are conditional distributions.
                MatrixRole::NoiseMap if (sum - 1.0).abs() > ROW_SUM_TOL => {
                    return Err(Error::ShapeMismatch(format!(
                        "noise row {i} sums to {sum}, expected 1"
                    )));
                }
                // Label-space rows may be kept in unnormalized 0/1 block
                // form, so only a lower bound is enforced.
                MatrixRole::LabelSpaceMap if sum < 1.0 - ROW_SUM_TOL => {
                    return Err(Error::ShapeMismatch(format!(
                        "label-space row {i} sums to {sum}, expected at least 1"
                    )));
                }
                _ => {}
            }
        }
        if role == MatrixRole::NoiseMap {
            if rows != cols {
                return Err(Error::ShapeMismatch(format!(
                    "noise matrix must be square, got {rows}x{cols}"
                )));
            }
            let svals = entries.clone().svd(false, false).singular_values;
            let min_sv = svals.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min_sv > NOISE_MIN_SV) {
                return Err(Error::SingularNoise(format!(
                    "smallest singular value {min_sv:e} is not above {NOISE_MIN_SV:e}"
                )));
            }
        }
        if pinv.shape() != (cols, rows) {
            return Err(Error::ShapeMismatch(format!(
                "pseudo-inverse must be {cols}x{rows}, got {}x{}",
                pinv.nrows(),
                pinv.ncols()
            )));
        }
        let residual = &entries * &pinv * &entries - &entries;
        let max_abs = residual.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if !(max_abs <= PENROSE_TOL) {
            return Err(Error::ShapeMismatch(format!(
                "pseudo-inverse fails the Penrose identity by {max_abs:e}"
            )));
        }
        Ok(ProjectionMatrix { rows, cols, entries, role, pinv })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn role(&self) -> MatrixRole {
        self.role
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// The cached cols x rows Moore-Penrose pseudo-inverse.
    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Serializes to `{rows, cols, role, entries}` with row-major entries.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "cols": self.cols,
            "role": serde_json::to_value(self.role).expect("role serializes"),
            "entries": to_row_major(&self.entries),
        })
    }

    /// Rebuilds from [`ProjectionMatrix::to_json`] output, revalidating all
    /// construction invariants.
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let raw: ProjectionMatrixJson = serde_json::from_value(v.clone())?;
        let entries = from_row_major(raw.rows, raw.cols, &raw.entries)?;
        ProjectionMatrix::new(entries, raw.role)
    }
}

impl Serialize for ProjectionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ProjectionMatrixJson {
            rows: self.rows,
            cols: self.cols,
            role: self.role,
            entries: to_row_major(&self.entries),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProjectionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = ProjectionMatrixJson::deserialize(d)?;
        let entries =
            from_row_major(raw.rows, raw.cols, &raw.entries).map_err(serde::de::Error::custom)?;
        ProjectionMatrix::new(entries, raw.role).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct ProjectionMatrixJson {
    rows: usize,
    cols: usize,
    role: MatrixRole,
    entries: Vec<f64>,
}

pub(crate) fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn from_row_major(rows: usize, cols: usize, v: &[f64]) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "expected {rows}x{cols} = {} entries, got {}",
            rows * cols,
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

/// The 0/1 block matrix of a hierarchical partition, with its closed-form
/// pseudo-inverse (1/k_j on the rows of block j).
///
/// Row j carries ones exactly on the `sizes[j]` columns of block j; rows are
/// deliberately not normalized because the entries act as mixing weights in
/// the corrected losses.
pub fn build_hierarchical_q(spec: &LabelSpaceSpec) -> Result<ProjectionMatrix> {
    let sizes = match &spec.kind {
        SpaceKind::Hierarchical(sizes) => sizes,
        SpaceKind::Overlapping(_) => {
            return Err(Error::PartitionMismatch(
                "hierarchical constructor called on an overlapping spec".into(),
            ));
        }
    };
    if sizes.is_empty() || sizes.iter().any(|&s| s == 0) {
        return Err(Error::PartitionMismatch("every block size must be at least 1".into()));
    }
    let total: usize = sizes.iter().sum();
    if total != spec.k {
        return Err(Error::PartitionMismatch(format!(
            "block sizes sum to {total}, expected K = {}",
            spec.k
        )));
    }
    if sizes.len() != spec.j {
        return Err(Error::PartitionMismatch(format!(
            "{} block sizes given, expected J = {}",
            sizes.len(),
            spec.j
        )));
    }
    let (j, k) = (spec.j, spec.k);
    let mut q = DMatrix::zeros(j, k);
    let mut pinv = DMatrix::zeros(k, j);
    let mut col = 0;
    for (block, &size) in sizes.iter().enumerate() {
        let inv = 1.0 / size as f64;
        for _ in 0..size {
            q[(block, col)] = 1.0;
            pinv[(col, block)] = inv;
            col += 1;
        }
    }
    ProjectionMatrix::with_pinv(q, MatrixRole::LabelSpaceMap, pinv)
}

/// The symmetric noise transition with diagonal 1 - xi and uniform
/// off-diagonal mass xi / (K - 1), inverted in closed form.
///
/// The inverse follows from the Woodbury identity applied to
/// T = (1 - K xi / (K-1)) I + xi / (K-1) 11^T, giving
/// T^-1 = (K-1)/(K-1-K xi) I - xi/(K-1-K xi) 11^T. The denominator
/// vanishes at xi = (K-1)/K, which bounds the admissible noise level.
pub fn build_symmetric_noise_t(k: usize, xi: f64) -> Result<ProjectionMatrix> {
    if k < 2 {
        return Err(Error::UnsupportedK(format!("noise matrix needs K >= 2, got {k}")));
    }
    if !xi.is_finite() || xi < 0.0 {
        return Err(Error::SingularNoise(format!("noise level {xi} must be finite and >= 0")));
    }
    let km1 = (k - 1) as f64;
    let denom = km1 - k as f64 * xi;
    if denom.abs() < 1e-12 || xi >= km1 / k as f64 {
        return Err(Error::SingularNoise(format!(
            "noise level {xi} reaches the singular point (K-1)/K = {}",
            km1 / k as f64
        )));
    }
    let off = xi / km1;
    let diag = 1.0 - xi;
    let mut t = DMatrix::from_element(k, k, off);
    let alpha = km1 / denom;
    let beta = xi / denom;
    let mut pinv = DMatrix::from_element(k, k, -beta);
    for i in 0..k {
        t[(i, i)] = diag;
        pinv[(i, i)] = alpha - beta;
    }
    ProjectionMatrix::with_pinv(t, MatrixRole::NoiseMap, pinv)
}

/// Moore-Penrose pseudo-inverse of `m.entries()` by SVD, discarding singular
/// values below a relative cutoff.
pub fn pseudo_inverse(m: &ProjectionMatrix) -> DMatrix<f64> {
    svd_pinv(m.entries())
}

pub(crate) fn svd_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * max_sv;
    svd.pseudo_inverse(cutoff).expect("cutoff is non-negative")
}

/// The literal 3 x K overlap matrices of the surface-EMG tasks (K in {5, 10});
/// each row is the distribution of fine classes within one coarse interval.
pub fn build_semg_q(k: usize) -> Result<ProjectionMatrix> {
    let rows: &[&[f64]] = match k {
        5 => &[
            &[3.0 / 5.0, 2.0 / 5.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0 / 5.0, 3.0 / 5.0, 1.0 / 5.0, 0.0],
            &[0.0, 0.0, 0.0, 2.0 / 5.0, 3.0 / 5.0],
        ],
        10 => &[
            &[0.3, 0.3, 0.3, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.2, 0.3, 0.3, 0.2, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.3, 0.3, 0.3],
        ],
        other => {
            return Err(Error::UnsupportedK(format!(
                "surface-EMG overlap matrix is defined for K in {{5, 10}}, got {other}"
            )));
        }
    };
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let entries = DMatrix::from_row_slice(3, k, &flat);
    ProjectionMatrix::new(entries, MatrixRole::LabelSpaceMap)
}
