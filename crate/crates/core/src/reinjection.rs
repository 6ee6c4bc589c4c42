//! Feed-forward block viewed as key-value memory, and visual re-injection.
//!
//! With `W1 = (k_1 .. k_D)` and `W2 = (v_1 .. v_D)` (columns, each of
//! length `d`), the bias-free FFN `phi(x W1) W2^T` equals
//! `sum_i phi(<x, k_i>) v_i`. Visual tokens `z_j` are appended as extra
//! entries that act as both key and value, giving a correction term
//! `sum_j phi(<x, z_j>) z_j`, which is blended with the vanilla output by
//! the injection ratio `alpha`.
//!
//! Everything here is a pure function of its inputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Injection ratio used in the reference configuration.
pub const DEFAULT_ALPHA: f64 = 0.3;

/// Relative tolerance for comparing the two FFN formulations and fixtures.
pub const KERNEL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("matrix is empty or ragged")]
    BadMatrix,
    #[error("no fixtures found in {}", .0.display())]
    NoFixtures(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse fixture {}: {reason}", path.display())]
    BadFixture { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Silu => v / (1.0 + (-v).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    /// `d x D`; column `i` is key `k_i`.
    pub w1: DMatrix<f64>,
    /// `d x D`; column `i` is value `v_i`.
    pub w2: DMatrix<f64>,
    pub activation: Activation,
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, KernelError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(KernelError::BadMatrix);
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn check_dim(expected: usize, actual: usize) -> Result<(), KernelError> {
    if expected != actual {
        return Err(KernelError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

impl FfnParams {
    pub fn new(w1: DMatrix<f64>, w2: DMatrix<f64>, activation: Activation) -> Result<Self, KernelError> {
        if w1.is_empty() {
            return Err(KernelError::BadMatrix);
        }
        check_dim(w1.nrows(), w2.nrows())?;
        check_dim(w1.ncols(), w2.ncols())?;
        Ok(Self { w1, w2, activation })
    }

    /// Builds from row-major nested arrays of shape `d x D`.
    pub fn from_rows(w1: &[Vec<f64>], w2: &[Vec<f64>], activation: Activation) -> Result<Self, KernelError> {
        Self::new(matrix_from_rows(w1)?, matrix_from_rows(w2)?, activation)
    }

    /// Model width `d`.
    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Number of key-value slots `D`.
    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VisualTokenSet {
    tokens: Vec<Vec<f64>>,
}

impl VisualTokenSet {
    pub fn new(dim: usize, tokens: Vec<Vec<f64>>) -> Result<Self, KernelError> {
        for t in &tokens {
            check_dim(dim, t.len())?;
        }
        Ok(Self { tokens })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub alpha: f64,
    pub layers: BTreeSet<usize>,
}

impl InjectionConfig {
    pub fn new(alpha: f64, layers: impl IntoIterator<Item = usize>) -> Result<Self, KernelError> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            layers: layers.into_iter().collect(),
        })
    }
}

fn check_alpha(alpha: f64) -> Result<(), KernelError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(KernelError::AlphaOutOfRange(alpha));
    }
    Ok(())
}

/// `phi(x W1) W2^T` via dense matrix products.
pub fn ffn_matrix(x: &[f64], params: &FfnParams) -> Result<Vec<f64>, KernelError> {
    check_dim(params.dim(), x.len())?;
    let row = RowDVector::from_row_slice(x);
    let hidden = (row * &params.w1).map(|v| params.activation.apply(v));
    let out = hidden * params.w2.transpose();
    Ok(out.iter().copied().collect())
}

/// `sum_i phi(<x, k_i>) v_i` over the key/value columns.
pub fn ffn_keyvalue(x: &[f64], params: &FfnParams) -> Result<Vec<f64>, KernelError> {
    check_dim(params.dim(), x.len())?;
    let mut out = vec![0.0; x.len()];
    for (key, value) in params.w1.column_iter().zip(params.w2.column_iter()) {
        let gate = params.activation.apply(key.iter().zip(x).map(|(k, xi)| k * xi).sum());
        for (o, v) in out.iter_mut().zip(value.iter()) {
            *o += gate * v;
        }
    }
    Ok(out)
}

/// `sum_j phi(<x, z_j>) z_j`: each visual token is both key and value.
pub fn visual_correction(x: &[f64], zv: &VisualTokenSet, activation: Activation) -> Result<Vec<f64>, KernelError> {
    let mut out = vec![0.0; x.len()];
    for z in zv.tokens() {
        check_dim(x.len(), z.len())?;
        let gate = activation.apply(z.iter().zip(x).map(|(a, b)| a * b).sum());
        for (o, zi) in out.iter_mut().zip(z) {
            *o += gate * zi;
        }
    }
    Ok(out)
}

/// `alpha * correction + (1 - alpha) * ffn`.
pub fn ffn_fused(x: &[f64], params: &FfnParams, zv: &VisualTokenSet, alpha: f64) -> Result<Vec<f64>, KernelError> {
    check_alpha(alpha)?;
    let vanilla = ffn_matrix(x, params)?;
    let delta = visual_correction(x, zv, params.activation)?;
    Ok(delta
        .iter()
        .zip(&vanilla)
        .map(|(d, f)| alpha * d + (1.0 - alpha) * f)
        .collect())
}

/// A toy residual stack: `h <- h + FFN_l(h)` per layer, with the fused
/// block substituted at every layer index listed in the injection config.
#[derive(Debug, Clone)]
pub struct ToyStack {
    pub layers: Vec<FfnParams>,
}

impl ToyStack {
    pub fn forward(
        &self,
        x: &[f64],
        zv: &VisualTokenSet,
        injection: &InjectionConfig,
    ) -> Result<Vec<f64>, KernelError> {
        check_alpha(injection.alpha)?;
        let mut h = x.to_vec();
        for (l, params) in self.layers.iter().enumerate() {
            let update = if injection.layers.contains(&l) {
                ffn_fused(&h, params, zv, injection.alpha)?
            } else {
                ffn_matrix(&h, params)?
            };
            for (hi, u) in h.iter_mut().zip(update) {
                *hi += u;
            }
        }
        Ok(h)
    }
}

/// `||got - want||_inf / (1 + ||want||_inf)`.
pub fn relative_deviation(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / (1.0 + scale)
}

/// One kernel test vector. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFixture {
    pub d: usize,
    #[serde(rename = "D")]
    pub hidden: usize,
    pub activation: Activation,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub zv: Vec<Vec<f64>>,
    pub alpha: f64,
    /// Fused output.
    pub expected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureCheck {
    pub name: String,
    /// Fused output against `expected`.
    pub fused_deviation: f64,
    /// Matrix form against key-value form.
    pub equivalence_deviation: f64,
    /// Exactness of the alpha = 0 / alpha = 1 endpoints.
    pub boundaries_exact: bool,
}

impl FixtureCheck {
    pub fn passed(&self) -> bool {
        self.fused_deviation <= KERNEL_TOLERANCE
            && self.equivalence_deviation <= KERNEL_TOLERANCE
            && self.boundaries_exact
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<FixtureCheck>,
}

impl VerifyReport {
    pub fn max_deviation(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.fused_deviation.max(c.equivalence_deviation))
            .fold(0.0, f64::max)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(FixtureCheck::passed)
    }
}

pub fn check_fixture(name: &str, f: &KernelFixture) -> Result<FixtureCheck, KernelError> {
    let params = FfnParams::from_rows(&f.w1, &f.w2, f.activation)?;
    check_dim(f.d, params.dim())?;
    check_dim(f.hidden, params.hidden())?;
    let zv = VisualTokenSet::new(f.d, f.zv.clone())?;
    let fused = ffn_fused(&f.x, &params, &zv, f.alpha)?;
    let vanilla = ffn_matrix(&f.x, &params)?;
    let kv = ffn_keyvalue(&f.x, &params)?;
    let delta = visual_correction(&f.x, &zv, f.activation)?;
    let boundaries_exact =
        ffn_fused(&f.x, &params, &zv, 0.0)? == vanilla && ffn_fused(&f.x, &params, &zv, 1.0)? == delta;
    Ok(FixtureCheck {
        name: name.to_owned(),
        fused_deviation: relative_deviation(&fused, &f.expected),
        equivalence_deviation: relative_deviation(&kv, &vanilla),
        boundaries_exact,
    })
}

/// Checks every `*.json` fixture in `dir`, in file-name order.
pub fn verify_fixture_dir(dir: impl AsRef<Path>) -> Result<VerifyReport, KernelError> {
    let dir = dir.as_ref();
    let io = |source| KernelError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(KernelError::NoFixtures(dir.to_path_buf()));
    }
    let mut checks = Vec::with_capacity(paths.len());
    for path in paths {
        let raw = fs::read_to_string(&path).map_err(|source| KernelError::Io {
            path: path.clone(),
            source,
        })?;
        let fixture: KernelFixture = serde_json::from_str(&raw).map_err(|e| KernelError::BadFixture {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        checks.push(check_fixture(&name, &fixture).map_err(|e| KernelError::BadFixture {
            path: path.clone(),
            reason: e.to_string(),
        })?);
    }
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w1: &[&[f64]], w2: &[&[f64]], act: Activation) -> FfnParams {
        let conv = |m: &[&[f64]]| m.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        FfnParams::from_rows(&conv(w1), &conv(w2), act).unwrap()
    }

    #[test]
    fn matrix_form_examples() {
        let p = params(&[&[3.0]], &[&[0.5]], Activation::Relu);
        assert_eq!(ffn_matrix(&[2.0], &p).unwrap(), vec![3.0]);
        let p = params(
            &[&[1.0, -2.0], &[0.5, 1.0]],
            &[&[1.0, 1.0], &[2.0, -1.0]],
            Activation::Relu,
        );
        assert_eq!(ffn_matrix(&[0.0, 0.0], &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn keyvalue_single_slot() {
        let p = params(&[&[1.5], &[-0.5]], &[&[2.0], &[4.0]], Activation::Silu);
        let x = [1.0, 2.0];
        let gate = Activation::Silu.apply(1.5 - 1.0);
        assert_eq!(ffn_keyvalue(&x, &p).unwrap(), vec![gate * 2.0, gate * 4.0]);
    }

    #[test]
    fn dimension_errors() {
        let p = params(&[&[1.0]], &[&[1.0]], Activation::Relu);
        assert!(matches!(
            ffn_matrix(&[1.0, 2.0], &p),
            Err(KernelError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            ffn_keyvalue(&[], &p),
            Err(KernelError::DimensionMismatch { .. })
        ));
        assert!(VisualTokenSet::new(2, vec![vec![1.0]]).is_err());
        let bad = FfnParams::from_rows(&[vec![1.0, 2.0]], &[vec![1.0]], Activation::Relu);
        assert!(matches!(bad, Err(KernelError::DimensionMismatch { .. })));
    }

    #[test]
    fn correction_examples() {
        let x = [1.0, 0.0];
        assert_eq!(
            visual_correction(&x, &VisualTokenSet::empty(), Activation::Relu).unwrap(),
            vec![0.0, 0.0]
        );
        let gated = VisualTokenSet::new(2, vec![vec![-1.0, 3.0]]).unwrap();
        assert_eq!(visual_correction(&x, &gated, Activation::Relu).unwrap(), vec![0.0, 0.0]);
        let z = VisualTokenSet::new(2, vec![vec![2.0, 1.0]]).unwrap();
        assert_eq!(visual_correction(&x, &z, Activation::Relu).unwrap(), vec![4.0, 2.0]);
    }

    #[test]
    fn fused_boundaries() {
        let p = params(
            &[&[1.0, -2.0], &[0.5, 1.0]],
            &[&[1.0, 1.0], &[2.0, -1.0]],
            Activation::Relu,
        );
        let x = [0.7, 1.3];
        let z = VisualTokenSet::new(2, vec![vec![2.0, 1.0], vec![0.1, -0.4]]).unwrap();
        assert_eq!(ffn_fused(&x, &p, &z, 0.0).unwrap(), ffn_matrix(&x, &p).unwrap());
        assert_eq!(
            ffn_fused(&x, &p, &z, 1.0).unwrap(),
            visual_correction(&x, &z, Activation::Relu).unwrap()
        );
        let scaled: Vec<f64> = ffn_matrix(&x, &p).unwrap().iter().map(|v| 0.7 * v).collect();
        assert_eq!(ffn_fused(&x, &p, &VisualTokenSet::empty(), 0.3).unwrap(), scaled);
        assert!(matches!(
            ffn_fused(&x, &p, &z, 1.5),
            Err(KernelError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            ffn_fused(&x, &p, &z, f64::NAN),
            Err(KernelError::AlphaOutOfRange(_))
        ));
    }

    #[test]
    fn stack_injects_only_selected_layers() {
        let p = params(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[&[0.5, 0.0], &[0.0, 0.5]],
            Activation::Relu,
        );
        let stack = ToyStack {
            layers: vec![p.clone(), p.clone()],
        };
        let x = [1.0, 2.0];
        let z = VisualTokenSet::new(2, vec![vec![1.0, 1.0]]).unwrap();
        let none = stack.forward(&x, &z, &InjectionConfig::new(0.3, []).unwrap()).unwrap();
        let plain = {
            let mut h = x.to_vec();
            for _ in 0..2 {
                let u = ffn_matrix(&h, &p).unwrap();
                h.iter_mut().zip(u).for_each(|(a, b)| *a += b);
            }
            h
        };
        assert_eq!(none, plain);
        let second = stack.forward(&x, &z, &InjectionConfig::new(0.3, [1]).unwrap()).unwrap();
        assert_ne!(second, plain);
        // Alpha 0 everywhere is the plain stack.
        let zero = stack
            .forward(&x, &z, &InjectionConfig::new(0.0, [0, 1]).unwrap())
            .unwrap();
        assert_eq!(zero, plain);
    }

    #[test]
    fn fixture_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            verify_fixture_dir(dir.path()),
            Err(KernelError::NoFixtures(_))
        ));
        fs::write(dir.path().join("a.json"), "{").unwrap();
        assert!(matches!(
            verify_fixture_dir(dir.path()),
            Err(KernelError::BadFixture { .. })
        ));
    }
}
