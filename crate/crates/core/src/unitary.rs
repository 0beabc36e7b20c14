//! Ideal coherent linear algebra: the MZI transfer matrix, rectangular
//! (Clements) meshes, Haar sampling and matrix fidelity.
//!
//! Conventions used throughout the crate:
//!
//! * An MZI acting on modes `(m, m+1)` has transfer matrix
//!   `i e^{iθ₁/2} [[e^{iθ₂} sin(θ₁/2), e^{iθ₂} cos(θ₁/2)], [cos(θ₁/2), -sin(θ₁/2)]]`,
//!   so `θ₁ = 0` is the cross state and `θ₁ = π` the bar state. The external
//!   phase `θ₂` sits on the upper output mode.
//! * A mesh of size `N` has `N` columns. Column `c` holds MZIs on the pairs
//!   `(m, m+1)` with `m ≡ N-1-c (mod 2)`, so the last column always starts
//!   at mode 0. The canonical
//!   enumeration of MZIs is column-major, top to bottom inside a column
//!   (see [`MeshLayout`]).
//! * The `N` phase-screen phases act on the mesh *input* ports, before
//!   column 0. With the external phase on the MZI outputs this is the only
//!   placement that keeps the mesh universal.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

pub type ComplexMatrix = DMatrix<Complex64>;

pub const MESH_SCHEMA_VERSION: u32 = 1;

/// Tolerance used to accept a matrix as unitary before decomposition.
pub const UNITARITY_TOLERANCE: f64 = 1e-8;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let w = phase.rem_euclid(TAU);
    // rem_euclid can return TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_signed(phase: f64) -> f64 {
    let w = wrap_phase(phase);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// `max |U†U - I|` over all entries.
pub fn unitarity_deviation(u: &ComplexMatrix) -> f64 {
    let n = u.ncols();
    let g = u.adjoint() * u;
    let mut worst = 0.0_f64;
    for r in 0..n {
        for c in 0..n {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((g[(r, c)] - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

pub fn check_unitary(u: &ComplexMatrix, tolerance: f64) -> Result<()> {
    if !u.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            u.nrows(),
            u.ncols()
        )));
    }
    if u.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let deviation = unitarity_deviation(u);
    if deviation > tolerance {
        return Err(Error::NotUnitary {
            deviation,
            tolerance,
        });
    }
    Ok(())
}

/// Internal and external phase of a single MZI, wrapped to `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MziPhases {
    pub theta1: f64,
    pub theta2: f64,
}

impl MziPhases {
    pub fn new(theta1: f64, theta2: f64) -> Self {
        Self {
            theta1: wrap_phase(theta1),
            theta2: wrap_phase(theta2),
        }
    }

    pub const CROSS: MziPhases = MziPhases {
        theta1: 0.0,
        theta2: 0.0,
    };

    pub const BAR: MziPhases = MziPhases {
        theta1: PI,
        theta2: 0.0,
    };
}

/// 2x2 transfer matrix of an ideal MZI, row-major `[[a, b], [c, d]]`.
pub fn mzi_block(theta1: f64, theta2: f64) -> [Complex64; 4] {
    let (s, c) = (theta1 / 2.0).sin_cos();
    let pre = I * Complex64::from_polar(1.0, theta1 / 2.0);
    let ext = Complex64::from_polar(1.0, theta2);
    [pre * ext * s, pre * ext * c, pre * c, -pre * s]
}

pub fn mzi_unitary(phases: MziPhases) -> ComplexMatrix {
    let b = mzi_block(phases.theta1, phases.theta2);
    ComplexMatrix::from_row_slice(2, 2, &b)
}

/// Left-multiplies rows `(m, m+1)` of `x` by the 2x2 block `b`.
pub(crate) fn apply_rows(x: &mut ComplexMatrix, m: usize, b: &[Complex64; 4]) {
    for col in 0..x.ncols() {
        let top = x[(m, col)];
        let bot = x[(m + 1, col)];
        x[(m, col)] = b[0] * top + b[1] * bot;
        x[(m + 1, col)] = b[2] * top + b[3] * bot;
    }
}

/// Right-multiplies columns `(m, m+1)` of `x` by the 2x2 block `b`.
pub(crate) fn apply_cols(x: &mut ComplexMatrix, m: usize, b: &[Complex64; 4]) {
    for row in 0..x.nrows() {
        let left = x[(row, m)];
        let right = x[(row, m + 1)];
        x[(row, m)] = left * b[0] + right * b[2];
        x[(row, m + 1)] = left * b[1] + right * b[3];
    }
}

/// Samples a Haar-random unitary by QR of a complex Ginibre matrix with the
/// phases of `diag(R)` divided out.
pub fn haar_random_unitary(n: usize, seed: u64) -> Result<ComplexMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    haar_with_rng(n, &mut rng)
}

pub fn haar_with_rng<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Result<ComplexMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("unitary size must be at least 1".into()));
    }
    let z = ComplexMatrix::from_fn(n, n, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im) / std::f64::consts::SQRT_2
    });
    let qr = z.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..n {
        let d = r[(c, c)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { Complex64::new(1.0, 0.0) };
        for row in 0..n {
            q[(row, c)] *= ph;
        }
    }
    Ok(q)
}

/// Position of one MZI in the mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MziSite {
    pub column: usize,
    /// Upper mode of the pair the MZI couples.
    pub top: usize,
}

/// Canonical enumeration of MZI sites for a rectangular mesh.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshLayout {
    n: usize,
    sites: Vec<MziSite>,
}

impl MeshLayout {
    pub fn new(n: usize) -> Self {
        let mut sites = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for column in 0..n {
            let mut top = (n - 1 - column) % 2;
            while top + 1 < n {
                sites.push(MziSite { column, top });
                top += 2;
            }
        }
        Self { n, sites }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn sites(&self) -> &[MziSite] {
        &self.sites
    }

    pub fn num_mzis(&self) -> usize {
        self.sites.len()
    }

    pub fn index_of(&self, column: usize, top: usize) -> Option<usize> {
        self.sites
            .iter()
            .position(|s| s.column == column && s.top == top)
    }

    /// Number of heaters: `θ₁, θ₂` per MZI plus one per phase-screen port.
    pub fn num_heaters(&self) -> usize {
        2 * self.num_mzis() + self.n
    }
}

/// Phase settings of one mesh in canonical layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshProgram {
    pub schema_version: u32,
    pub size: usize,
    /// Always `"clements-rectangular/column-major/input-phase-screen"`.
    pub layout: String,
    pub mzis: Vec<MziPhases>,
    /// Phases on the `N` input ports, applied before column 0.
    pub phase_screen: Vec<f64>,
}

pub const LAYOUT_TAG: &str = "clements-rectangular/column-major/input-phase-screen";

impl MeshProgram {
    pub fn new(size: usize, mzis: Vec<MziPhases>, phase_screen: Vec<f64>) -> Result<Self> {
        let p = Self {
            schema_version: MESH_SCHEMA_VERSION,
            size,
            layout: LAYOUT_TAG.to_string(),
            mzis,
            phase_screen: phase_screen.into_iter().map(wrap_phase).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    /// All MZIs at `phases` and a zero phase screen.
    pub fn uniform(size: usize, phases: MziPhases) -> Self {
        let count = size * size.saturating_sub(1) / 2;
        Self {
            schema_version: MESH_SCHEMA_VERSION,
            size,
            layout: LAYOUT_TAG.to_string(),
            mzis: vec![phases; count],
            phase_screen: vec![0.0; size],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MESH_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: MESH_SCHEMA_VERSION,
            });
        }
        if self.layout != LAYOUT_TAG {
            return Err(Error::Layout(format!("unknown layout tag '{}'", self.layout)));
        }
        if self.size == 0 {
            return Err(Error::Layout("mesh size must be positive".into()));
        }
        let expected = self.size * (self.size - 1) / 2;
        if self.mzis.len() != expected {
            return Err(Error::Layout(format!(
                "expected {expected} MZIs for N = {}, found {}",
                self.size,
                self.mzis.len()
            )));
        }
        if self.phase_screen.len() != self.size {
            return Err(Error::Layout(format!(
                "expected {} phase-screen entries, found {}",
                self.size,
                self.phase_screen.len()
            )));
        }
        let finite = self
            .mzis
            .iter()
            .all(|p| p.theta1.is_finite() && p.theta2.is_finite())
            && self.phase_screen.iter().all(|p| p.is_finite());
        if !finite {
            return Err(Error::Layout("non-finite phase".into()));
        }
        Ok(())
    }

    pub fn layout_sites(&self) -> MeshLayout {
        MeshLayout::new(self.size)
    }

    /// Heater phases in canonical heater order: `[θ₁, θ₂]` per MZI, then the
    /// phase screen.
    pub fn heater_phases(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.size * self.size);
        for p in &self.mzis {
            v.push(p.theta1);
            v.push(p.theta2);
        }
        v.extend_from_slice(&self.phase_screen);
        v
    }

    pub fn from_heater_phases(size: usize, phases: &[f64]) -> Result<Self> {
        let count = size * size.saturating_sub(1) / 2;
        if phases.len() != 2 * count + size {
            return Err(Error::Dimension(format!(
                "expected {} heater phases, got {}",
                2 * count + size,
                phases.len()
            )));
        }
        let mzis = (0..count)
            .map(|k| MziPhases::new(phases[2 * k], phases[2 * k + 1]))
            .collect();
        Self::new(size, mzis, phases[2 * count..].to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Decomposes a unitary into a rectangular MZI mesh program.
///
/// The elimination runs on `X = Uᵀ`, whose factors are MZIs with the phase on
/// the input side. Right-side nullings peel MZIs off the input of `X`;
/// left-side nullings leave inverse blocks that are commuted through the
/// residual diagonal, which ends up as the input phase screen of `U`.
pub fn clements_decompose(u: &ComplexMatrix) -> Result<MeshProgram> {
    check_unitary(u, UNITARITY_TOLERANCE)?;
    let n = u.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "decomposition needs a matrix of size at least 2".into(),
        ));
    }

    let mut x = u.transpose();
    // (top mode, θ₁, θ₂) for blocks removed from the right: X = X' · T̃
    let mut right: Vec<(usize, f64, f64)> = Vec::new();
    // blocks applied from the left: X ← T̃ · X
    let mut left: Vec<(usize, f64, f64)> = Vec::new();

    for i in 0..n - 1 {
        if i % 2 == 0 {
            for j in 0..=i {
                let c = i - j;
                let r = n - 1 - j;
                let a = x[(r, c)];
                let b = x[(r, c + 1)];
                let theta1 = 2.0 * b.norm().atan2(a.norm());
                let theta2 = if a.norm() == 0.0 || b.norm() == 0.0 {
                    0.0
                } else {
                    a.arg() - (-b).arg()
                };
                apply_cols(&mut x, c, &input_phase_block_inverse(theta1, theta2));
                right.push((c, theta1, theta2));
            }
        } else {
            for j in 1..=i + 1 {
                let r = n + j - i - 2;
                let col = j - 1;
                let m = r - 1;
                let a = x[(m, col)];
                let b = x[(r, col)];
                let theta1 = 2.0 * a.norm().atan2(b.norm());
                let theta2 = if a.norm() == 0.0 || b.norm() == 0.0 {
                    0.0
                } else {
                    b.arg() - a.arg()
                };
                apply_rows(&mut x, m, &input_phase_block(theta1, theta2));
                left.push((m, theta1, theta2));
            }
        }
    }

    let mut d: Vec<Complex64> = (0..n).map(|k| x[(k, k)]).collect();
    // Commute each inverse left block through the diagonal, innermost first.
    let mut commuted: Vec<(usize, f64, f64)> = Vec::with_capacity(left.len());
    for &(m, theta1, theta2) in left.iter().rev() {
        let d1 = d[m];
        let d2 = d[m + 1];
        let gamma = (d1 / d2).arg();
        let factor = -Complex64::from_polar(1.0, -theta1) * d2;
        d[m] = factor * Complex64::from_polar(1.0, -theta2);
        d[m + 1] = factor;
        commuted.push((m, theta1, gamma));
    }
    // X = D · T̃'_1 ··· T̃'_k · R_k ··· R_1, so U = M(R_1)···M(R_k) M(T'_k)···M(T'_1) D.
    // Application order on U (input first): D, T'_1, ..., T'_k, R_k, ..., R_1.
    let mut sequence: Vec<(usize, f64, f64)> = Vec::with_capacity(n * (n - 1) / 2);
    sequence.extend(commuted.iter().rev().copied());
    sequence.extend(right.iter().rev().copied());

    let layout = MeshLayout::new(n);
    let mut mzis = vec![MziPhases::CROSS; layout.num_mzis()];
    let mut filled = vec![false; layout.num_mzis()];
    let mut depth = vec![0usize; n];
    for &(m, theta1, theta2) in &sequence {
        let mut column = depth[m].max(depth[m + 1]);
        if (n - 1 + column) % 2 != m % 2 {
            column += 1;
        }
        let idx = layout.index_of(column, m).ok_or_else(|| {
            Error::Layout(format!("block on modes ({m}, {}) fell outside the mesh", m + 1))
        })?;
        if filled[idx] {
            return Err(Error::Layout(format!("site ({column}, {m}) assigned twice")));
        }
        filled[idx] = true;
        mzis[idx] = MziPhases::new(theta1, theta2);
        depth[m] = column + 1;
        depth[m + 1] = column + 1;
    }
    let phase_screen = d.iter().map(|z| z.arg()).collect();
    MeshProgram::new(n, mzis, phase_screen)
}

/// `K(θ₁)·diag(e^{iθ₂}, 1)`: an MZI with its phase on the input side.
fn input_phase_block(theta1: f64, theta2: f64) -> [Complex64; 4] {
    let (s, c) = (theta1 / 2.0).sin_cos();
    let pre = I * Complex64::from_polar(1.0, theta1 / 2.0);
    let ext = Complex64::from_polar(1.0, theta2);
    [pre * s * ext, pre * c, pre * c * ext, -pre * s]
}

fn input_phase_block_inverse(theta1: f64, theta2: f64) -> [Complex64; 4] {
    let b = input_phase_block(theta1, theta2);
    [b[0].conj(), b[2].conj(), b[1].conj(), b[3].conj()]
}

/// Composes the mesh: phase screen first, then the MZI columns in order.
pub fn mesh_reconstruct(program: &MeshProgram) -> Result<ComplexMatrix> {
    program.validate()?;
    let n = program.size;
    let mut u = ComplexMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        program
            .phase_screen
            .iter()
            .map(|&p| Complex64::from_polar(1.0, p)),
    ));
    let layout = MeshLayout::new(n);
    for (site, phases) in layout.sites().iter().zip(&program.mzis) {
        apply_rows(&mut u, site.top, &mzi_block(phases.theta1, phases.theta2));
    }
    Ok(u)
}

/// `|Tr(U_target† U_measured)| / n`.
pub fn fidelity(u_target: &ComplexMatrix, u_measured: &ComplexMatrix) -> Result<f64> {
    if !u_target.is_square() || u_target.shape() != u_measured.shape() {
        return Err(Error::Dimension(format!(
            "fidelity needs equal square matrices, got {:?} and {:?}",
            u_target.shape(),
            u_measured.shape()
        )));
    }
    let n = u_target.nrows();
    let mut tr = Complex64::new(0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            tr += u_target[(r, c)].conj() * u_measured[(r, c)];
        }
    }
    Ok(tr.norm() / n as f64)
}

/// Fidelity after rescaling both matrices to unit mean power transmission,
/// the way lossy matrices are normalized before comparison. Equals
/// [`fidelity`] when both arguments are unitary.
pub fn normalized_fidelity(u_target: &ComplexMatrix, u_measured: &ComplexMatrix) -> Result<f64> {
    let n = u_measured.nrows() as f64;
    let scale = |m: &ComplexMatrix| m.norm() / n.sqrt();
    let (a, b) = (scale(u_target), scale(u_measured));
    if a == 0.0 || b == 0.0 {
        return Ok(0.0);
    }
    Ok(fidelity(u_target, u_measured)? / (a * b))
}
