//! 2D loss-landscape projection around an optimized feature and the
//! Hessian-spectrum filter built on it.
//!
//! The loss is sampled on a regular grid spanned by two orthonormal
//! directions (the first along the negative gradient), local 2x2
//! Hessians are estimated at interior points by central differences,
//! and the fraction of strictly positive eigenvalues summarizes how
//! bowl-like the surroundings are.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{rngs::StdRng, SeedableRng};
use std::io::Write;
use std::path::Path;

/// Eigenvalues at or below this magnitude count as non-positive.
pub const EIGENVALUE_NOISE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Directions {
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
    /// True when the gradient vanished and both directions fell back to
    /// a seeded random orthonormal pair.
    pub grad_fallback: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn random_unit(dim: usize, rng: &mut StdRng) -> Vec<f64> {
    let mut v = Tensor::randn(vec![dim], 1.0, rng).data().to_vec();
    normalize(&mut v);
    v
}

/// delta along the negative gradient, eta a seeded random direction
/// orthonormalized against it.
pub fn pick_directions(grad: &[f64], seed: u64) -> Directions {
    let dim = grad.len();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut delta: Vec<f64> = grad.iter().map(|g| -g).collect();
    let gnorm = normalize(&mut delta);
    let grad_fallback = gnorm < 1e-12;
    if grad_fallback {
        delta = random_unit(dim, &mut rng);
    }
    // Gram-Schmidt; resample on the measure-zero parallel draw
    let mut eta;
    loop {
        eta = random_unit(dim, &mut rng);
        let proj: f64 = eta.iter().zip(&delta).map(|(e, d)| e * d).sum();
        for (e, d) in eta.iter_mut().zip(&delta) {
            *e -= proj * d;
        }
        if normalize(&mut eta) > 1e-9 {
            break;
        }
    }
    Directions { delta, eta, grad_fallback }
}

#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    /// Loss values, [grid_size x grid_size] row-major; row index moves
    /// along delta, column index along eta.
    pub values: Tensor,
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
    pub spacing: f64,
    pub sigma: f64,
}

impl LandscapeGrid {
    pub fn grid_size(&self) -> usize {
        self.values.rows()
    }
}

/// Sample the loss on a (grid_size x grid_size) regular grid with
/// offsets spanning [-2 sigma, 2 sigma] along each direction.
pub fn evaluate_grid<F>(
    mut loss: F,
    center: &[f64],
    dirs: &Directions,
    grid_size: usize,
    sigma: f64,
) -> Result<LandscapeGrid>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma {sigma} must be positive")));
    }
    if grid_size < 5 || grid_size % 2 == 0 {
        return Err(Error::Contract(format!(
            "grid size {grid_size} must be odd and at least 5"
        )));
    }
    if dirs.delta.len() != center.len() || dirs.eta.len() != center.len() {
        return Err(Error::Contract("direction dimension mismatch".into()));
    }
    let half = (grid_size / 2) as isize;
    let spacing = 4.0 * sigma / (grid_size - 1) as f64;
    let mut values = vec![0.0; grid_size * grid_size];
    let mut point = vec![0.0; center.len()];
    for i in 0..grid_size {
        let alpha = (i as isize - half) as f64 * spacing;
        for j in 0..grid_size {
            let beta = (j as isize - half) as f64 * spacing;
            for (k, p) in point.iter_mut().enumerate() {
                *p = center[k] + alpha * dirs.delta[k] + beta * dirs.eta[k];
            }
            let v = loss(&point)?;
            if !v.is_finite() {
                return Err(Error::LandscapeFailure { row: i, col: j });
            }
            values[i * grid_size + j] = v;
        }
    }
    Ok(LandscapeGrid {
        values: Tensor::new(vec![grid_size, grid_size], values)?,
        delta: dirs.delta.clone(),
        eta: dirs.eta.clone(),
        spacing,
        sigma,
    })
}

#[derive(Debug, Clone)]
pub struct HessianSpectrum {
    /// Both eigenvalues of each interior point, 2 (G-2)^2 values.
    pub eigenvalues: Vec<f64>,
    pub positive_ratio: f64,
}

/// Central-difference local Hessians at every interior grid point, with
/// closed-form 2x2 symmetric eigenvalues.
pub fn local_hessians(grid: &LandscapeGrid) -> Result<HessianSpectrum> {
    let g = grid.grid_size();
    if g < 5 {
        return Err(Error::Contract(format!("grid size {g} below 5")));
    }
    if !grid.values.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Corrupted("non-finite landscape values".into()));
    }
    let h = &grid.values;
    let dx = grid.spacing;
    let dy = grid.spacing;
    let mut eigenvalues = Vec::with_capacity(2 * (g - 2) * (g - 2));
    for i in 1..g - 1 {
        for j in 1..g - 1 {
            let hxx = (h.at(i + 1, j) - 2.0 * h.at(i, j) + h.at(i - 1, j)) / (dx * dx);
            let hyy = (h.at(i, j + 1) - 2.0 * h.at(i, j) + h.at(i, j - 1)) / (dy * dy);
            let hxy = (h.at(i + 1, j + 1) - h.at(i + 1, j - 1) - h.at(i - 1, j + 1)
                + h.at(i - 1, j - 1))
                / (4.0 * dx * dy);
            let mean = 0.5 * (hxx + hyy);
            let radius = (0.25 * (hxx - hyy) * (hxx - hyy) + hxy * hxy).sqrt();
            eigenvalues.push(mean + radius);
            eigenvalues.push(mean - radius);
        }
    }
    let ratio = positive_ratio(&eigenvalues);
    Ok(HessianSpectrum { eigenvalues, positive_ratio: ratio })
}

/// Fraction of eigenvalues strictly above the noise floor.
pub fn positive_ratio(eigenvalues: &[f64]) -> f64 {
    if eigenvalues.is_empty() {
        return 0.0;
    }
    eigenvalues.iter().filter(|&&e| e > EIGENVALUE_NOISE_FLOOR).count() as f64
        / eigenvalues.len() as f64
}

/// Text dump: header line `G sigma spacing`, G rows of loss values, then
/// a spectrum summary line.
pub fn write_landscape(path: &Path, grid: &LandscapeGrid, spectrum: &HessianSpectrum) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let g = grid.grid_size();
    writeln!(f, "{} {:.6} {:.6}", g, grid.sigma, grid.spacing)?;
    for i in 0..g {
        let row: Vec<String> =
            grid.values.row_slice(i).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(f, "{}", row.join(" "))?;
    }
    writeln!(
        f,
        "spectrum {} positive_ratio {:.6}",
        spectrum.eigenvalues.len(),
        spectrum.positive_ratio
    )?;
    Ok(())
}
