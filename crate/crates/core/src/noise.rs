//! Driver paths: Brownian motion, finite-activity Lévy processes,
//! symmetric α-stable processes and discrete-time iid-increment walks on a group.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StosymError};
use crate::lie_groups::{GroupDescriptor, DEFAULT_DET_TOL};
use crate::linalg;
use crate::path::{CadlagPath, PathSpace, PathStyle};
use crate::rng::{substream, StosymRng};

/// Draws one group increment (or one jump) from a fixed law.
pub type IncrementSampler = Arc<dyn Fn(&mut StosymRng) -> Vec<f64> + Send + Sync>;

/// Probability law of a single jump of a finite-activity measure.
#[derive(Clone)]
pub enum JumpLaw {
    PointMass(Vec<f64>),
    /// Independent `N(mean_i, std²)` coordinates.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Custom {
        dim: usize,
        sampler: IncrementSampler,
    },
}

impl fmt::Debug for JumpLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JumpLaw::PointMass(p) => write!(f, "PointMass({p:?})"),
            JumpLaw::Gaussian { mean, std } => write!(f, "Gaussian {{ mean: {mean:?}, std: {std} }}"),
            JumpLaw::UniformBox { lo, hi } => write!(f, "UniformBox {{ lo: {lo:?}, hi: {hi:?} }}"),
            JumpLaw::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

impl JumpLaw {
    pub fn dim(&self) -> usize {
        match self {
            JumpLaw::PointMass(p) => p.len(),
            JumpLaw::Gaussian { mean, .. } => mean.len(),
            JumpLaw::UniformBox { lo, .. } => lo.len(),
            JumpLaw::Custom { dim, .. } => *dim,
        }
    }

    pub fn sample(&self, rng: &mut StosymRng) -> Vec<f64> {
        match self {
            JumpLaw::PointMass(p) => p.clone(),
            JumpLaw::Gaussian { mean, std } => mean.iter().map(|m| m + std * Distribution::<f64>::sample(&StandardNormal, rng)).collect(),
            JumpLaw::UniformBox { lo, hi } => lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect(),
            JumpLaw::Custom { sampler, .. } => sampler(rng),
        }
    }
}

#[derive(Clone, Debug)]
pub enum JumpMeasure {
    None,
    /// `ν₀ = rate · law`.
    Finite {
        rate: f64,
        law: JumpLaw,
    },
    /// Symmetric α-stable Lévy measure, handled through increment laws only.
    AlphaStable {
        alpha: f64,
    },
}

/// Truncation function used to split small and large jumps. Only the
/// Euclidean unit-ball cut `h(z) = z·1{|z| ≤ 1}` is provided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truncation {
    UnitBall,
}

impl Truncation {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Truncation::UnitBall => {
                if linalg::norm(z) <= 1.0 {
                    z.to_vec()
                } else {
                    vec![0.0; z.len()]
                }
            }
        }
    }
}

/// `(b₀, A₀, ν₀)` with the generator convention `A₀^{αβ} ∂_α ∂_β` (no ½),
/// so unit-variance Brownian motion has `A₀ = ½·I`.
#[derive(Clone, Debug)]
pub struct CharacteristicTriplet {
    pub b0: Vec<f64>,
    /// Row-major `n×n`.
    pub a0: Vec<f64>,
    pub nu0: JumpMeasure,
    pub truncation: Truncation,
}

impl CharacteristicTriplet {
    pub fn dim(&self) -> usize {
        self.b0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.a0.len() != n * n {
            return Err(StosymError::Dimension { expected: n * n, got: self.a0.len() });
        }
        let asym = linalg::max_abs_diff(&self.a0, &linalg::transpose(&self.a0, n, n));
        if asym > 1e-12 {
            return Err(StosymError::InvalidParameter(format!("A0 not symmetric ({asym:e})")));
        }
        let min_eig = SymmetricEigen::new(linalg::to_dmatrix(&self.a0, n, n)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if n > 0 && min_eig < -1e-12 {
            return Err(StosymError::InvalidParameter(format!("A0 has eigenvalue {min_eig:e}")));
        }
        match &self.nu0 {
            JumpMeasure::Finite { rate, law } => {
                if !(*rate >= 0.0) {
                    return Err(StosymError::InvalidParameter("negative jump rate".into()));
                }
                if law.dim() != n {
                    return Err(StosymError::Dimension { expected: n, got: law.dim() });
                }
            }
            JumpMeasure::AlphaStable { alpha } => check_alpha(*alpha)?,
            JumpMeasure::None => {}
        }
        Ok(())
    }

    /// Matrix `C` with `C·Cᵀ = 2·A₀`.
    pub fn diffusion_factor(&self) -> Vec<f64> {
        let n = self.dim();
        let two_a: Vec<f64> = self.a0.iter().map(|x| 2.0 * x).collect();
        let eig = SymmetricEigen::new(linalg::to_dmatrix(&two_a, n, n));
        let sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        linalg::from_dmatrix(&(&eig.eigenvectors * sqrt_d))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(StosymError::InvalidParameter(format!("alpha = {alpha} outside (0,2)")))
    }
}

#[derive(Clone)]
pub enum DriverKind {
    Brownian(usize),
    LevyFinite(CharacteristicTriplet),
    AlphaStable {
        alpha: f64,
        n: usize,
    },
    /// Jumps at `t = 1, 2, …` with iid increments on `group`.
    DiscreteIid {
        sampler: IncrementSampler,
        group: GroupDescriptor,
    },
}

impl fmt::Debug for DriverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverKind::Brownian(k) => write!(f, "Brownian({k})"),
            DriverKind::LevyFinite(t) => write!(f, "LevyFinite({t:?})"),
            DriverKind::AlphaStable { alpha, n } => write!(f, "AlphaStable({alpha}, {n})"),
            DriverKind::DiscreteIid { group, .. } => write!(f, "DiscreteIid({group:?})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DriverSpec {
    pub kind: DriverKind,
    pub seed: u64,
    /// Output grid for continuous kinds; only its end time matters for `DiscreteIid`.
    pub grid: Vec<f64>,
}

pub fn uniform_grid(t_end: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| t_end * i as f64 / steps as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(StosymError::InvalidParameter("time grid needs at least two knots".into()));
    }
    if grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(StosymError::InvalidParameter("time grid must start at 0 and increase strictly".into()));
    }
    Ok(())
}

/// Symmetric α-stable variate with characteristic function `exp(−|u|^α)`
/// (Chambers–Mallows–Stuck).
pub fn symmetric_stable(alpha: f64, rng: &mut StosymRng) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    if (alpha - 1.0).abs() < 1e-12 {
        return v.tan();
    }
    let w: f64 = Exp1.sample(rng);
    (alpha * v).sin() / v.cos().powf(1.0 / alpha) * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

pub fn gaussian_vec(rng: &mut StosymRng, k: usize, sd: f64) -> Vec<f64> {
    (0..k).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

pub fn sample(spec: &DriverSpec) -> Result<CadlagPath> {
    let mut rng = substream(spec.seed, 0);
    match &spec.kind {
        DriverKind::Brownian(k) => {
            check_grid(&spec.grid)?;
            let mut values = vec![vec![0.0; *k]];
            for w in spec.grid.windows(2) {
                let dw = gaussian_vec(&mut rng, *k, (w[1] - w[0]).sqrt());
                let prev = values.last().unwrap();
                let next = prev.iter().zip(&dw).map(|(a, b)| a + b).collect();
                values.push(next);
            }
            CadlagPath::new(PathSpace::Group(GroupDescriptor::Additive(*k)), PathStyle::GridSampled, spec.grid.clone(), values)
        }
        DriverKind::AlphaStable { alpha, n } => {
            check_alpha(*alpha)?;
            check_grid(&spec.grid)?;
            let mut values = vec![vec![0.0; *n]];
            for w in spec.grid.windows(2) {
                let scale = (w[1] - w[0]).powf(1.0 / alpha);
                let prev = values.last().unwrap();
                let next = prev.iter().map(|p| p + scale * symmetric_stable(*alpha, &mut rng)).collect();
                values.push(next);
            }
            CadlagPath::new(PathSpace::Group(GroupDescriptor::Additive(*n)), PathStyle::GridSampled, spec.grid.clone(), values)
        }
        DriverKind::LevyFinite(triplet) => sample_levy_finite(triplet, spec.seed, &spec.grid, &mut rng),
        DriverKind::DiscreteIid { sampler, group } => {
            let t_end = *spec.grid.last().ok_or_else(|| StosymError::InvalidParameter("time grid needs an end time".into()))?;
            let steps = t_end.floor() as usize;
            let d = group.coordinate_dim();
            let mut times = vec![0.0];
            let mut values = vec![group.identity_coords()];
            let mut jumps = vec![None];
            for l in 1..=steps {
                let inc = sampler(&mut rng);
                if inc.len() != d {
                    return Err(StosymError::Dimension { expected: d, got: inc.len() });
                }
                if !group.is_valid(&inc, DEFAULT_DET_TOL) {
                    return Err(StosymError::Numeric(format!("sampled increment {l} is singular")));
                }
                let next = group.mul_coords(&inc, values.last().unwrap())?;
                times.push(l as f64);
                values.push(next);
                jumps.push(Some(inc));
            }
            CadlagPath::new(PathSpace::Group(group.clone()), PathStyle::DiscreteJump, times, values)?.with_jumps(jumps)
        }
    }
}

/// `∫ h dν₀`, exact for atoms and by a fixed-seed Monte Carlo otherwise.
pub fn truncated_jump_mean(triplet: &CharacteristicTriplet, seed: u64, n_mc: usize) -> Vec<f64> {
    let n = triplet.dim();
    match &triplet.nu0 {
        JumpMeasure::Finite { rate, law } => match law {
            JumpLaw::PointMass(p) => triplet.truncation.apply(p).iter().map(|x| rate * x).collect(),
            _ => {
                let mut rng = substream(seed, u64::MAX);
                let mut acc = vec![0.0; n];
                for _ in 0..n_mc {
                    for (a, h) in acc.iter_mut().zip(triplet.truncation.apply(&law.sample(&mut rng))) {
                        *a += h;
                    }
                }
                acc.iter().map(|a| rate * a / n_mc as f64).collect()
            }
        },
        _ => vec![0.0; n],
    }
}

fn sample_levy_finite(triplet: &CharacteristicTriplet, seed: u64, grid: &[f64], rng: &mut StosymRng) -> Result<CadlagPath> {
    triplet.validate()?;
    check_grid(grid)?;
    let n = triplet.dim();
    let (rate, law) = match &triplet.nu0 {
        JumpMeasure::Finite { rate, law } => (*rate, Some(law)),
        JumpMeasure::None => (0.0, None),
        JumpMeasure::AlphaStable { .. } => {
            return Err(StosymError::Usage("alpha-stable measures are sampled with DriverKind::AlphaStable".into()))
        }
    };
    let comp = truncated_jump_mean(triplet, seed, 100_000);
    let drift: Vec<f64> = triplet.b0.iter().zip(&comp).map(|(b, c)| b - c).collect();
    let c = triplet.diffusion_factor();
    let t_end = *grid.last().unwrap();

    let mut arrivals = Vec::new();
    if rate > 0.0 {
        let mut t = 0.0;
        loop {
            let e: f64 = Exp1.sample(rng);
            t += e / rate;
            if t > t_end {
                break;
            }
            arrivals.push(t);
        }
    }
    let mut knots: Vec<(f64, bool)> = grid.iter().map(|&t| (t, false)).collect();
    for a in &arrivals {
        match knots.binary_search_by(|k| k.0.partial_cmp(a).unwrap()) {
            Ok(i) => knots[i].1 = true,
            Err(i) => knots.insert(i, (*a, true)),
        }
    }

    let mut times = vec![0.0];
    let mut values = vec![vec![0.0; n]];
    let mut jumps = vec![None];
    for w in knots.windows(2) {
        let (t0, (t1, is_jump)) = (w[0].0, w[1]);
        let dt = t1 - t0;
        let g = gaussian_vec(rng, n, dt.sqrt());
        let cont = linalg::mat_vec(&c, &g, n, n);
        let mut next: Vec<f64> = values.last().unwrap().iter().enumerate().map(|(i, v)| v + drift[i] * dt + cont[i]).collect();
        if is_jump {
            let j = law.expect("arrivals imply a jump law").sample(rng);
            for (x, y) in next.iter_mut().zip(&j) {
                *x += y;
            }
            jumps.push(Some(j));
        } else {
            jumps.push(None);
        }
        times.push(t1);
        values.push(next);
    }
    CadlagPath::new(PathSpace::Group(GroupDescriptor::Additive(n)), PathStyle::GridSampled, times, values)?.with_jumps(jumps)
}

pub fn characteristics(spec: &DriverSpec) -> Result<CharacteristicTriplet> {
    match &spec.kind {
        DriverKind::Brownian(k) => Ok(CharacteristicTriplet {
            b0: vec![0.0; *k],
            a0: linalg::identity(*k).iter().map(|x| 0.5 * x).collect(),
            nu0: JumpMeasure::None,
            truncation: Truncation::UnitBall,
        }),
        DriverKind::LevyFinite(t) => Ok(t.clone()),
        DriverKind::AlphaStable { alpha, n } => {
            check_alpha(*alpha)?;
            Ok(CharacteristicTriplet {
                b0: vec![0.0; *n],
                a0: vec![0.0; n * n],
                nu0: JumpMeasure::AlphaStable { alpha: *alpha },
                truncation: Truncation::UnitBall,
            })
        }
        DriverKind::DiscreteIid { .. } => {
            Err(StosymError::Usage("discrete-time drivers have no continuous-time triplet; use the per-step law".into()))
        }
    }
}
