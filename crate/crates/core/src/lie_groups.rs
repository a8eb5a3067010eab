//! Matrix Lie groups used as driver spaces.
//!
//! Elements are flat coordinate vectors. Matrix blocks are row-major and the
//! tensor block of the Milstein group stores the pair `(α, β)` at `α·k + β`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, StosymError};
use crate::linalg;

/// Default lower bound on `|det|` for general linear blocks.
pub const DEFAULT_DET_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GroupDescriptor {
    /// `ℝⁿ` under addition.
    Additive(usize),
    /// `GL(k)`, stored as `k²` row-major entries.
    GeneralLinear(usize),
    /// Direct product; coordinates are concatenated in order.
    Product(Vec<GroupDescriptor>),
    /// `ℝ ⊕ ℝᵏ ⊕ (ℝᵏ⊗ℝᵏ)` with `(s₁,a₁,b₁)∘(s₂,a₂,b₂) = (s₁+s₂, a₁+a₂, b₁+b₂+a₁a₂ᵀ)`.
    Milstein(usize),
}

impl GroupDescriptor {
    pub fn coordinate_dim(&self) -> usize {
        match self {
            GroupDescriptor::Additive(n) => *n,
            GroupDescriptor::GeneralLinear(k) => k * k,
            GroupDescriptor::Product(parts) => parts.iter().map(|p| p.coordinate_dim()).sum(),
            GroupDescriptor::Milstein(k) => 1 + k + k * k,
        }
    }

    pub fn identity_coords(&self) -> Vec<f64> {
        match self {
            GroupDescriptor::Additive(n) => vec![0.0; *n],
            GroupDescriptor::GeneralLinear(k) => linalg::identity(*k),
            GroupDescriptor::Product(parts) => parts.iter().flat_map(|p| p.identity_coords()).collect(),
            GroupDescriptor::Milstein(k) => vec![0.0; 1 + k + k * k],
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement { descriptor: self.clone(), coords: self.identity_coords() }
    }

    /// Group product on raw coordinates.
    pub fn mul_coords(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        let d = self.coordinate_dim();
        check_dim(d, a.len())?;
        check_dim(d, b.len())?;
        Ok(self.mul_unchecked(a, b))
    }

    pub(crate) fn mul_unchecked(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            GroupDescriptor::Additive(_) => a.iter().zip(b).map(|(x, y)| x + y).collect(),
            GroupDescriptor::GeneralLinear(k) => linalg::mat_mul(a, b, *k, *k, *k),
            GroupDescriptor::Product(parts) => {
                let mut out = Vec::with_capacity(a.len());
                let mut off = 0;
                for p in parts {
                    let d = p.coordinate_dim();
                    out.extend(p.mul_unchecked(&a[off..off + d], &b[off..off + d]));
                    off += d;
                }
                out
            }
            GroupDescriptor::Milstein(k) => {
                let k = *k;
                let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                for al in 0..k {
                    for be in 0..k {
                        out[1 + k + al * k + be] += a[1 + al] * b[1 + be];
                    }
                }
                out
            }
        }
    }

    pub fn inv_coords(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.inv_coords_tol(a, DEFAULT_DET_TOL)
    }

    /// Inverse with an explicit determinant tolerance for `GL` blocks.
    pub fn inv_coords_tol(&self, a: &[f64], tol: f64) -> Result<Vec<f64>> {
        check_dim(self.coordinate_dim(), a.len())?;
        match self {
            GroupDescriptor::Additive(_) => Ok(a.iter().map(|x| -x).collect()),
            GroupDescriptor::GeneralLinear(k) => linalg::inverse(a, *k, tol),
            GroupDescriptor::Product(parts) => {
                let mut out = Vec::with_capacity(a.len());
                let mut off = 0;
                for p in parts {
                    let d = p.coordinate_dim();
                    out.extend(p.inv_coords_tol(&a[off..off + d], tol)?);
                    off += d;
                }
                Ok(out)
            }
            GroupDescriptor::Milstein(k) => {
                let k = *k;
                let mut out: Vec<f64> = a.iter().map(|x| -x).collect();
                for al in 0..k {
                    for be in 0..k {
                        out[1 + k + al * k + be] += a[1 + al] * a[1 + be];
                    }
                }
                Ok(out)
            }
        }
    }

    /// `after · before⁻¹`.
    pub fn jump_coords(&self, after: &[f64], before: &[f64]) -> Result<Vec<f64>> {
        let inv = self.inv_coords(before)?;
        self.mul_coords(after, &inv)
    }

    /// Coordinate ranges of the top-level factors (a single range for non-products).
    pub fn factor_ranges(&self) -> Vec<std::ops::Range<usize>> {
        match self {
            GroupDescriptor::Product(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let d = p.coordinate_dim();
                        off += d;
                        off - d..off
                    })
                    .collect()
            }
            other => vec![0..other.coordinate_dim()],
        }
    }

    /// Checks that every `GL` block has `|det| > tol`.
    pub fn is_valid(&self, a: &[f64], tol: f64) -> bool {
        if a.len() != self.coordinate_dim() || a.iter().any(|x| !x.is_finite()) {
            return false;
        }
        match self {
            GroupDescriptor::GeneralLinear(k) => linalg::det(a, *k).abs() > tol,
            GroupDescriptor::Product(parts) => {
                let mut off = 0;
                parts.iter().all(|p| {
                    let d = p.coordinate_dim();
                    let ok = p.is_valid(&a[off..off + d], tol);
                    off += d;
                    ok
                })
            }
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub descriptor: GroupDescriptor,
    pub coords: Vec<f64>,
}

impl GroupElement {
    pub fn new(descriptor: GroupDescriptor, coords: Vec<f64>) -> Result<Self> {
        check_dim(descriptor.coordinate_dim(), coords.len())?;
        if !descriptor.is_valid(&coords, DEFAULT_DET_TOL) {
            return Err(StosymError::InvalidParameter("group element has a singular matrix block or non-finite coordinate".into()));
        }
        Ok(Self { descriptor, coords })
    }

    fn same_group(&self, other: &GroupElement) -> Result<()> {
        if self.descriptor != other.descriptor {
            return Err(StosymError::DescriptorMismatch(format!("{:?} vs {:?}", self.descriptor, other.descriptor)));
        }
        Ok(())
    }
}

pub fn mul(a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
    a.same_group(b)?;
    Ok(GroupElement { descriptor: a.descriptor.clone(), coords: a.descriptor.mul_coords(&a.coords, &b.coords)? })
}

pub fn inv(a: &GroupElement) -> Result<GroupElement> {
    Ok(GroupElement { descriptor: a.descriptor.clone(), coords: a.descriptor.inv_coords(&a.coords)? })
}

/// `z_after · z_before⁻¹`.
pub fn jump(z_after: &GroupElement, z_before: &GroupElement) -> Result<GroupElement> {
    z_after.same_group(z_before)?;
    Ok(GroupElement { descriptor: z_after.descriptor.clone(), coords: z_after.descriptor.jump_coords(&z_after.coords, &z_before.coords)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn el(d: &GroupDescriptor, c: &[f64]) -> GroupElement {
        GroupElement::new(d.clone(), c.to_vec()).unwrap()
    }

    #[test]
    fn additive_product() {
        let d = GroupDescriptor::Additive(2);
        let p = mul(&el(&d, &[1.0, 2.0]), &el(&d, &[3.0, 4.0])).unwrap();
        assert_eq!(p.coords, vec![4.0, 6.0]);
        assert_eq!(inv(&el(&d, &[1.0, -2.0])).unwrap().coords, vec![-1.0, 2.0]);
    }

    #[test]
    fn milstein_scalar_law() {
        let d = GroupDescriptor::Milstein(1);
        let p = mul(&el(&d, &[1.0, 2.0, 3.0]), &el(&d, &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(p.coords, vec![2.0, 3.0, 6.0]);
        let i = inv(&el(&d, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(i.coords, vec![-1.0, -2.0, 1.0]);
    }

    #[test]
    fn gl2_inverse_and_jump() {
        let d = GroupDescriptor::GeneralLinear(2);
        let r = el(&d, &linalg::rotation2(0.4));
        let ri = inv(&r).unwrap();
        assert!(linalg::max_abs_diff(&ri.coords, &linalg::rotation2(-0.4)) < 1e-15);
        let a = el(&d, &[2.0, 1.0, 0.5, 3.0]);
        let b = el(&d, &[1.0, -1.0, 0.25, 2.0]);
        let ab = mul(&a, &b).unwrap();
        let j = jump(&ab, &b).unwrap();
        assert!(linalg::max_abs_diff(&j.coords, &a.coords) < 1e-14);
    }

    #[test]
    fn singular_gl_rejected() {
        let d = GroupDescriptor::GeneralLinear(2);
        assert!(GroupElement::new(d.clone(), vec![1.0, 2.0, 2.0, 4.0]).is_err());
        assert!(d.inv_coords(&[1.0, 2.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn descriptor_mismatch_is_error() {
        let a = GroupDescriptor::Additive(1).identity();
        let b = GroupDescriptor::Milstein(0).identity();
        assert!(matches!(mul(&a, &b), Err(StosymError::DescriptorMismatch(_))));
    }

    #[test]
    fn coordinate_dims() {
        let d = GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(2), GroupDescriptor::Additive(2)]);
        assert_eq!(d.coordinate_dim(), 6);
        assert_eq!(GroupDescriptor::Milstein(3).coordinate_dim(), 13);
        assert_eq!(d.factor_ranges(), vec![0..4, 4..6]);
    }

    fn descriptors() -> Vec<GroupDescriptor> {
        vec![
            GroupDescriptor::Additive(3),
            GroupDescriptor::GeneralLinear(2),
            GroupDescriptor::GeneralLinear(3),
            GroupDescriptor::Milstein(2),
            GroupDescriptor::Product(vec![GroupDescriptor::GeneralLinear(2), GroupDescriptor::Additive(2)]),
        ]
    }

    /// Elements near the identity keep GL blocks well conditioned.
    fn near_identity(d: &GroupDescriptor, raw: &[f64]) -> Vec<f64> {
        d.identity_coords().iter().zip(raw).map(|(i, r)| i + 0.4 * r).collect()
    }

    proptest! {
        #[test]
        fn associativity_and_inverse(raw in proptest::collection::vec(-1.0f64..1.0, 39)) {
            for d in descriptors() {
                let n = d.coordinate_dim();
                let a = near_identity(&d, &raw[0..n]);
                let b = near_identity(&d, &raw[n..2 * n]);
                let c = near_identity(&d, &raw[2 * n..3 * n]);
                let left = d.mul_coords(&d.mul_coords(&a, &b).unwrap(), &c).unwrap();
                let right = d.mul_coords(&a, &d.mul_coords(&b, &c).unwrap()).unwrap();
                prop_assert!(linalg::max_abs_diff(&left, &right) < 1e-12);
                let id = d.identity_coords();
                prop_assert!(linalg::max_abs_diff(&d.mul_coords(&id, &a).unwrap(), &a) < 1e-12);
                let ai = d.inv_coords(&a).unwrap();
                prop_assert!(linalg::max_abs_diff(&d.mul_coords(&a, &ai).unwrap(), &id) < 1e-12);
                prop_assert!(linalg::max_abs_diff(&d.mul_coords(&ai, &a).unwrap(), &id) < 1e-12);
            }
        }

        #[test]
        fn milstein_jump_is_stepwise_iterated_integral(
            w in proptest::collection::vec(-1.0f64..1.0, 2 * 12)
        ) {
            // Build (t, W, M) with M^{αβ} = Σ W^β_{left} ΔW^α on a 12-step path.
            let k = 2;
            let d = GroupDescriptor::Milstein(k);
            let mut wpath = vec![vec![0.0; k]];
            for s in 0..12 {
                let prev = wpath[s].clone();
                wpath.push(vec![prev[0] + w[2 * s], prev[1] + w[2 * s + 1]]);
            }
            let mut zs = vec![d.identity_coords()];
            for s in 1..=12 {
                let mut z = zs[s - 1].clone();
                z[0] += 0.1;
                for al in 0..k {
                    let dw = wpath[s][al] - wpath[s - 1][al];
                    z[1 + al] += dw;
                    for be in 0..k {
                        z[1 + k + al * k + be] += wpath[s - 1][be] * dw;
                    }
                }
                zs.push(z);
            }
            for s in 1..=12 {
                let j = d.jump_coords(&zs[s], &zs[s - 1]).unwrap();
                prop_assert!((j[0] - 0.1).abs() < 1e-12);
                for al in 0..k {
                    let dw_a = wpath[s][al] - wpath[s - 1][al];
                    prop_assert!((j[1 + al] - dw_a).abs() < 1e-12);
                    for be in 0..k {
                        // Single sub-step: the within-step integrand increment is zero.
                        prop_assert!(j[1 + k + al * k + be].abs() < 1e-12);
                    }
                }
            }
        }
    }
}
