//! The symmetry group `S_m ⋉ (ℝ_{>0})^m` acting on [`Theta`].
//!
//! Composite convention: for `g = (π, c)`, unit `i` of `g·θ` is
//! `(c_j^{-p} a_j, c_j w_j)` with `j = π(i)`. The scale attached to a source
//! unit travels with it, so `g·θ = π·(c·θ)`.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Theta;
use crate::rng;

/// Weight vectors shorter than this are treated as vanishing.
pub const VANISHING_TOL: f64 = 1e-12;

/// A permutation (0-based internally) with one positive scale per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroupElementJson", into = "GroupElementJson")]
pub struct GroupElement {
    perm: Vec<usize>,
    scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupElementJson {
    perm: Vec<usize>,
    scales: Vec<f64>,
}

impl TryFrom<GroupElementJson> for GroupElement {
    type Error = Error;

    fn try_from(json: GroupElementJson) -> Result<Self> {
        if json.perm.contains(&0) {
            return Err(Error::Validation("serialized permutations are 1-based".into()));
        }
        GroupElement::new(json.perm.into_iter().map(|p| p - 1).collect(), json.scales)
    }
}

impl From<GroupElement> for GroupElementJson {
    fn from(g: GroupElement) -> Self {
        GroupElementJson { perm: g.perm.iter().map(|p| p + 1).collect(), scales: g.scales }
    }
}

impl GroupElement {
    pub fn new(perm: Vec<usize>, scales: Vec<f64>) -> Result<Self> {
        let m = perm.len();
        if scales.len() != m {
            return Err(Error::Dimension(format!("{} scales for a permutation of {m}", scales.len())));
        }
        let mut seen = vec![false; m];
        for &p in &perm {
            if p >= m || seen[p] {
                return Err(Error::Validation(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        if let Some((i, c)) = scales.iter().enumerate().find(|(_, c)| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::Validation(format!("scale {c} at unit {i} is not strictly positive")));
        }
        Ok(GroupElement { perm, scales })
    }

    pub fn identity(m: usize) -> Self {
        GroupElement { perm: (0..m).collect(), scales: vec![1.0; m] }
    }

    pub fn permutation(perm: Vec<usize>) -> Result<Self> {
        let m = perm.len();
        GroupElement::new(perm, vec![1.0; m])
    }

    pub fn scaling(scales: Vec<f64>) -> Result<Self> {
        GroupElement::new((0..scales.len()).collect(), scales)
    }

    pub fn m(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn is_pure_permutation(&self) -> bool {
        self.scales.iter().all(|&c| c == 1.0)
    }

    /// `self ∘ first`: acting with the result equals acting with `first`
    /// and then with `self`.
    pub fn compose(&self, first: &GroupElement) -> Result<GroupElement> {
        if self.m() != first.m() {
            return Err(Error::Dimension("composing elements of different width".into()));
        }
        let m = self.m();
        let mut perm = vec![0; m];
        let mut scales = vec![0.0; m];
        for (i, slot) in perm.iter_mut().enumerate() {
            let j = first.perm[self.perm[i]];
            *slot = j;
            scales[j] = first.scales[j] * self.scales[self.perm[i]];
        }
        GroupElement::new(perm, scales)
    }

    pub fn inverse(&self) -> GroupElement {
        let m = self.m();
        let mut perm = vec![0; m];
        for (i, &p) in self.perm.iter().enumerate() {
            perm[p] = i;
        }
        let scales = (0..m).map(|k| 1.0 / self.scales[self.perm[k]]).collect();
        GroupElement { perm, scales }
    }
}

/// Acts with `g` on `theta` for an activation of homogeneity degree `p`.
pub fn apply_group(g: &GroupElement, theta: &Theta, p: f64) -> Result<Theta> {
    if g.m() != theta.m() {
        return Err(Error::Dimension(format!("group element for m = {} applied to m = {}", g.m(), theta.m())));
    }
    let mut out = theta.clone();
    for i in 0..theta.m() {
        let j = g.perm[i];
        let c = g.scales[j];
        out.set_a(i, c.powf(-p) * theta.a(j));
        out.w_mut(i).copy_from(&(theta.w(j) * c));
    }
    Ok(out)
}

/// Tangent vectors of the scaling orbit, one per unit: `(−p aᵢ, wᵢ)` in
/// unit `i`'s slot and zeros elsewhere.
#[derive(Debug, Clone)]
pub struct OrbitTangentBasis {
    pub vectors: Vec<DVector<f64>>,
}

impl OrbitTangentBasis {
    /// Tangent vectors as matrix columns.
    pub fn as_matrix(&self) -> nalgebra::DMatrix<f64> {
        if self.vectors.is_empty() {
            return nalgebra::DMatrix::zeros(0, 0);
        }
        nalgebra::DMatrix::from_columns(&self.vectors)
    }

    /// Vertical component of `v`. The tangents live on disjoint unit blocks,
    /// so they are mutually orthogonal and projection is blockwise.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for t in &self.vectors {
            let nn = t.norm_squared();
            if nn > 0.0 {
                out.axpy(t.dot(v) / nn, t, 1.0);
            }
        }
        out
    }
}

pub fn orbit_tangent_basis(theta: &Theta, p: f64) -> OrbitTangentBasis {
    let vectors = (0..theta.m())
        .map(|i| {
            let mut v = DVector::zeros(theta.dim());
            let o = theta.offset(i);
            v[o] = -p * theta.a(i);
            v.rows_mut(o + 1, theta.d()).copy_from(&theta.w(i));
            v
        })
        .collect();
    OrbitTangentBasis { vectors }
}

/// Uniform random permutation with log-uniform scales in
/// `[exp(lo), exp(hi)]`, deterministic in `seed`.
pub fn random_orbit_element(m: usize, scale_log_range: (f64, f64), seed: u64) -> Result<GroupElement> {
    random_orbit_element_tagged(m, scale_log_range, seed, "orbit")
}

pub fn random_orbit_element_tagged(m: usize, (lo, hi): (f64, f64), seed: u64, tag: &str) -> Result<GroupElement> {
    if !(lo <= hi) {
        return Err(Error::Validation(format!("scale log-range ({lo}, {hi}) is empty")));
    }
    let mut rng = rng::stream(seed, tag);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let scales = (0..m)
        .map(|_| if lo == hi { lo.exp() } else { rng.random_range(lo..=hi).exp() })
        .collect();
    GroupElement::new(perm, scales)
}

/// Rescales every unit to `‖wᵢ‖ = 1`, absorbing `‖wᵢ‖^p` into `aᵢ`.
pub fn gauge_normalize(theta: &Theta, p: f64) -> Result<Theta> {
    let mut out = theta.clone();
    for i in 0..theta.m() {
        let norm = theta.w(i).norm();
        if norm <= VANISHING_TOL {
            return Err(Error::VanishingUnit { unit: i });
        }
        out.set_a(i, theta.a(i) * norm.powf(p));
        out.w_mut(i).copy_from(&(theta.w(i) / norm));
    }
    Ok(out)
}

/// Deterministic orbit representative: gauge-normalized, each `wᵢ` with its
/// first significant entry positive, units sorted by `(a, w)`.
///
/// The sign flip uses the evenness of the quadratic activation, which is an
/// extra discrete symmetry beyond the permutation–scaling group.
pub fn canonical_representative(theta: &Theta, p: f64) -> Result<Theta> {
    let mut gauged = gauge_normalize(theta, p)?;
    for i in 0..gauged.m() {
        let first = gauged.w(i).iter().copied().find(|v| v.abs() > VANISHING_TOL);
        if matches!(first, Some(v) if v < 0.0) {
            gauged.w_mut(i).neg_mut();
        }
    }
    let mut order: Vec<usize> = (0..gauged.m()).collect();
    order.sort_by(|&i, &j| {
        gauged.a(i).total_cmp(&gauged.a(j)).then_with(|| {
            gauged
                .w(i)
                .iter()
                .zip(gauged.w(j).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let g = GroupElement::permutation(order)?;
    apply_group(&g, &gauged, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{q_matrix, realize};
    use nalgebra::DMatrix;

    fn sample_theta() -> Theta {
        Theta::new(&[0.9, -1.3, 0.4], &[vec![1.0, -0.5], vec![0.2, 0.7], vec![-1.1, 0.3]]).unwrap()
    }

    #[test]
    fn identity_leaves_theta_unchanged() {
        let theta = sample_theta();
        assert_eq!(apply_group(&GroupElement::identity(3), &theta, 2.0).unwrap(), theta);
    }

    #[test]
    fn single_unit_scaling() {
        let theta = Theta::new(&[4.0], &[vec![1.0, 0.0]]).unwrap();
        let g = GroupElement::scaling(vec![2.0]).unwrap();
        let out = apply_group(&g, &theta, 2.0).unwrap();
        assert_eq!(out, Theta::new(&[1.0], &[vec![2.0, 0.0]]).unwrap());
        let x = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -2.0, 0.5]);
        assert_eq!(realize(&out, &x).unwrap(), realize(&theta, &x).unwrap());
    }

    #[test]
    fn swap_exchanges_units() {
        let theta = Theta::new(&[1.0, 2.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = apply_group(&GroupElement::permutation(vec![1, 0]).unwrap(), &theta, 2.0).unwrap();
        assert_eq!(out.a(0), 2.0);
        assert_eq!(out.w(0)[1], 1.0);
        assert_eq!(q_matrix(&out).matrix, q_matrix(&theta).matrix);
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        assert!(GroupElement::scaling(vec![1.0, 0.0]).is_err());
        assert!(GroupElement::scaling(vec![-1.0]).is_err());
        assert!(GroupElement::new(vec![0, 0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn group_law_and_inverse() {
        let theta = sample_theta();
        let g1 = GroupElement::new(vec![2, 0, 1], vec![0.5, 1.7, 3.0]).unwrap();
        let g2 = GroupElement::new(vec![1, 2, 0], vec![2.2, 0.3, 1.1]).unwrap();
        let sequential = apply_group(&g2, &apply_group(&g1, &theta, 2.0).unwrap(), 2.0).unwrap();
        let composed = apply_group(&g2.compose(&g1).unwrap(), &theta, 2.0).unwrap();
        assert!((sequential.as_vector() - composed.as_vector()).amax() <= 1e-12);

        let back = apply_group(&g1.inverse(), &apply_group(&g1, &theta, 2.0).unwrap(), 2.0).unwrap();
        assert!((back.as_vector() - theta.as_vector()).amax() <= 1e-12);
        let id = g1.compose(&g1.inverse()).unwrap();
        assert_eq!(id.perm(), &[0, 1, 2]);
    }

    #[test]
    fn orbit_tangent_examples() {
        let theta = Theta::new(&[1.0], &[vec![1.0]]).unwrap();
        let basis = orbit_tangent_basis(&theta, 2.0);
        assert_eq!(basis.vectors[0].as_slice(), &[-2.0, 1.0]);

        let degenerate = Theta::new(&[0.0, 1.0], &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let basis = orbit_tangent_basis(&degenerate, 2.0);
        assert_eq!(basis.vectors[0].amax(), 0.0);
        assert_eq!(basis.vectors[1].as_slice(), &[0.0, 0.0, 0.0, -2.0, 1.0, 0.0]);
    }

    #[test]
    fn random_orbit_elements() {
        let g = random_orbit_element(5, (0.0, 0.0), 3).unwrap();
        assert!(g.is_pure_permutation());
        assert_eq!(random_orbit_element(5, (-1.0, 1.0), 11).unwrap(), random_orbit_element(5, (-1.0, 1.0), 11).unwrap());
        assert!(random_orbit_element(5, (1.0, -1.0), 11).is_err());

        let theta = sample_theta();
        let g = random_orbit_element(3, (-1.0, 1.0), 0).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.3, 0.8, 0.0, -1.5]);
        let before = realize(&theta, &x).unwrap();
        let after = realize(&apply_group(&g, &theta, 2.0).unwrap(), &x).unwrap();
        assert!((before - after).amax() <= 1e-10);
    }

    #[test]
    fn gauge_normalization() {
        let theta = Theta::new(&[1.0], &[vec![2.0, 0.0]]).unwrap();
        let out = gauge_normalize(&theta, 2.0).unwrap();
        assert_eq!(out, Theta::new(&[4.0], &[vec![1.0, 0.0]]).unwrap());
        assert_eq!(gauge_normalize(&out, 2.0).unwrap(), out);

        let theta = sample_theta();
        let gauged = gauge_normalize(&theta, 2.0).unwrap();
        assert!((q_matrix(&gauged).matrix - q_matrix(&theta).matrix).amax() <= 1e-12);

        let zero = Theta::new(&[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(gauge_normalize(&zero, 2.0), Err(Error::VanishingUnit { unit: 1 })));
    }

    #[test]
    fn canonical_form() {
        let flipped = Theta::new(&[1.0], &[vec![-1.0, 0.0]]).unwrap();
        assert_eq!(canonical_representative(&flipped, 2.0).unwrap(), Theta::new(&[1.0], &[vec![1.0, 0.0]]).unwrap());

        let theta = sample_theta();
        let canon = canonical_representative(&theta, 2.0).unwrap();
        let again = canonical_representative(&canon, 2.0).unwrap();
        assert!((again.as_vector() - canon.as_vector()).amax() <= 1e-14);

        let g = random_orbit_element(3, (-1.5, 1.5), 42).unwrap();
        let moved = apply_group(&g, &theta, 2.0).unwrap();
        let other = canonical_representative(&moved, 2.0).unwrap();
        assert!((other.as_vector() - canon.as_vector()).amax() <= 1e-10);
    }

    #[test]
    fn json_is_one_based() {
        let g = GroupElement::new(vec![1, 0], vec![0.5, 2.0]).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"perm":[2,1],"scales":[0.5,2.0]}"#);
        assert_eq!(serde_json::from_str::<GroupElement>(&json).unwrap(), g);
        assert!(serde_json::from_str::<GroupElement>(r#"{"perm":[0,1],"scales":[1.0,1.0]}"#).is_err());
    }
}
