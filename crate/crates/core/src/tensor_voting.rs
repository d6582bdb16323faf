//! Two-stage tensor voting.
//!
//! Stage one accumulates votes from an isotropic prior and keeps only the
//! plane and line components of the result. Stage two re-votes those
//! processed tensors; its eigen-structure gives the line/plane/ball
//! saliencies and, after inverting the eigenvalues, the ellipsoid used by
//! registration.

use nalgebra::SymmetricEigen;
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};

pub type SymTensor3 = Mat3;

/// Relative eigenvalue floor below which a tensor is treated as singular.
pub const EIGENVALUE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("neighbour coincides with the voting point")]
    DegenerateNeighborhood,
    #[error("tensor eigenvalue below floor; no ellipsoid")]
    SingularTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Line,
    Plane,
    Ball,
}

impl Primitive {
    pub fn label(self) -> &'static str {
        match self {
            Primitive::Line => "line",
            Primitive::Plane => "plane",
            Primitive::Ball => "ball",
        }
    }
}

/// `[line, plane, ball]` saliency triple.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Saliency(pub [f64; 3]);

impl Saliency {
    pub fn line(&self) -> f64 {
        self.0[0]
    }
    pub fn plane(&self) -> f64 {
        self.0[1]
    }
    pub fn ball(&self) -> f64 {
        self.0[2]
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().map(|g| g.abs()).sum()
    }

    /// Most salient primitive; ties resolve in line, plane, ball order.
    pub fn dominant(&self) -> Primitive {
        let [l, p, b] = self.0;
        if l >= p && l >= b {
            Primitive::Line
        } else if p >= b {
            Primitive::Plane
        } else {
            Primitive::Ball
        }
    }

    /// True when `kind` beats both other saliencies strictly.
    pub fn strictly_dominant(&self, kind: Primitive) -> bool {
        let [l, p, b] = self.0;
        match kind {
            Primitive::Line => l > p && l > b,
            Primitive::Plane => p > l && p > b,
            Primitive::Ball => b > l && b > p,
        }
    }
}

/// Local surface ellipsoid: axes sorted by ascending magnitude, so `axes[0]`
/// approximates the surface normal and `axes[2]` the dominant direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub axes: [Vec3; 3],
    pub magnitudes: [f64; 3],
    pub saliency: Saliency,
}

impl Ellipsoid {
    pub fn normal(&self) -> Vec3 {
        self.axes[0]
    }

    pub fn principal(&self) -> Vec3 {
        self.axes[2]
    }
}

/// Eigen-decomposition with eigenvalues sorted descending and each
/// eigenvector signed so that its largest-magnitude component is positive.
pub fn sorted_eigen(t: &SymTensor3) -> ([f64; 3], [Vec3; 3]) {
    let eig = SymmetricEigen::new(*t);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let vectors = order.map(|i| {
        let v: Vec3 = eig.eigenvectors.column(i).into_owned();
        let mut lead = 0;
        for k in 1..3 {
            if v[k].abs() > v[lead].abs() {
                lead = k;
            }
        }
        if v[lead] < 0.0 {
            -v
        } else {
            v
        }
    });
    (values, vectors)
}

/// Distance weight `exp(−d²/r)`.
pub fn vote_weight(distance_sq: f64, radius: f64) -> f64 {
    (-distance_sq / radius).exp()
}

/// One vote `U K U′` cast from a neighbour along unit direction `u`.
pub fn vote(u: &Vec3, prior: &SymTensor3) -> SymTensor3 {
    let uut = u * u.transpose();
    let reflect = Mat3::identity() - uut * 2.0;
    let attenuate = Mat3::identity() - uut * 0.5;
    reflect * prior * attenuate * reflect.transpose()
}

/// Vote under an identity prior, `I − ½ u uᵀ` in closed form.
pub fn identity_vote(u: &Vec3) -> SymTensor3 {
    Mat3::identity() - u * u.transpose() * 0.5
}

fn symmetrize(m: &SymTensor3) -> SymTensor3 {
    (m + m.transpose()) * 0.5
}

/// Accumulated tensor at `q` from neighbours carrying prior tensors.
/// `None` as prior means the identity (stage one).
///
/// The sum runs in neighbour order and is symmetrized at the end, since a
/// single vote is not symmetric for general priors.
pub fn stage_tensor<'a, I>(q: &Vec3, neighbors: I, radius: f64) -> Result<SymTensor3, TensorError>
where
    I: IntoIterator<Item = (Vec3, Option<&'a SymTensor3>)>,
{
    let mut acc = Mat3::zeros();
    for (p, prior) in neighbors {
        let d = q - p;
        let d2 = d.norm_squared();
        if d2 <= 0.0 {
            return Err(TensorError::DegenerateNeighborhood);
        }
        let u = d / d2.sqrt();
        let c = vote_weight(d2, radius);
        acc += match prior {
            None => identity_vote(&u),
            Some(k) => vote(&u, k),
        } * c;
    }
    Ok(symmetrize(&acc))
}

/// Keeps the plane and line vote components of a stage-one tensor.
pub fn process_tensor(j1: &SymTensor3) -> SymTensor3 {
    let ([l1, l2, l3], [e1, e2, _]) = sorted_eigen(j1);
    let p1 = e1 * e1.transpose();
    let p2 = e2 * e2.transpose();
    p1 * (l1 - l2) + (p1 + p2) * (l2 - l3)
}

pub fn saliencies_from_eigenvalues([l1, l2, l3]: [f64; 3]) -> Saliency {
    Saliency([(l2 - l3).max(0.0), (l1 - l2).max(0.0), l3.max(0.0)])
}

pub fn extract_saliencies(j2: &SymTensor3) -> Saliency {
    saliencies_from_eigenvalues(sorted_eigen(j2).0)
}

/// Ellipsoid with magnitudes `r / (λ_i λ′)`, `λ′ = Σ 1/λ_i`.
pub fn extract_ellipsoid(j2: &SymTensor3, radius: f64) -> Result<Ellipsoid, TensorError> {
    let (values, axes) = sorted_eigen(j2);
    ellipsoid_from_eigen(values, axes, radius)
}

pub fn ellipsoid_from_eigen(
    values: [f64; 3],
    axes: [Vec3; 3],
    radius: f64,
) -> Result<Ellipsoid, TensorError> {
    let floor = EIGENVALUE_FLOOR * values[0];
    if !(values[0] > 0.0) || values.iter().any(|&l| !(l > floor)) {
        return Err(TensorError::SingularTensor);
    }
    let inv_sum: f64 = values.iter().map(|l| 1.0 / l).sum();
    let magnitudes = values.map(|l| radius / (l * inv_sum));
    Ok(Ellipsoid {
        axes,
        magnitudes,
        saliency: saliencies_from_eigenvalues(values),
    })
}

/// Saliency and ellipsoid of a stage-two tensor in one decomposition.
pub fn analyse(j2: &SymTensor3, radius: f64) -> (Saliency, Option<Ellipsoid>) {
    let (values, axes) = sorted_eigen(j2);
    (
        saliencies_from_eigenvalues(values),
        ellipsoid_from_eigen(values, axes, radius).ok(),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVote {
    pub saliency: Saliency,
    pub ellipsoid: Option<Ellipsoid>,
}

/// Two-stage voting over a fixed point set where every point within `radius`
/// is a neighbour. Coincident points do not vote for each other.
pub fn dense_vote(points: &[Vec3], radius: f64) -> Vec<DenseVote> {
    let r2 = radius * radius;
    let neighbors: Vec<Vec<usize>> = points
        .iter()
        .map(|q| {
            points
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    let d2 = (q - *p).norm_squared();
                    d2 > 0.0 && d2 <= r2
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let stage1: Vec<SymTensor3> = points
        .iter()
        .zip(&neighbors)
        .map(|(q, nb)| {
            let j1 = stage_tensor(q, nb.iter().map(|&j| (points[j], None)), radius)
                .expect("coincident points filtered");
            process_tensor(&j1)
        })
        .collect();
    points
        .iter()
        .zip(&neighbors)
        .map(|(q, nb)| {
            let j2 = stage_tensor(q, nb.iter().map(|&j| (points[j], Some(&stage1[j]))), radius)
                .expect("coincident points filtered");
            let (saliency, ellipsoid) = analyse(&j2, radius);
            DenseVote {
                saliency,
                ellipsoid,
            }
        })
        .collect()
}
