//! Sigma-point rules, Gaussian moment matching and Fourier-Hermite fitting.
//!
//! A [`SigmaRule`] holds unit sigma points `ε_n` and weights `w_n` for the
//! standard normal in `n` dimensions. Against an arbitrary Gaussian
//! `N(μ, Σ)` with lower Cholesky factor `L`, the rule evaluates
//!
//! ```text
//! E[g(α)] ≈ Σ_n w_n g(μ + L ε_n)
//! ```
//!
//! Three families are provided:
//!
//! | family | points   | exact for monomials up to |
//! |--------|----------|---------------------------|
//! | UT3    | 2n + 1   | degree 3                  |
//! | UT5    | 2n² + 1  | degree 5                  |
//! | GH3    | 3ⁿ       | degree 5 in each axis     |
//!
//! Fourier-Hermite fitting uses the projections of `g` onto the Hermite
//! polynomials `H₁(ε) = ε` and `H₂(ε) = εεᵀ − I` and needs fourth-order
//! moments to be exact on quadratics, so UT3 is only an approximation there.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky_jittered, symmetrize};
use crate::{lit, Error, Real, Result};

/// GH3 point counts grow as 3ⁿ; beyond this dimension the rule is refused.
pub const GH3_MAX_DIMENSION: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleFamily {
    /// Third-order unscented transform, `κ = 3 − n`.
    Ut3,
    /// Fifth-degree symmetric rule with axis and pairwise points at `±√3`.
    Ut5,
    /// Tensor-product three-point Gauss-Hermite rule.
    Gh3,
}

impl RuleFamily {
    pub fn name(self) -> &'static str {
        match self {
            RuleFamily::Ut3 => "ut3",
            RuleFamily::Ut5 => "ut5",
            RuleFamily::Gh3 => "gh3",
        }
    }

    /// Highest total monomial degree integrated exactly.
    pub fn degree(self) -> usize {
        match self {
            RuleFamily::Ut3 => 3,
            RuleFamily::Ut5 | RuleFamily::Gh3 => 5,
        }
    }

    /// Number of points generated in dimension `n`, if the rule exists.
    pub fn point_count(self, n: usize) -> Option<usize> {
        match self {
            RuleFamily::Ut3 => Some(2 * n + 1),
            RuleFamily::Ut5 => Some(2 * n * n + 1),
            RuleFamily::Gh3 if n <= GH3_MAX_DIMENSION => Some(3usize.pow(n as u32)),
            RuleFamily::Gh3 => None,
        }
    }
}

impl fmt::Display for RuleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ut3" => Ok(RuleFamily::Ut3),
            "ut5" => Ok(RuleFamily::Ut5),
            "gh3" | "gh" => Ok(RuleFamily::Gh3),
            other => Err(Error::UnknownRule(other.to_string())),
        }
    }
}

/// Unit sigma points (columns of `points`) and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaRule<T: Real> {
    family: RuleFamily,
    points: DMatrix<T>,
    weights: Vec<T>,
}

impl<T: Real> SigmaRule<T> {
    pub fn family(&self) -> RuleFamily {
        self.family
    }

    pub fn dimension(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Unit points, one per column.
    pub fn points(&self) -> &DMatrix<T> {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn check_dimension(&self, n: usize) -> Result<()> {
        if self.dimension() != n {
            return Err(Error::Dimension {
                what: "sigma rule",
                expected: n,
                found: self.dimension(),
            });
        }
        Ok(())
    }
}

/// Builds the unit sigma rule of `family` in dimension `n`.
pub fn make_rule<T: Real>(family: RuleFamily, n: usize) -> Result<SigmaRule<T>> {
    if n == 0 {
        return Err(Error::ZeroDimension);
    }
    let (columns, weights): (Vec<Vec<f64>>, Vec<f64>) = match family {
        RuleFamily::Ut3 => ut3(n),
        RuleFamily::Ut5 => ut5(n),
        RuleFamily::Gh3 => {
            if n > GH3_MAX_DIMENSION {
                return Err(Error::DimensionTooLarge(n));
            }
            gh3(n)
        }
    };
    let points = DMatrix::from_fn(n, columns.len(), |i, j| lit::<T>(columns[j][i]));
    Ok(SigmaRule {
        family,
        points,
        weights: weights.into_iter().map(lit::<T>).collect(),
    })
}

fn axis_point(n: usize, i: usize, value: f64) -> Vec<f64> {
    let mut p = vec![0.0; n];
    p[i] = value;
    p
}

fn ut3(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    // n + κ = 3
    let spread = 3f64.sqrt();
    let mut pts = vec![vec![0.0; n]];
    let mut w = vec![1.0 - n as f64 / 3.0];
    for i in 0..n {
        for s in [1.0, -1.0] {
            pts.push(axis_point(n, i, s * spread));
            w.push(1.0 / 6.0);
        }
    }
    (pts, w)
}

fn ut5(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let nf = n as f64;
    let spread = 3f64.sqrt();
    let mut pts = vec![vec![0.0; n]];
    let mut w = vec![1.0 + (nf * nf - 7.0 * nf) / 18.0];
    let axis_weight = (4.0 - nf) / 18.0;
    for i in 0..n {
        for s in [1.0, -1.0] {
            pts.push(axis_point(n, i, s * spread));
            w.push(axis_weight);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut p = vec![0.0; n];
                p[i] = si * spread;
                p[j] = sj * spread;
                pts.push(p);
                w.push(1.0 / 36.0);
            }
        }
    }
    (pts, w)
}

fn gh3(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let nodes = [-(3f64.sqrt()), 0.0, 3f64.sqrt()];
    let node_weights = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
    let count = 3usize.pow(n as u32);
    let mut pts = Vec::with_capacity(count);
    let mut w = Vec::with_capacity(count);
    for mut index in 0..count {
        let mut p = vec![0.0; n];
        let mut weight = 1.0;
        for coord in p.iter_mut() {
            let digit = index % 3;
            index /= 3;
            *coord = nodes[digit];
            weight *= node_weights[digit];
        }
        pts.push(p);
        w.push(weight);
    }
    (pts, w)
}

/// Gaussian `N(mean, covariance)` with its lower Cholesky factor cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief<T: Real> {
    mean: DVector<T>,
    covariance: DMatrix<T>,
    cholesky: DMatrix<T>,
}

impl<T: Real> GaussianBelief<T> {
    /// Symmetrizes `covariance` and factorizes it, adding jitter if needed.
    pub fn new(mean: DVector<T>, covariance: DMatrix<T>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::Dimension {
                what: "belief covariance",
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let covariance = symmetrize(&covariance);
        let cholesky = cholesky_jittered(&covariance, "belief covariance")?;
        Ok(GaussianBelief {
            mean,
            covariance,
            cholesky,
        })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<T> {
        &self.covariance
    }

    /// Lower-triangular `√Σ`.
    pub fn cholesky(&self) -> &DMatrix<T> {
        &self.cholesky
    }

    /// Transformed points `μ + √Σ ε_n`, one per column.
    pub fn sigma_points(&self, rule: &SigmaRule<T>) -> Result<DMatrix<T>> {
        rule.check_dimension(self.dimension())?;
        let mut pts = &self.cholesky * rule.points();
        for mut col in pts.column_iter_mut() {
            col += &self.mean;
        }
        Ok(pts)
    }

    /// Marginal over the leading `n` coordinates.
    ///
    /// The leading block of a lower Cholesky factor is the factor of the
    /// leading covariance block, so no refactorization happens.
    pub fn leading_marginal(&self, n: usize) -> GaussianBelief<T> {
        GaussianBelief {
            mean: self.mean.rows(0, n).into_owned(),
            covariance: self.covariance.view((0, 0), (n, n)).into_owned(),
            cholesky: self.cholesky.view((0, 0), (n, n)).into_owned(),
        }
    }
}

/// `E[g(α)]` for `α ~ belief`, approximated by the sigma rule.
pub fn expect<T, G>(rule: &SigmaRule<T>, belief: &GaussianBelief<T>, mut g: G) -> Result<DVector<T>>
where
    T: Real,
    G: FnMut(&DVector<T>) -> DVector<T>,
{
    let pts = belief.sigma_points(rule)?;
    let mut acc: Option<DVector<T>> = None;
    for (col, &w) in pts.column_iter().zip(rule.weights()) {
        let value = g(&col.into_owned()) * w;
        acc = Some(match acc {
            Some(a) => a + value,
            None => value,
        });
    }
    Ok(acc.expect("sigma rule has at least one point"))
}

/// Moments of `β = g(α)` under the Gaussian moment-matching approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatch<T: Real> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
    /// `Σ_αβ = E[(α − μ_α)(β − μ_β)ᵀ]`.
    pub cross_covariance: DMatrix<T>,
    /// `g` evaluated at every transformed sigma point, one per column.
    pub images: DMatrix<T>,
}

impl<T: Real> MomentMatch<T> {
    /// Joint Gaussian over `(α, β)`.
    pub fn joint(&self, input: &GaussianBelief<T>) -> Result<GaussianBelief<T>> {
        let cov = crate::linalg::block_symmetric(
            input.covariance(),
            &self.cross_covariance.transpose(),
            &self.covariance,
        );
        GaussianBelief::new(crate::linalg::concat(input.mean(), &self.mean), cov)
    }
}

/// Unscented transform of `g` about `belief`.
pub fn moment_match<T, G>(rule: &SigmaRule<T>, belief: &GaussianBelief<T>, mut g: G) -> Result<MomentMatch<T>>
where
    T: Real,
    G: FnMut(&DVector<T>) -> DVector<T>,
{
    let pts = belief.sigma_points(rule)?;
    let columns: Vec<DVector<T>> = pts.column_iter().map(|c| g(&c.into_owned())).collect();
    let out_dim = columns[0].len();
    let images = DMatrix::from_fn(out_dim, columns.len(), |i, j| columns[j][i]);
    moment_match_images(rule, belief, images)
}

/// Moment matching from precomputed images `g(μ + √Σ ε_n)`.
pub fn moment_match_images<T: Real>(
    rule: &SigmaRule<T>,
    belief: &GaussianBelief<T>,
    images: DMatrix<T>,
) -> Result<MomentMatch<T>> {
    rule.check_dimension(belief.dimension())?;
    if images.ncols() != rule.len() {
        return Err(Error::Dimension {
            what: "sigma images",
            expected: rule.len(),
            found: images.ncols(),
        });
    }
    let out_dim = images.nrows();
    let mut mean = DVector::zeros(out_dim);
    for (col, &w) in images.column_iter().zip(rule.weights()) {
        mean.axpy(w, &col, T::one());
    }
    let mut cov = DMatrix::zeros(out_dim, out_dim);
    // Σ_αβ = L Σ_n w_n ε_n (f_n − μ_β)ᵀ
    let mut whitened_cross = DMatrix::zeros(belief.dimension(), out_dim);
    for ((col, eps), &w) in images
        .column_iter()
        .zip(rule.points().column_iter())
        .zip(rule.weights())
    {
        let d = col - &mean;
        cov.ger(w, &d, &d, T::one());
        whitened_cross.ger(w, &eps, &d, T::one());
    }
    Ok(MomentMatch {
        mean,
        covariance: symmetrize(&cov),
        cross_covariance: belief.cholesky() * whitened_cross,
        images,
    })
}

/// Quadratic surrogate `g₀ + gᵀδ + ½ δᵀ H δ` with `δ = α − reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel<T: Real> {
    pub reference: DVector<T>,
    pub constant: T,
    pub gradient: DVector<T>,
    pub hessian: DMatrix<T>,
}

impl<T: Real> QuadraticModel<T> {
    pub fn zero(reference: DVector<T>) -> Self {
        let n = reference.len();
        QuadraticModel {
            reference,
            constant: T::zero(),
            gradient: DVector::zeros(n),
            hessian: DMatrix::zeros(n, n),
        }
    }

    pub fn dimension(&self) -> usize {
        self.reference.len()
    }

    pub fn evaluate(&self, alpha: &DVector<T>) -> T {
        let d = alpha - &self.reference;
        self.constant + self.gradient.dot(&d) + (&self.hessian * &d).dot(&d) * lit::<T>(0.5)
    }

    /// Coefficients `(c, b, H)` of the same quadratic written as
    /// `c + bᵀα + ½ αᵀ H α` in absolute coordinates.
    pub fn absolute_coefficients(&self) -> (T, DVector<T>, DMatrix<T>) {
        let h_ref = &self.hessian * &self.reference;
        let b = &self.gradient - &h_ref;
        let c = self.constant - self.gradient.dot(&self.reference)
            + h_ref.dot(&self.reference) * lit::<T>(0.5);
        (c, b, self.hessian.clone())
    }

    /// `E[q(α)]` for `α ~ N(mean, covariance)`, in closed form.
    pub fn expectation(&self, mean: &DVector<T>, covariance: &DMatrix<T>) -> T {
        let trace = (&self.hessian * covariance).trace();
        self.evaluate(mean) + trace * lit::<T>(0.5)
    }

    /// Same quadratic expanded about a different reference point.
    pub fn recentered(&self, reference: DVector<T>) -> Self {
        let d = &reference - &self.reference;
        QuadraticModel {
            constant: self.evaluate(&reference),
            gradient: &self.gradient + &self.hessian * &d,
            hessian: self.hessian.clone(),
            reference,
        }
    }
}

/// Second-order Fourier-Hermite surrogate of a scalar `g` about `belief`.
pub fn fourier_hermite_fit<T, G>(rule: &SigmaRule<T>, belief: &GaussianBelief<T>, mut g: G) -> Result<QuadraticModel<T>>
where
    T: Real,
    G: FnMut(&DVector<T>) -> T,
{
    let pts = belief.sigma_points(rule)?;
    let values: Vec<T> = pts.column_iter().map(|c| g(&c.into_owned())).collect();
    fourier_hermite_fit_values(rule, belief, &values)
}

/// Fourier-Hermite fit from values of `g` at the transformed sigma points
/// (in the column order of [`GaussianBelief::sigma_points`]).
pub fn fourier_hermite_fit_values<T: Real>(
    rule: &SigmaRule<T>,
    belief: &GaussianBelief<T>,
    values: &[T],
) -> Result<QuadraticModel<T>> {
    rule.check_dimension(belief.dimension())?;
    if values.len() != rule.len() {
        return Err(Error::Dimension {
            what: "sigma values",
            expected: rule.len(),
            found: values.len(),
        });
    }
    let n = rule.dimension();
    let mut g0 = T::zero();
    let mut g1 = DVector::zeros(n);
    let mut g2 = DMatrix::zeros(n, n);
    for ((eps, &w), &v) in rule.points().column_iter().zip(rule.weights()).zip(values) {
        let wv = w * v;
        g0 += wv;
        g1.axpy(wv, &eps, T::one());
        g2.ger(wv, &eps, &eps, T::one());
    }
    // H₂ = εεᵀ − I contributes −I Σ w_n g_n = −g0 I
    for i in 0..n {
        g2[(i, i)] -= g0;
    }
    let g2 = symmetrize(&g2);
    let l = belief.cholesky();
    let constant = g0 - g2.trace() * lit::<T>(0.5);
    let gradient = l
        .tr_solve_lower_triangular(&g1)
        .ok_or(Error::NotPositiveDefinite { what: "belief covariance" })?;
    // L⁻ᵀ G L⁻¹ = L⁻ᵀ (L⁻ᵀ G)ᵀ since G is symmetric
    let left = l
        .tr_solve_lower_triangular(&g2)
        .ok_or(Error::NotPositiveDefinite { what: "belief covariance" })?;
    let hessian = l
        .tr_solve_lower_triangular(&left.transpose())
        .ok_or(Error::NotPositiveDefinite { what: "belief covariance" })?;
    Ok(QuadraticModel {
        reference: belief.mean().clone(),
        constant,
        gradient,
        hessian: symmetrize(&hessian),
    })
}
