//! The parametric IRT model family: declarative model specifications,
//! packed parameter vectors, category probabilities and their derivatives,
//! and syntactic nesting detection.

mod nesting;
mod params;
mod probs;

pub use nesting::{nests, Nesting, NestingCertificate};
pub use params::{ItemParams, ParamLayout, ParameterVector, SlopeSlot, Unpacked};
pub use probs::{category_prob_grad, category_probs};

pub(crate) mod probs_internal {
    pub(crate) use super::probs::{item_prob_grads, item_probs_raw, sigmoid};
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::ResponseMatrix;
use crate::error::{Error, Result};

/// Probabilities are clamped into this interval before logs are taken.
pub(crate) const PROB_FLOOR: f64 = 1e-300;
pub(crate) const PROB_CEIL: f64 = 1.0 - 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Graded response model (cumulative logit link).
    Grm,
    /// Generalized partial credit model (adjacent-category logit link).
    Gpcm,
    /// Unidimensional two-parameter logistic model.
    TwoPl,
    /// Rasch model: unit slopes with a free latent variance.
    Rasch,
    /// Multidimensional 2PL (within-item structure).
    MdTwoPl,
    /// Dichotomous model with a fixed lower asymptote. Data generation only.
    ThreePlFixedG,
}

impl ModelFamily {
    pub fn label(&self) -> &'static str {
        match self {
            ModelFamily::Grm => "GRM",
            ModelFamily::Gpcm => "GPCM",
            ModelFamily::TwoPl => "2PL",
            ModelFamily::Rasch => "RM",
            ModelFamily::MdTwoPl => "Md-2PL",
            ModelFamily::ThreePlFixedG => "3PL(fixed g)",
        }
    }
}

/// The category link implied by a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Link {
    Cumulative,
    Adjacent,
    Guessing,
}

/// Constraint on one item-by-dimension slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeConstraint {
    Free,
    Fixed(f64),
    /// Slopes sharing a class id are estimated as one parameter.
    Class(u32),
}

/// Structure of the latent covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// Fixed identity matrix.
    Identity,
    /// Unidimensional with a freely estimated variance (Rasch-style).
    FreeVariance,
    /// Fixed full matrix (e.g. a known correlation matrix).
    Fixed(Vec<Vec<f64>>),
}

impl Covariance {
    pub(crate) fn matrix(&self, n_dims: usize, variance: Option<f64>) -> DMatrix<f64> {
        match self {
            Covariance::Identity => DMatrix::identity(n_dims, n_dims),
            Covariance::FreeVariance => {
                DMatrix::from_element(1, 1, variance.unwrap_or(1.0))
            }
            Covariance::Fixed(rows) => {
                DMatrix::from_fn(n_dims, n_dims, |r, c| rows[r][c])
            }
        }
    }
}

/// Declarative description of one IRT model: family, dimensionality,
/// per-item slope constraints, intercept counts, and the latent covariance
/// structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub n_dims: usize,
    /// Per-item category counts K_j (so item j has K_j - 1 intercepts).
    pub categories: Vec<usize>,
    /// J x M slope constraints, one row per item.
    pub slopes: Vec<Vec<SlopeConstraint>>,
    pub covariance: Covariance,
    /// Common lower asymptote; only for `ThreePlFixedG`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guessing: Option<f64>,
}

impl ModelSpec {
    pub fn n_items(&self) -> usize {
        self.categories.len()
    }

    pub(crate) fn link(&self) -> Link {
        match self.family {
            ModelFamily::Gpcm => Link::Adjacent,
            ModelFamily::ThreePlFixedG => Link::Guessing,
            _ => Link::Cumulative,
        }
    }

    /// A short human-readable tag, e.g. `GRM`, `2d-GRM`, `RM`.
    pub fn label(&self) -> String {
        if self.n_dims > 1 {
            format!("{}d-{}", self.n_dims, self.family.label())
        } else {
            self.family.label().to_string()
        }
    }

    /// Unidimensional 2PL with free slopes and intercepts for J items.
    pub fn two_pl(n_items: usize) -> Self {
        Self {
            family: ModelFamily::TwoPl,
            n_dims: 1,
            categories: vec![2; n_items],
            slopes: vec![vec![SlopeConstraint::Free]; n_items],
            covariance: Covariance::Identity,
            guessing: None,
        }
    }

    /// Rasch model: slopes fixed at one, free latent variance.
    pub fn rasch(n_items: usize) -> Self {
        Self {
            family: ModelFamily::Rasch,
            n_dims: 1,
            categories: vec![2; n_items],
            slopes: vec![vec![SlopeConstraint::Fixed(1.0)]; n_items],
            covariance: Covariance::FreeVariance,
            guessing: None,
        }
    }

    /// Graded response model with K categories per item.
    pub fn grm(n_items: usize, k: usize) -> Self {
        Self {
            family: ModelFamily::Grm,
            n_dims: 1,
            categories: vec![k; n_items],
            slopes: vec![vec![SlopeConstraint::Free]; n_items],
            covariance: Covariance::Identity,
            guessing: None,
        }
    }

    /// Generalized partial credit model with K categories per item.
    pub fn gpcm(n_items: usize, k: usize) -> Self {
        Self {
            family: ModelFamily::Gpcm,
            n_dims: 1,
            categories: vec![k; n_items],
            slopes: vec![vec![SlopeConstraint::Free]; n_items],
            covariance: Covariance::Identity,
            guessing: None,
        }
    }

    /// Within-item two-dimensional 2PL with the second slope of the last
    /// item fixed at zero, resolving the rotational indeterminacy.
    pub fn two_dim_two_pl(n_items: usize) -> Self {
        let mut slopes = vec![vec![SlopeConstraint::Free, SlopeConstraint::Free]; n_items];
        slopes[n_items - 1][1] = SlopeConstraint::Fixed(0.0);
        Self {
            family: ModelFamily::MdTwoPl,
            n_dims: 2,
            categories: vec![2; n_items],
            slopes,
            covariance: Covariance::Identity,
            guessing: None,
        }
    }

    /// GRM generalized to M dimensions (within-item), with the dimension-m
    /// slopes of the last m-1 items fixed at zero.
    pub fn md_grm(n_items: usize, k: usize, n_dims: usize) -> Self {
        let mut slopes = vec![vec![SlopeConstraint::Free; n_dims]; n_items];
        for m in 1..n_dims {
            for extra in 0..m {
                slopes[n_items - 1 - extra][m] = SlopeConstraint::Fixed(0.0);
            }
        }
        Self {
            family: ModelFamily::Grm,
            n_dims,
            categories: vec![k; n_items],
            slopes,
            covariance: Covariance::Identity,
            guessing: None,
        }
    }

    /// Constrained 2PL: items in `equal` share one slope parameter, items in
    /// `unit` have slopes fixed at one.
    pub fn two_pl_constrained(
        n_items: usize,
        equal: impl Iterator<Item = usize>,
        unit: impl Iterator<Item = usize>,
    ) -> Self {
        let mut slopes = vec![vec![SlopeConstraint::Free]; n_items];
        for j in equal {
            slopes[j][0] = SlopeConstraint::Class(0);
        }
        for j in unit {
            slopes[j][0] = SlopeConstraint::Fixed(1.0);
        }
        Self {
            family: ModelFamily::TwoPl,
            n_dims: 1,
            categories: vec![2; n_items],
            slopes,
            covariance: Covariance::Identity,
            guessing: None,
        }
    }

    /// Dichotomous model with a shared fixed guessing parameter and unit
    /// slopes. Only valid for data generation.
    pub fn three_pl_fixed_g(n_items: usize, g: f64) -> Self {
        Self {
            family: ModelFamily::ThreePlFixedG,
            n_dims: 1,
            categories: vec![2; n_items],
            slopes: vec![vec![SlopeConstraint::Fixed(1.0)]; n_items],
            covariance: Covariance::Identity,
            guessing: Some(g),
        }
    }

    /// Check structural validity: shapes, identification constraints, and
    /// family-specific invariants.
    pub fn validate(&self) -> Result<()> {
        let j = self.n_items();
        if j == 0 {
            return Err(Error::InvalidSpec("no items".into()));
        }
        if self.n_dims == 0 {
            return Err(Error::InvalidSpec("n_dims must be >= 1".into()));
        }
        if self.slopes.len() != j {
            return Err(Error::InvalidSpec(format!(
                "{} slope rows for {} items",
                self.slopes.len(),
                j
            )));
        }
        for (jj, row) in self.slopes.iter().enumerate() {
            if row.len() != self.n_dims {
                return Err(Error::InvalidSpec(format!(
                    "item {} has {} slope constraints for {} dimensions",
                    jj,
                    row.len(),
                    self.n_dims
                )));
            }
        }
        for (jj, &k) in self.categories.iter().enumerate() {
            if k < 2 {
                return Err(Error::DegenerateItem { item: jj });
            }
        }
        let dichotomous = self.categories.iter().all(|&k| k == 2);
        match self.family {
            ModelFamily::TwoPl | ModelFamily::MdTwoPl | ModelFamily::Rasch
            | ModelFamily::ThreePlFixedG => {
                if !dichotomous {
                    return Err(Error::InvalidSpec(format!(
                        "{} requires dichotomous items",
                        self.family.label()
                    )));
                }
            }
            _ => {}
        }
        match self.family {
            ModelFamily::Rasch => {
                if self.n_dims != 1 {
                    return Err(Error::InvalidSpec("Rasch model must be unidimensional".into()));
                }
                let all_unit = self
                    .slopes
                    .iter()
                    .all(|r| matches!(r[0], SlopeConstraint::Fixed(v) if v == 1.0));
                let one_class = {
                    let mut class = None;
                    self.slopes.iter().all(|r| match r[0] {
                        SlopeConstraint::Class(c) => {
                            if class.is_none() {
                                class = Some(c);
                            }
                            class == Some(c)
                        }
                        _ => false,
                    })
                };
                match (&self.covariance, all_unit, one_class) {
                    (Covariance::FreeVariance, true, _) => {}
                    (Covariance::Identity, _, true) => {}
                    _ => {
                        return Err(Error::InvalidSpec(
                            "Rasch model needs unit slopes with a free variance, \
                             or one slope equality class with a fixed variance"
                                .into(),
                        ))
                    }
                }
            }
            ModelFamily::MdTwoPl => {
                if self.n_dims < 2 {
                    return Err(Error::InvalidSpec("Md-2PL requires n_dims >= 2".into()));
                }
            }
            ModelFamily::ThreePlFixedG => match self.guessing {
                Some(g) if (0.0..1.0).contains(&g) => {}
                _ => {
                    return Err(Error::InvalidSpec(
                        "3PL(fixed g) needs a guessing value in [0, 1)".into(),
                    ))
                }
            },
            _ => {}
        }
        if self.guessing.is_some() && self.family != ModelFamily::ThreePlFixedG {
            return Err(Error::InvalidSpec("guessing is only valid for 3PL(fixed g)".into()));
        }
        if matches!(self.covariance, Covariance::FreeVariance) && self.n_dims != 1 {
            return Err(Error::InvalidSpec("free variance requires n_dims = 1".into()));
        }
        if let Covariance::Fixed(rows) = &self.covariance {
            if rows.len() != self.n_dims || rows.iter().any(|r| r.len() != self.n_dims) {
                return Err(Error::InvalidSpec("fixed covariance has wrong shape".into()));
            }
        }
        // Rotational identification: dimension m needs at least m-1 zero-fixed
        // slopes when slopes on that dimension are otherwise free.
        for m in 1..self.n_dims {
            let zeros = self
                .slopes
                .iter()
                .filter(|r| matches!(r[m], SlopeConstraint::Fixed(v) if v == 0.0))
                .count();
            if zeros < m {
                return Err(Error::InvalidSpec(format!(
                    "dimension {} needs at least {} slopes fixed at zero for identification",
                    m + 1,
                    m
                )));
            }
        }
        if self.layout().n_params == 0 {
            return Err(Error::InvalidSpec("model has no free parameters".into()));
        }
        Ok(())
    }

    /// Check the spec against a dataset's shape.
    pub fn matches_data(&self, data: &ResponseMatrix) -> Result<()> {
        if data.n_items() != self.n_items() {
            return Err(Error::ShapeMismatch(format!(
                "data has {} items, spec has {}",
                data.n_items(),
                self.n_items()
            )));
        }
        for (j, (&kd, &ks)) in data.categories().iter().zip(&self.categories).enumerate() {
            if kd > ks {
                return Err(Error::ShapeMismatch(format!(
                    "item {}: data has {} categories, spec declares {}",
                    j, kd, ks
                )));
            }
        }
        Ok(())
    }

    /// Spec with categories widened to cover the data (spec categories must
    /// not be narrower than observed codes).
    pub fn for_data(mut self, data: &ResponseMatrix) -> Result<Self> {
        if data.n_items() != self.n_items() {
            return Err(Error::ShapeMismatch(format!(
                "data has {} items, spec has {}",
                data.n_items(),
                self.n_items()
            )));
        }
        for (ks, &kd) in self.categories.iter_mut().zip(data.categories()) {
            if kd > *ks {
                *ks = kd;
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_validate() {
        ModelSpec::two_pl(10).validate().unwrap();
        ModelSpec::rasch(10).validate().unwrap();
        ModelSpec::grm(10, 4).validate().unwrap();
        ModelSpec::gpcm(10, 4).validate().unwrap();
        ModelSpec::two_dim_two_pl(10).validate().unwrap();
        ModelSpec::md_grm(6, 5, 2).validate().unwrap();
        ModelSpec::two_pl_constrained(10, 0..5, 5..10).validate().unwrap();
        ModelSpec::three_pl_fixed_g(10, 0.25).validate().unwrap();
    }

    #[test]
    fn md_model_without_identification_is_rejected() {
        let mut spec = ModelSpec::two_dim_two_pl(5);
        spec.slopes[4][1] = SlopeConstraint::Free;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rasch_without_free_variance_is_rejected() {
        let mut spec = ModelSpec::rasch(5);
        spec.covariance = Covariance::Identity;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn guessing_outside_unit_interval_is_rejected() {
        assert!(ModelSpec::three_pl_fixed_g(5, 1.2).validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::two_pl_constrained(6, 0..3, 3..6);
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn labels() {
        assert_eq!(ModelSpec::rasch(5).label(), "RM");
        assert_eq!(ModelSpec::md_grm(6, 5, 2).label(), "2d-GRM");
    }
}
