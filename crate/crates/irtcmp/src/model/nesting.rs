//! Syntactic nesting detection between model specifications.

use serde::{Deserialize, Serialize};

use super::{Covariance, ModelSpec, SlopeConstraint};
use crate::error::{Error, Result};

/// Evidence that one spec is a constrained version of another, with the
/// translation described in words and the parameter-count difference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestingCertificate {
    /// P_full - P_reduced.
    pub df: usize,
    pub description: String,
    /// True when nesting was asserted by the user rather than detected.
    pub user_override: bool,
}

impl NestingCertificate {
    /// User-asserted nesting (Vuong's formal nestedness cannot be decided
    /// from specs alone); honored and flagged in downstream reports.
    pub fn user_asserted(df: usize) -> Self {
        Self { df, description: "nesting asserted by the user".into(), user_override: true }
    }
}

/// Outcome of the syntactic check. `NotSyntacticallyNested` is a refusal to
/// certify, never a proof of non-nesting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Nesting {
    Nested(NestingCertificate),
    NotSyntacticallyNested,
}

impl Nesting {
    pub fn certificate(&self) -> Option<&NestingCertificate> {
        match self {
            Nesting::Nested(c) => Some(c),
            Nesting::NotSyntacticallyNested => None,
        }
    }
}

fn all_dichotomous(spec: &ModelSpec) -> bool {
    spec.categories.iter().all(|&k| k == 2)
}

fn links_comparable(a: &ModelSpec, b: &ModelSpec) -> bool {
    use super::Link;
    if a.link() == Link::Guessing || b.link() == Link::Guessing {
        return false;
    }
    a.link() == b.link() || (all_dichotomous(a) && all_dichotomous(b))
}

/// Is the Rasch parameterization: all slopes fixed at one plus a free
/// latent variance?
fn is_unit_slope_free_variance(spec: &ModelSpec) -> bool {
    spec.n_dims == 1
        && matches!(spec.covariance, Covariance::FreeVariance)
        && spec
            .slopes
            .iter()
            .all(|r| matches!(r[0], SlopeConstraint::Fixed(v) if v == 1.0))
}

/// Check that the reduced constraints refine the full: every restriction the
/// full spec imposes is preserved (and possibly strengthened) by the reduced.
fn slopes_refine(reduced: &ModelSpec, full: &ModelSpec, dims: usize) -> bool {
    for m in 0..dims {
        // items of the same full class must stay equated in the reduced spec
        let mut classes: Vec<(u32, &SlopeConstraint)> = Vec::new();
        for j in 0..full.n_items() {
            match full.slopes[j][m] {
                SlopeConstraint::Fixed(v) => {
                    if !matches!(reduced.slopes[j][m], SlopeConstraint::Fixed(rv) if rv == v) {
                        return false;
                    }
                }
                SlopeConstraint::Free => {}
                SlopeConstraint::Class(c) => {
                    let r = &reduced.slopes[j][m];
                    match classes.iter().find(|(cc, _)| *cc == c) {
                        None => {
                            match r {
                                SlopeConstraint::Free => return false,
                                _ => classes.push((c, r)),
                            }
                        }
                        Some((_, first)) => {
                            let same = match (first, r) {
                                (SlopeConstraint::Fixed(a), SlopeConstraint::Fixed(b)) => a == b,
                                (SlopeConstraint::Class(a), SlopeConstraint::Class(b)) => a == b,
                                _ => false,
                            };
                            if !same {
                                return false;
                            }
                        }
                    }
                }
            }
        }
    }
    true
}

/// Try to certify that `reduced` is obtained from `full` by fixing or
/// equating parameters. Returns `NotSyntacticallyNested` when no constraint
/// map is recognized; it never proves non-nesting.
pub fn nests(reduced: &ModelSpec, full: &ModelSpec) -> Result<Nesting> {
    if reduced.n_items() != full.n_items() || reduced.categories != full.categories {
        return Err(Error::ShapeMismatch(
            "specs describe different data shapes (items or categories differ)".into(),
        ));
    }
    if !links_comparable(reduced, full) {
        return Ok(Nesting::NotSyntacticallyNested);
    }
    let p_reduced = reduced.layout().n_params;
    let p_full = full.layout().n_params;
    if p_full < p_reduced {
        return Ok(Nesting::NotSyntacticallyNested);
    }
    let df = p_full - p_reduced;

    // Rasch-style reduced model: unit slopes with free variance is the same
    // sub-model as "all slopes equal" under a standard-normal prior.
    if is_unit_slope_free_variance(reduced)
        && full.n_dims == 1
        && matches!(full.covariance, Covariance::Identity)
    {
        let full_allows_equal_slopes = full
            .slopes
            .iter()
            .all(|r| matches!(r[0], SlopeConstraint::Free))
            || {
                let mut class = None;
                full.slopes.iter().all(|r| match r[0] {
                    SlopeConstraint::Class(c) => {
                        if class.is_none() {
                            class = Some(c);
                        }
                        class == Some(c)
                    }
                    _ => false,
                })
            };
        if full_allows_equal_slopes {
            return Ok(Nesting::Nested(NestingCertificate {
                df,
                description: "reduced model constrains all slopes to be equal \
                              (unit slopes with a free latent variance)"
                    .into(),
                user_override: false,
            }));
        }
        return Ok(Nesting::NotSyntacticallyNested);
    }

    if reduced.n_dims == full.n_dims {
        let same_cov = reduced.covariance == full.covariance;
        if same_cov && slopes_refine(reduced, full, full.n_dims) {
            return Ok(Nesting::Nested(NestingCertificate {
                df,
                description: "reduced model fixes or equates slopes of the full model".into(),
                user_override: false,
            }));
        }
        return Ok(Nesting::NotSyntacticallyNested);
    }

    // Dimension nesting: the reduced model zeroes the extra dimensions of the
    // full model. Shared dimensions must carry identical constraints and the
    // extra full dimensions must not fix any slope at a nonzero value.
    if reduced.n_dims < full.n_dims
        && matches!(reduced.covariance, Covariance::Identity)
        && matches!(full.covariance, Covariance::Identity)
    {
        let shared_match = (0..reduced.n_items()).all(|j| {
            (0..reduced.n_dims).all(|m| reduced.slopes[j][m] == full.slopes[j][m])
        });
        let extra_zeroable = (0..full.n_items()).all(|j| {
            (reduced.n_dims..full.n_dims).all(|m| match full.slopes[j][m] {
                SlopeConstraint::Fixed(v) => v == 0.0,
                _ => true,
            })
        });
        if shared_match && extra_zeroable {
            return Ok(Nesting::Nested(NestingCertificate {
                df,
                description: format!(
                    "reduced model fixes the slopes of dimensions {}..{} at zero",
                    reduced.n_dims + 1,
                    full.n_dims
                ),
                user_override: false,
            }));
        }
    }

    Ok(Nesting::NotSyntacticallyNested)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn rasch_nests_in_two_pl() {
        let n = nests(&ModelSpec::rasch(10), &ModelSpec::two_pl(10)).unwrap();
        let cert = n.certificate().expect("should nest");
        assert_eq!(cert.df, 9); // 20 - 11
        assert!(!cert.user_override);
    }

    #[test]
    fn two_pl_nests_in_two_dim_two_pl() {
        let n = nests(&ModelSpec::two_pl(10), &ModelSpec::two_dim_two_pl(10)).unwrap();
        let cert = n.certificate().expect("should nest");
        assert_eq!(cert.df, 9); // 29 - 20
    }

    #[test]
    fn grm_nests_in_two_dim_grm() {
        let n = nests(&ModelSpec::grm(6, 5), &ModelSpec::md_grm(6, 5, 2)).unwrap();
        assert_eq!(n.certificate().unwrap().df, 5); // 35 - 30
    }

    #[test]
    fn grm_vs_gpcm_not_syntactically_nested() {
        let n = nests(&ModelSpec::grm(10, 4), &ModelSpec::gpcm(10, 4)).unwrap();
        assert!(n.certificate().is_none());
    }

    #[test]
    fn dichotomous_grm_and_gpcm_are_comparable() {
        // both reduce to the 2PL, so equality-class refinement applies
        let n = nests(&ModelSpec::grm(5, 2), &ModelSpec::gpcm(5, 2)).unwrap();
        assert_eq!(n.certificate().unwrap().df, 0);
    }

    #[test]
    fn half_constrained_two_pls_do_not_nest() {
        let a = ModelSpec::two_pl_constrained(10, 0..5, 5..10);
        let b = ModelSpec::two_pl_constrained(10, 5..10, 0..5);
        assert!(nests(&a, &b).unwrap().certificate().is_none());
        assert!(nests(&b, &a).unwrap().certificate().is_none());
        // but each nests in the unconstrained 2PL
        let full = ModelSpec::two_pl(10);
        assert_eq!(nests(&a, &full).unwrap().certificate().unwrap().df, 9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(nests(&ModelSpec::two_pl(5), &ModelSpec::two_pl(6)).is_err());
        assert!(nests(&ModelSpec::grm(5, 3), &ModelSpec::grm(5, 4)).is_err());
    }

    #[test]
    fn wrong_direction_is_refused() {
        let n = nests(&ModelSpec::two_pl(10), &ModelSpec::rasch(10)).unwrap();
        assert!(n.certificate().is_none());
    }
}
